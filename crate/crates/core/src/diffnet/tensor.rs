use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// Dense single-sample activation, channel-planar `C×H×W`. Unbounded values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::length("tensor data", data.len(), c * h * w));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            c: 1,
            h: 1,
            w: 1,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            c: data.len(),
            h: 1,
            w: 1,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_image(&self) -> Result<ImageTensor> {
        ImageTensor::from_clamped(self.h, self.w, self.c, self.data.clone())
    }
}

impl From<&ImageTensor> for Tensor {
    fn from(img: &ImageTensor) -> Self {
        Tensor {
            c: img.channels(),
            h: img.height(),
            w: img.width(),
            data: img.data().to_vec(),
        }
    }
}

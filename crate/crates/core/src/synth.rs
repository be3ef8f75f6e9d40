//! Synthetic two-domain data with known alignment.
//!
//! An image is a content shape rendered under a random pose, then styled. The X
//! style draws the shape bright on a dark background; the Y style negates that
//! and blends in a fixed texture, so every aligned X image has an exact Y
//! counterpart with the same content and pose.

use std::f64::consts::PI;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{compose_unaligned, rng_from_seed, DomainDataset, ImageTensor};
use crate::error::{Error, Result};

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    Ellipse,
    Cross,
    Stripes,
    Blob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    StyleX,
    StyleY,
}

/// Ranges of the random pose drawn from the per-image seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise {
    /// Maximum centre offset, in half-widths.
    pub jitter: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
}

impl Default for PoseNoise {
    fn default() -> Self {
        Self {
            jitter: 0.12,
            scale_min: 0.85,
            scale_max: 1.1,
            rotation: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub content: Content,
    pub style: Style,
    pub resolution: usize,
    pub noise: PoseNoise,
    /// Blend weight of the texture in the Y style; 0 makes Y the exact negation of X.
    pub texture: f64,
}

struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    cos: f64,
    sin: f64,
}

fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn draw_pose(noise: &PoseNoise, e_seed: u64) -> Pose {
    let mut rng = rng_from_seed(e_seed);
    let cx = (2.0 * unit(&mut rng) - 1.0) * noise.jitter;
    let cy = (2.0 * unit(&mut rng) - 1.0) * noise.jitter;
    let scale = noise.scale_min + unit(&mut rng) * (noise.scale_max - noise.scale_min);
    let theta = (2.0 * unit(&mut rng) - 1.0) * noise.rotation;
    Pose {
        cx,
        cy,
        scale,
        cos: theta.cos(),
        sin: theta.sin(),
    }
}

/// Whether local point `(x, y)` lies inside the shape.
fn inside(content: Content, x: f64, y: f64) -> bool {
    match content {
        Content::Ellipse => (x / 0.62).powi(2) + (y / 0.42).powi(2) <= 1.0,
        Content::Cross => {
            let (ax, ay) = (x.abs(), y.abs());
            (ax < 0.14 && ay < 0.9) || (ay < 0.14 && ax < 0.9)
        }
        Content::Stripes => {
            let r2 = x * x + y * y;
            r2 < 0.9 * 0.9 && (y / 0.3).rem_euclid(2.0) < 1.0
        }
        Content::Blob => {
            let r = (x * x + y * y).sqrt();
            let phi = y.atan2(x);
            r < 0.5 * (1.0 + 0.3 * (3.0 * phi).sin()) && r > 0.18
        }
    }
}

/// Fixed texture in `[−1, 1]` blended into the Y style.
fn texture_at(u: f64, v: f64) -> f64 {
    (3.0 * PI * u).sin() * (3.0 * PI * v).cos()
}

/// Pixel coverage of the posed shape, in `[0, 1]`.
fn coverage(content: Content, res: usize, pose: &Pose) -> Vec<f64> {
    let mut out = vec![0.0; res * res];
    let step = 2.0 / res as f64;
    let sub = step / SUPERSAMPLE as f64;
    for py in 0..res {
        for px in 0..res {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = -1.0 + px as f64 * step + (sx as f64 + 0.5) * sub;
                    let v = -1.0 + py as f64 * step + (sy as f64 + 0.5) * sub;
                    let (du, dv) = (u - pose.cx, v - pose.cy);
                    let lx = (pose.cos * du + pose.sin * dv) / pose.scale;
                    let ly = (-pose.sin * du + pose.cos * dv) / pose.scale;
                    if inside(content, lx, ly) {
                        hits += 1;
                    }
                }
            }
            out[py * res + px] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

pub fn render(spec: &GenSpec, e_seed: u64) -> ImageTensor {
    let res = spec.resolution;
    let pose = draw_pose(&spec.noise, e_seed);
    let cov = coverage(spec.content, res, &pose);
    let a = spec.texture.clamp(0.0, 1.0);
    let data = cov
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let x = 2.0 * c - 1.0;
            match spec.style {
                Style::StyleX => x,
                Style::StyleY => {
                    let u = -1.0 + (2 * (i % res) + 1) as f64 / res as f64;
                    let v = -1.0 + (2 * (i / res) + 1) as f64 / res as f64;
                    -x * (1.0 - a) + a * texture_at(u, v)
                }
            }
        })
        .collect();
    ImageTensor::from_clamped(res, res, 1, data).expect("square grayscale image")
}

/// Description of a generated pair of domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub resolution: usize,
    pub aligned: Content,
    pub contaminant_x: Content,
    pub contaminant_y: Content,
    pub size_x: usize,
    pub size_y: usize,
    pub ratio_x: f64,
    pub ratio_y: f64,
    pub noise: PoseNoise,
    pub texture: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            resolution: 16,
            aligned: Content::Ellipse,
            contaminant_x: Content::Cross,
            contaminant_y: Content::Stripes,
            size_x: 200,
            size_y: 200,
            ratio_x: 0.5,
            ratio_y: 0.5,
            noise: PoseNoise::default(),
            texture: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn gen(&self, content: Content, style: Style) -> GenSpec {
        GenSpec {
            content,
            style,
            resolution: self.resolution,
            noise: self.noise,
            texture: self.texture,
        }
    }
}

fn render_set(spec: &GenSpec, count: usize, rng: &mut impl RngCore, prefix: &str) -> Result<DomainDataset> {
    let samples: Vec<ImageTensor> = (0..count).map(|_| render(spec, rng.next_u64())).collect();
    let names = (0..count).map(|i| format!("{prefix}{i:05}.png")).collect();
    DomainDataset::new(prefix.trim_end_matches('_'), samples, names, None)
}

fn renamed(ds: DomainDataset, name: &str) -> Result<DomainDataset> {
    let names = (0..ds.len()).map(|i| format!("{}_{i:05}.png", name.to_lowercase())).collect();
    let labels = ds.labels().map(<[_]>::to_vec);
    DomainDataset::new(name, ds.samples().to_vec(), names, labels)
}

/// Builds the two labeled domains described by `spec`.
///
/// Aligned X and Y images share content but use independent poses; contaminants
/// use their own content category.
pub fn make_unaligned_pair(spec: &SynthSpec) -> Result<(DomainDataset, DomainDataset)> {
    if spec.contaminant_x == spec.aligned || spec.contaminant_y == spec.aligned {
        return Err(Error::InvalidArgument(
            "contaminant content must differ from the aligned content".into(),
        ));
    }
    if spec.resolution < 4 || spec.size_x == 0 || spec.size_y == 0 {
        return Err(Error::InvalidArgument("synthetic domains need resolution ≥ 4 and non-empty sizes".into()));
    }
    let mut rng = rng_from_seed(spec.seed);
    let kx = (spec.ratio_x * spec.size_x as f64).round() as usize;
    let ky = (spec.ratio_y * spec.size_y as f64).round() as usize;
    let xa = render_set(&spec.gen(spec.aligned, Style::StyleX), spec.size_x, &mut rng, "xa_")?;
    let xu = render_set(&spec.gen(spec.contaminant_x, Style::StyleX), kx, &mut rng, "xu_")?;
    let ya = render_set(&spec.gen(spec.aligned, Style::StyleY), spec.size_y, &mut rng, "ya_")?;
    let yu = render_set(&spec.gen(spec.contaminant_y, Style::StyleY), ky, &mut rng, "yu_")?;
    let x = compose_unaligned(&xa, &xu, spec.ratio_x, rng.next_u64())?;
    let y = compose_unaligned(&ya, &yu, spec.ratio_y, rng.next_u64())?;
    Ok((renamed(x, "X")?, renamed(y, "Y")?))
}

/// Mean intensity of the central region and of the surrounding border.
pub fn center_border_means(img: &ImageTensor) -> (f64, f64) {
    let (h, w) = (img.height(), img.width());
    let (mut cs, mut cn, mut bs, mut bn) = (0.0, 0, 0.0, 0);
    for y in 0..h {
        for x in 0..w {
            let u = (2 * x + 1) as f64 / w as f64 - 1.0;
            let v = (2 * y + 1) as f64 / h as f64 - 1.0;
            let val = img.get(0, y, x);
            if u.abs().max(v.abs()) < 0.5 {
                cs += val;
                cn += 1;
            } else {
                bs += val;
                bn += 1;
            }
        }
    }
    (cs / cn.max(1) as f64, bs / bn.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(content: Content, style: Style, texture: f64) -> GenSpec {
        GenSpec {
            content,
            style,
            resolution: 16,
            noise: PoseNoise::default(),
            texture,
        }
    }

    #[test]
    fn render_is_pure_and_bounded() {
        for c in [Content::Ellipse, Content::Cross, Content::Stripes, Content::Blob] {
            let s = spec(c, Style::StyleY, 0.3);
            let a = render(&s, 42);
            assert_eq!(a, render(&s, 42));
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn untextured_y_is_negated_x() {
        for seed in 0..5 {
            let x = render(&spec(Content::Cross, Style::StyleX, 0.0), seed);
            let y = render(&spec(Content::Cross, Style::StyleY, 0.0), seed);
            assert!(x.data().iter().zip(y.data()).all(|(a, b)| *a == -*b));
        }
    }

    #[test]
    fn pair_sizes_and_labels() {
        let s = SynthSpec {
            size_x: 40,
            size_y: 40,
            ..SynthSpec::default()
        };
        let (x, y) = make_unaligned_pair(&s).unwrap();
        assert_eq!((x.len(), y.len()), (60, 60));
        assert_eq!(x.count_label(crate::data::Alignment::Unaligned), 20);
        assert_eq!(y.count_label(crate::data::Alignment::Unaligned), 20);
        assert_eq!(x.names()[0], "x_00000.png");

        let zero = SynthSpec {
            ratio_x: 0.0,
            ratio_y: 0.0,
            ..s.clone()
        };
        let (x, _) = make_unaligned_pair(&zero).unwrap();
        assert_eq!(x.count_label(crate::data::Alignment::Unaligned), 0);

        let bad = SynthSpec {
            contaminant_x: Content::Ellipse,
            ..s
        };
        assert!(make_unaligned_pair(&bad).is_err());
    }
}

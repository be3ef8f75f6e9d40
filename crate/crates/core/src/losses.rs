//! Objective terms.
//!
//! Values are computed from scores and images outside any tape. The `*_grad`
//! helpers return the derivative of a term with respect to one sample's network
//! output, scaled by the logical batch size `n`, which is what each per-sample
//! backward pass is seeded with.

use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor;
use crate::error::{Error, Result};

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::length(what, a, b));
    }
    Ok(())
}

/// Least-squares discriminator loss with per-sample weights on both sides.
pub fn disc_loss(real: &[f64], fake: &[f64], beta_real: &[f64], beta_fake: &[f64]) -> Result<f64> {
    check_len("real scores vs weights", real.len(), beta_real.len())?;
    check_len("fake scores vs weights", fake.len(), beta_fake.len())?;
    check_len("real vs fake scores", real.len(), fake.len())?;
    let r: f64 = real.iter().zip(beta_real).map(|(d, b)| b * (d - 1.0) * (d - 1.0)).sum();
    let f: f64 = fake.iter().zip(beta_fake).map(|(d, b)| b * d * d).sum();
    Ok(r / real.len() as f64 + f / fake.len() as f64)
}

pub fn disc_real_grad(score: f64, beta: f64, n: usize) -> f64 {
    2.0 * beta * (score - 1.0) / n as f64
}

pub fn disc_fake_grad(score: f64, beta: f64, n: usize) -> f64 {
    2.0 * beta * score / n as f64
}

/// Per-sample generator adversarial error `(1 − D(G(x)))²`.
pub fn adv_error(score: f64) -> f64 {
    (1.0 - score) * (1.0 - score)
}

pub fn gen_adv_loss(fake: &[f64], beta: &[f64]) -> Result<f64> {
    check_len("fake scores vs weights", fake.len(), beta.len())?;
    let s: f64 = fake.iter().zip(beta).map(|(d, b)| b * adv_error(*d)).sum();
    Ok(s / fake.len() as f64)
}

/// Derivative of the generator adversarial term w.r.t. one fake score.
pub fn gen_adv_grad(score: f64, beta: f64, n: usize) -> f64 {
    -2.0 * beta * (1.0 - score) / n as f64
}

pub fn ess_loss(beta: &[f64]) -> f64 {
    beta.iter().map(|b| b * b).sum::<f64>().sqrt()
}

/// Derivative of the weight objective `Σ βᵢeᵢ/n + λ‖β‖₂` w.r.t. each βᵢ.
pub fn beta_objective_grad(errors: &[f64], beta: &[f64], lambda_ess: f64) -> Result<Vec<f64>> {
    check_len("errors vs weights", errors.len(), beta.len())?;
    let n = beta.len() as f64;
    let norm = ess_loss(beta);
    Ok(errors
        .iter()
        .zip(beta)
        .map(|(e, b)| e / n + if norm > 0.0 { lambda_ess * b / norm } else { 0.0 })
        .collect())
}

/// Mean absolute difference over all pixels of one sample.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Gradient of `scale · mae(target, out)` w.r.t. `out`.
pub fn mae_grad(target: &Tensor, out: &Tensor, scale: f64) -> Vec<f64> {
    let k = scale / out.len() as f64;
    target
        .data
        .iter()
        .zip(&out.data)
        .map(|(t, o)| {
            if o > t {
                k
            } else if o < t {
                -k
            } else {
                0.0
            }
        })
        .collect()
}

fn weighted_mae(a: &[Tensor], b: &[Tensor], beta: &[f64]) -> Result<f64> {
    check_len("images vs reconstructions", a.len(), b.len())?;
    check_len("images vs weights", a.len(), beta.len())?;
    let mut s = 0.0;
    for ((x, r), w) in a.iter().zip(b).zip(beta) {
        s += w * mae(x, r)?;
    }
    Ok(s / a.len() as f64)
}

/// Weighted cycle loss over both directions; the weights enter as constants.
pub fn cycle_loss(
    x: &[Tensor],
    x_rec: &[Tensor],
    y: &[Tensor],
    y_rec: &[Tensor],
    beta_x: &[f64],
    beta_y: &[f64],
) -> Result<f64> {
    Ok(weighted_mae(x, x_rec, beta_x)? + weighted_mae(y, y_rec, beta_y)?)
}

/// Same form as [`cycle_loss`] with `F(x)` and `G(y)` in place of reconstructions.
pub fn identity_loss(
    x: &[Tensor],
    f_of_x: &[Tensor],
    y: &[Tensor],
    g_of_y: &[Tensor],
    beta_x: &[f64],
    beta_y: &[f64],
) -> Result<f64> {
    Ok(weighted_mae(x, f_of_x, beta_x)? + weighted_mae(y, g_of_y, beta_y)?)
}

/// Unweighted least-squares losses, written independently of the weighted forms.
pub mod plain {
    use super::*;

    fn mean(v: impl Iterator<Item = f64>) -> f64 {
        let mut n = 0usize;
        let mut s = 0.0;
        for x in v {
            s += x;
            n += 1;
        }
        s / n as f64
    }

    pub fn disc_loss(real: &[f64], fake: &[f64]) -> f64 {
        mean(real.iter().map(|d| (d - 1.0).powi(2))) + mean(fake.iter().map(|d| d.powi(2)))
    }

    pub fn gen_adv_loss(fake: &[f64]) -> f64 {
        mean(fake.iter().map(|d| (1.0 - d).powi(2)))
    }

    pub fn l1_pair_loss(a: &[Tensor], a_hat: &[Tensor], b: &[Tensor], b_hat: &[Tensor]) -> Result<f64> {
        let l1 = |u: &[Tensor], v: &[Tensor]| -> Result<f64> {
            let per: Result<Vec<f64>> = u.iter().zip(v).map(|(p, q)| mae(p, q)).collect();
            Ok(mean(per?.into_iter()))
        };
        Ok(l1(a, a_hat)? + l1(b, b_hat)?)
    }
}

/// Loss weights of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub cyc: f64,
    pub idt: f64,
    pub ess: f64,
}

/// Component values of one logical batch, before weighting by the lambdas.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub gan_g_xy: f64,
    pub gan_g_yx: f64,
    pub disc_y: f64,
    pub disc_x: f64,
    pub ess_x: f64,
    pub ess_y: f64,
    pub cyc: f64,
    pub idt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g_xy: f64,
    pub gan_g_yx: f64,
    pub disc_y: f64,
    pub disc_x: f64,
    pub ess_x: f64,
    pub ess_y: f64,
    pub cyc: f64,
    pub idt: f64,
    pub total_g: f64,
    pub total_beta_x: f64,
    pub total_beta_y: f64,
}

pub fn assemble(t: &LossTerms, l: &Lambdas) -> LossReport {
    LossReport {
        gan_g_xy: t.gan_g_xy,
        gan_g_yx: t.gan_g_yx,
        disc_y: t.disc_y,
        disc_x: t.disc_x,
        ess_x: t.ess_x,
        ess_y: t.ess_y,
        cyc: t.cyc,
        idt: t.idt,
        total_g: t.gan_g_xy + t.gan_g_yx + l.cyc * t.cyc + l.idt * t.idt,
        total_beta_x: t.gan_g_xy + l.ess * t.ess_x,
        total_beta_y: t.gan_g_yx + l.ess * t.ess_y,
    }
}

impl LossReport {
    pub const COLUMNS: [&'static str; 11] = [
        "gan_g_xy",
        "gan_g_yx",
        "disc_y",
        "disc_x",
        "ess_x",
        "ess_y",
        "cyc",
        "idt",
        "total_g",
        "total_beta_x",
        "total_beta_y",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.gan_g_xy,
            self.gan_g_yx,
            self.disc_y,
            self.disc_x,
            self.ess_x,
            self.ess_y,
            self.cyc,
            self.idt,
            self.total_g,
            self.total_beta_x,
            self.total_beta_y,
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn disc_loss_cases() {
        let b = [1.0, 1.0];
        assert_eq!(disc_loss(&[1.0, 1.0], &[0.0, 0.0], &[0.3, 1.7], &[2.0, 0.0]).unwrap(), 0.0);
        assert!((disc_loss(&[0.5, 0.5], &[0.5, 0.5], &b, &b).unwrap() - 0.5).abs() < 1e-15);
        // real-only contribution with a zero-weight outlier: errors 0.25 and 100
        let real = [0.5, 11.0];
        let d = disc_loss(&real, &[0.0, 0.0], &[2.0, 0.0], &b).unwrap();
        assert!((d - 0.25).abs() < 1e-15);
        assert!(disc_loss(&[0.0], &[0.0, 0.0], &[1.0], &b).is_err());
    }

    #[test]
    fn gen_adv_cases() {
        assert_eq!(gen_adv_loss(&[1.0, 1.0, 1.0], &[1.0, 0.5, 1.5]).unwrap(), 0.0);
        assert!((gen_adv_loss(&[0.5, 0.7], &[1.0, 1.0]).unwrap() - 0.17).abs() < 1e-15);
    }

    #[test]
    fn ess_cases() {
        assert_eq!(ess_loss(&[1.0; 4]), 2.0);
        assert_eq!(ess_loss(&[4.0, 0.0, 0.0, 0.0]), 4.0);
        assert!((ess_loss(&[2.0, 2.0, 0.0, 0.0]) - 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cycle_and_identity_one_pixel() {
        let c = cycle_loss(&[px(0.5)], &[px(0.1)], &[px(0.0)], &[px(0.0)], &[2.0], &[1.0]).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
        let i = identity_loss(&[px(0.2)], &[px(0.0)], &[px(0.3)], &[px(0.3)], &[1.0], &[1.0]).unwrap();
        assert!((i - 0.2).abs() < 1e-15);
        let p = [px(0.1), px(-0.4)];
        assert_eq!(cycle_loss(&p, &p, &p, &p, &[1.0; 2], &[1.0; 2]).unwrap(), 0.0);
    }

    #[test]
    fn assemble_composes_totals() {
        let t = LossTerms {
            gan_g_xy: 0.3,
            gan_g_yx: 0.4,
            disc_y: 0.1,
            disc_x: 0.2,
            ess_x: 4.6,
            ess_y: 4.5,
            cyc: 0.05,
            idt: 0.07,
        };
        let r = assemble(&t, &Lambdas { cyc: 10.0, idt: 10.0, ess: 1.0 });
        assert_eq!(r.total_g, 0.3 + 0.4 + 10.0 * 0.05 + 10.0 * 0.07);
        assert_eq!(r.total_beta_x, 0.3 + 4.6);
        assert_eq!(r.total_beta_y, 0.4 + 4.5);
        let z = assemble(&t, &Lambdas { cyc: 0.0, idt: 0.0, ess: 0.0 });
        assert_eq!(z.total_g, 0.3 + 0.4);
        assert!(z.non_finite().is_none());
    }

    #[test]
    fn mae_grad_signs() {
        let g = mae_grad(&Tensor::vector(vec![0.0, 0.0, 0.0]), &Tensor::vector(vec![1.0, -1.0, 0.0]), 3.0);
        assert_eq!(g, vec![1.0, -1.0, 0.0]);
    }
}

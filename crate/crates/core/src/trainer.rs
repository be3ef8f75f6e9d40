//! The alternating optimization loop.
//!
//! One step updates, in order: both discriminators, both generators jointly, then
//! each importance network. Every sample runs on its own tape and per-sample
//! gradients are added in batch order, so micro-batching only bounds memory and
//! never changes a result.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Sampling};
use crate::data::{rng_from_seed, sample_batch, Alignment, CyclingSampler, DomainDataset, ImageTensor, Rng};
use crate::diffnet::{adam_step, AdamState, Network, Tensor};
use crate::error::{Error, Result};
use crate::importance::{batch_weights, dataset_weights, score_one, weights_vjp, WeightReport};
use crate::losses::{self, assemble, Lambdas, LossReport, LossTerms};
use crate::metrics::ess_statistic;

pub const CHECKPOINT_FORMAT: &str = "irwgan-checkpoint-v1";

/// Where a domain's per-sample weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaSource {
    /// Softmax of the importance network's scores; the network is trained.
    Learned,
    /// Softmax of the importance network's scores; the network is never updated.
    Frozen,
    /// Every weight is exactly 1 and the network is not evaluated.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nets {
    pub g: Network,
    pub f: Network,
    pub d_x: Network,
    pub d_y: Network,
    pub beta_x: Network,
    pub beta_y: Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optims {
    pub g: AdamState,
    pub f: AdamState,
    pub d_x: AdamState,
    pub d_y: AdamState,
    pub beta_x: AdamState,
    pub beta_y: AdamState,
}

impl Optims {
    fn all_mut(&mut self) -> [&mut AdamState; 6] {
        [
            &mut self.g,
            &mut self.f,
            &mut self.d_x,
            &mut self.d_y,
            &mut self.beta_x,
            &mut self.beta_y,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
    /// Kish effective sample size of this batch's weights.
    pub batch_ess_x: f64,
    pub batch_ess_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_ess_x: f64,
    pub mean_ess_y: f64,
    pub mean_total_g: f64,
    /// Mean `(1 − D_Y(G(x)))²` over aligned / unaligned X samples.
    pub adv_x_aligned: Option<f64>,
    pub adv_x_unaligned: Option<f64>,
    /// Mean `(1 − D_X(F(y)))²` over aligned / unaligned Y samples.
    pub adv_y_aligned: Option<f64>,
    pub adv_y_unaligned: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,");
        s.push_str(&LossReport::COLUMNS.join(","));
        s.push_str(",batch_ess_x,batch_ess_y\n");
        for r in &self.steps {
            let _ = write!(s, "{},{},{}", r.step, r.epoch, r.lr);
            for v in r.report.values() {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{},{}", r.batch_ess_x, r.batch_ess_y);
        }
        s
    }

    pub fn epoch_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from(
            "epoch,steps,lr,mean_ess_x,mean_ess_y,mean_total_g,adv_x_aligned,adv_x_unaligned,adv_y_aligned,adv_y_unaligned,wall_clock_s\n",
        );
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{:.3}",
                e.epoch,
                e.steps,
                e.lr,
                e.mean_ess_x,
                e.mean_ess_y,
                e.mean_total_g,
                opt(e.adv_x_aligned),
                opt(e.adv_x_unaligned),
                opt(e.adv_y_aligned),
                opt(e.adv_y_unaligned),
                e.wall_clock_s
            );
        }
        s
    }
}

mod rng_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Saved {
        seed: [u8; 32],
        stream: u64,
        word_pos: u128,
    }

    pub fn serialize<S: Serializer>(rng: &Rng, s: S) -> std::result::Result<S::Ok, S::Error> {
        Saved {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Rng, D::Error> {
        let saved = Saved::deserialize(d)?;
        let mut rng = Rng::from_seed(saved.seed);
        rng.set_stream(saved.stream);
        rng.set_word_pos(saved.word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub nets: Nets,
    pub adam: Optims,
    pub beta_x_source: BetaSource,
    pub beta_y_source: BetaSource,
    #[serde(with = "rng_serde")]
    rng: Rng,
    sampler_x: CyclingSampler,
    sampler_y: CyclingSampler,
    pub log: TrainLog,
}

/// Decorrelated seed for the `k`-th network initializer.
fn init_seed(seed: u64, k: u64) -> u64 {
    seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig, channels: usize, nx: usize, ny: usize) -> Result<Self> {
        cfg.validate()?;
        let gen = cfg.generator.with_channels(channels);
        let disc = cfg.discriminator.with_channels(channels);
        let imp = cfg.importance.with_channels(channels);
        let make = |name: &str, spec: &crate::diffnet::NetworkSpec, k: u64| {
            Network::new(name, spec.clone(), &mut rng_from_seed(init_seed(cfg.seed, k)))
        };
        let nets = Nets {
            g: make("G", &gen, 1)?,
            f: make("F", &gen, 2)?,
            d_x: make("D_X", &disc, 3)?,
            d_y: make("D_Y", &disc, 4)?,
            beta_x: make("beta_X", &imp, 5)?,
            beta_y: make("beta_Y", &imp, 6)?,
        };
        let adam = || AdamState {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            ..AdamState::new(cfg.learning_rate)
        };
        let source = |learn: bool| if learn { BetaSource::Learned } else { BetaSource::Uniform };
        Ok(Self {
            epoch: 0,
            step: 0,
            nets,
            adam: Optims {
                g: adam(),
                f: adam(),
                d_x: adam(),
                d_y: adam(),
                beta_x: adam(),
                beta_y: adam(),
            },
            beta_x_source: source(cfg.learn_beta_x),
            beta_y_source: source(cfg.learn_beta_y),
            rng: rng_from_seed(cfg.seed),
            sampler_x: CyclingSampler::new(nx),
            sampler_y: CyclingSampler::new(ny),
            log: TrainLog::default(),
        })
    }

    fn set_lr(&mut self, lr: f64) {
        for a in self.adam.all_mut() {
            a.lr = lr;
        }
    }

    /// Draws the next X batch, then the next Y batch.
    pub fn next_batches(
        &mut self,
        cfg: &ExperimentConfig,
        x: &DomainDataset,
        y: &DomainDataset,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = cfg.batch_size;
        Ok(match cfg.sampling {
            Sampling::Cycling => {
                let bx = self.sampler_x.next_indices(n, &mut self.rng);
                let by = self.sampler_y.next_indices(n, &mut self.rng);
                (bx, by)
            }
            Sampling::Uniform => {
                let bx = sample_batch(x.samples(), n, &mut self.rng)?.indices;
                let by = sample_batch(y.samples(), n, &mut self.rng)?.indices;
                (bx, by)
            }
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finite(step: u64, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::StepDiverged {
            step,
            term: term.to_string(),
        })
    }
}

fn weights_for(source: BetaSource, net: &Network, xs: &[Tensor]) -> Result<Vec<f64>> {
    match source {
        BetaSource::Uniform => Ok(vec![1.0; xs.len()]),
        BetaSource::Learned | BetaSource::Frozen => {
            let scores: Result<Vec<f64>> = xs.iter().map(|x| Ok(net.infer_one(x)?.item())).collect();
            batch_weights(&scores?)
        }
    }
}

/// Mean over discriminator heads of `(1 − D(G(x)))²`.
pub fn adversarial_error(g: &Network, d: &Network, x: &Tensor) -> Result<f64> {
    let fake = g.infer_one(x)?;
    let scores: Vec<f64> = d.infer(&fake)?.iter().map(Tensor::item).collect();
    Ok(mean(&scores.iter().map(|s| losses::adv_error(*s)).collect::<Vec<_>>()))
}

struct DiscSample {
    grads: Vec<f64>,
    real: Vec<f64>,
    fake: Vec<f64>,
}

/// One sample's contribution to a weighted discriminator loss.
fn disc_sample(d: &Network, real: &Tensor, fake: &Tensor, b_real: f64, b_fake: f64, n: usize) -> Result<DiscSample> {
    let mut tape = crate::diffnet::Tape::new();
    let slot = d.bind(&mut tape);
    let r = tape.input(real.clone());
    let f = tape.input(fake.clone());
    let rs = d.forward(&mut tape, slot, r)?;
    let fs = d.forward(&mut tape, slot, f)?;
    let heads = rs.len() as f64;
    let real_scores: Vec<f64> = rs.iter().map(|v| tape.value(*v).item()).collect();
    let fake_scores: Vec<f64> = fs.iter().map(|v| tape.value(*v).item()).collect();
    let mut seeds = Vec::new();
    for (v, s) in rs.iter().zip(&real_scores) {
        seeds.push((*v, vec![losses::disc_real_grad(*s, b_real, n) / heads]));
    }
    for (v, s) in fs.iter().zip(&fake_scores) {
        seeds.push((*v, vec![losses::disc_fake_grad(*s, b_fake, n) / heads]));
    }
    let seed_refs: Vec<_> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
    let grads = tape.backward(&seed_refs)?;
    Ok(DiscSample {
        grads: grads.slot(slot).to_vec(),
        real: real_scores,
        fake: fake_scores,
    })
}

struct GenSample {
    g_grads: Vec<f64>,
    f_grads: Vec<f64>,
    /// Per-head `D_Y(G(x))` and `D_X(F(y))`.
    d_gx: Vec<f64>,
    d_fy: Vec<f64>,
    cyc_x: f64,
    cyc_y: f64,
    idt_x: f64,
    idt_y: f64,
}

#[allow(clippy::too_many_arguments)]
fn gen_sample(
    nets: &Nets,
    x: &Tensor,
    y: &Tensor,
    bx: f64,
    by: f64,
    n: usize,
    lambda_cyc: f64,
    lambda_idt: f64,
) -> Result<GenSample> {
    let mut tape = crate::diffnet::Tape::new();
    let sg = nets.g.bind(&mut tape);
    let sf = nets.f.bind(&mut tape);
    let sdy = nets.d_y.bind(&mut tape);
    let sdx = nets.d_x.bind(&mut tape);
    let xv = tape.input(x.clone());
    let yv = tape.input(y.clone());

    let gx = nets.g.forward(&mut tape, sg, xv)?[0];
    let d_gx = nets.d_y.forward(&mut tape, sdy, gx)?;
    let fgx = nets.f.forward(&mut tape, sf, gx)?[0];
    let fy = nets.f.forward(&mut tape, sf, yv)?[0];
    let d_fy = nets.d_x.forward(&mut tape, sdx, fy)?;
    let gfy = nets.g.forward(&mut tape, sg, fy)?[0];
    let fx = nets.f.forward(&mut tape, sf, xv)?[0];
    let gy = nets.g.forward(&mut tape, sg, yv)?[0];

    let score = |v: &crate::diffnet::Var| tape.value(*v).item();
    let d_gx_s: Vec<f64> = d_gx.iter().map(score).collect();
    let d_fy_s: Vec<f64> = d_fy.iter().map(score).collect();
    let cyc_x = losses::mae(x, tape.value(fgx))?;
    let cyc_y = losses::mae(y, tape.value(gfy))?;
    let idt_x = losses::mae(x, tape.value(fx))?;
    let idt_y = losses::mae(y, tape.value(gy))?;

    let heads = d_gx.len() as f64;
    let nf = n as f64;
    let mut seeds: Vec<(crate::diffnet::Var, Vec<f64>)> = Vec::new();
    for (v, s) in d_gx.iter().zip(&d_gx_s) {
        seeds.push((*v, vec![losses::gen_adv_grad(*s, bx, n) / heads]));
    }
    for (v, s) in d_fy.iter().zip(&d_fy_s) {
        seeds.push((*v, vec![losses::gen_adv_grad(*s, by, n) / heads]));
    }
    seeds.push((fgx, losses::mae_grad(x, tape.value(fgx), lambda_cyc * bx / nf)));
    seeds.push((gfy, losses::mae_grad(y, tape.value(gfy), lambda_cyc * by / nf)));
    seeds.push((fx, losses::mae_grad(x, tape.value(fx), lambda_idt * bx / nf)));
    seeds.push((gy, losses::mae_grad(y, tape.value(gy), lambda_idt * by / nf)));
    let seed_refs: Vec<_> = seeds.iter().map(|(v, g)| (*v, g.as_slice())).collect();
    let grads = tape.backward(&seed_refs)?;
    Ok(GenSample {
        g_grads: grads.slot(sg).to_vec(),
        f_grads: grads.slot(sf).to_vec(),
        d_gx: d_gx_s,
        d_fy: d_fy_s,
        cyc_x,
        cyc_y,
        idt_x,
        idt_y,
    })
}

/// Gradient of the weight objective pulled back to one importance network.
fn beta_update(
    net: &mut Network,
    adam: &mut AdamState,
    xs: &[Tensor],
    beta: &[f64],
    errors: &[f64],
    lambda_ess: f64,
    micro: usize,
) -> Result<()> {
    let g = losses::beta_objective_grad(errors, beta, lambda_ess)?;
    let sigma = weights_vjp(beta, &g)?;
    for chunk in (0..xs.len()).collect::<Vec<_>>().chunks(micro) {
        for &i in chunk {
            let grads = {
                let mut tape = crate::diffnet::Tape::new();
                let slot = net.bind(&mut tape);
                let v = tape.input(xs[i].clone());
                let out = net.forward(&mut tape, slot, v)?[0];
                tape.backward(&[(out, &[sigma[i]])])?.slot(slot).to_vec()
            };
            net.params.add_grads(&grads)?;
        }
    }
    adam_step(&mut net.params, adam)
}

/// `total_g` on one batch with fixed weights, and its gradients for G and F.
pub fn generator_objective(
    nets: &Nets,
    xs: &[Tensor],
    ys: &[Tensor],
    beta_x: &[f64],
    beta_y: &[f64],
    lambdas: &Lambdas,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = xs.len();
    let mut g_grads = vec![0.0; nets.g.n_params()];
    let mut f_grads = vec![0.0; nets.f.n_params()];
    let mut total = 0.0;
    for i in 0..n {
        let s = gen_sample(nets, &xs[i], &ys[i], beta_x[i], beta_y[i], n, lambdas.cyc, lambdas.idt)?;
        for (a, b) in g_grads.iter_mut().zip(&s.g_grads) {
            *a += b;
        }
        for (a, b) in f_grads.iter_mut().zip(&s.f_grads) {
            *a += b;
        }
        let adv = mean(&s.d_gx.iter().map(|d| losses::adv_error(*d)).collect::<Vec<_>>()) * beta_x[i]
            + mean(&s.d_fy.iter().map(|d| losses::adv_error(*d)).collect::<Vec<_>>()) * beta_y[i];
        let rec = lambdas.cyc * (beta_x[i] * s.cyc_x + beta_y[i] * s.cyc_y)
            + lambdas.idt * (beta_x[i] * s.idt_x + beta_y[i] * s.idt_y);
        total += (adv + rec) / n as f64;
    }
    Ok((total, g_grads, f_grads))
}

/// `total_beta` for one importance network given per-sample adversarial errors,
/// and its gradient for that network.
pub fn beta_objective(net: &Network, xs: &[Tensor], errors: &[f64], lambda_ess: f64) -> Result<(f64, Vec<f64>)> {
    let scores: Vec<f64> = xs.iter().map(|x| score_one(net, x)).collect::<Result<_>>()?;
    let beta = batch_weights(&scores)?;
    if errors.len() != xs.len() {
        return Err(Error::length("errors", errors.len(), xs.len()));
    }
    let value = beta.iter().zip(errors).map(|(b, e)| b * e).sum::<f64>() / xs.len() as f64
        + lambda_ess * losses::ess_loss(&beta);
    let sigma = weights_vjp(&beta, &losses::beta_objective_grad(errors, &beta, lambda_ess)?)?;
    let mut grads = vec![0.0; net.n_params()];
    for (x, s) in xs.iter().zip(&sigma) {
        let mut tape = crate::diffnet::Tape::new();
        let slot = net.bind(&mut tape);
        let v = tape.input(x.clone());
        let out = net.forward(&mut tape, slot, v)?[0];
        for (a, b) in grads.iter_mut().zip(tape.backward(&[(out, &[*s])])?.slot(slot)) {
            *a += b;
        }
    }
    Ok((value, grads))
}

/// Per-step outputs beyond the loss report.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub beta_x: Vec<f64>,
    pub beta_y: Vec<f64>,
}

/// One optimizer step on a logical batch.
pub fn train_step(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    xs: &[Tensor],
    ys: &[Tensor],
) -> Result<StepOutcome> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batches must have equal size ≥ 2, got {n} and {}",
            ys.len()
        )));
    }
    if n % cfg.micro_batch != 0 {
        return Err(Error::Config(format!("micro_batch {} must divide {n}", cfg.micro_batch)));
    }
    let step = state.step + 1;
    let micro = cfg.micro_batch;
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(micro).map(<[usize]>::to_vec).collect();

    // Weights over the full logical batch, fixed for the whole step.
    let beta_x = weights_for(state.beta_x_source, &state.nets.beta_x, xs)?;
    let beta_y = weights_for(state.beta_y_source, &state.nets.beta_y, ys)?;

    // (1) discriminators
    let mut fake_y = Vec::with_capacity(n);
    let mut fake_x = Vec::with_capacity(n);
    for i in 0..n {
        fake_y.push(state.nets.g.infer_one(&xs[i])?);
        fake_x.push(state.nets.f.infer_one(&ys[i])?);
    }
    let heads = match state.nets.d_y.spec() {
        crate::diffnet::NetworkSpec::Discriminator { heads, .. } => heads.len(),
        _ => 1,
    };
    let mut dy_real = vec![Vec::with_capacity(n); heads];
    let mut dy_fake = vec![Vec::with_capacity(n); heads];
    let mut dx_real = vec![Vec::with_capacity(n); heads];
    let mut dx_fake = vec![Vec::with_capacity(n); heads];
    for chunk in &chunks {
        for &i in chunk {
            let s = disc_sample(&state.nets.d_y, &ys[i], &fake_y[i], beta_y[i], beta_x[i], n)?;
            state.nets.d_y.params.add_grads(&s.grads)?;
            for h in 0..heads {
                dy_real[h].push(s.real[h]);
                dy_fake[h].push(s.fake[h]);
            }
            let s = disc_sample(&state.nets.d_x, &xs[i], &fake_x[i], beta_x[i], beta_y[i], n)?;
            state.nets.d_x.params.add_grads(&s.grads)?;
            for h in 0..heads {
                dx_real[h].push(s.real[h]);
                dx_fake[h].push(s.fake[h]);
            }
        }
    }
    let mut disc_y = 0.0;
    let mut disc_x = 0.0;
    for h in 0..heads {
        disc_y += losses::disc_loss(&dy_real[h], &dy_fake[h], &beta_y, &beta_x)?;
        disc_x += losses::disc_loss(&dx_real[h], &dx_fake[h], &beta_x, &beta_y)?;
    }
    let disc_y = finite(step, "disc_y", disc_y / heads as f64)?;
    let disc_x = finite(step, "disc_x", disc_x / heads as f64)?;
    adam_step(&mut state.nets.d_y.params, &mut state.adam.d_y)?;
    adam_step(&mut state.nets.d_x.params, &mut state.adam.d_x)?;

    // (2) generators, jointly
    let mut d_gx = vec![Vec::with_capacity(n); heads];
    let mut d_fy = vec![Vec::with_capacity(n); heads];
    let mut err_x = Vec::with_capacity(n);
    let mut err_y = Vec::with_capacity(n);
    let (mut cyc, mut idt) = (0.0, 0.0);
    for chunk in &chunks {
        for &i in chunk {
            let s = gen_sample(
                &state.nets,
                &xs[i],
                &ys[i],
                beta_x[i],
                beta_y[i],
                n,
                cfg.lambda_cyc,
                cfg.lambda_idt,
            )?;
            state.nets.g.params.add_grads(&s.g_grads)?;
            state.nets.f.params.add_grads(&s.f_grads)?;
            for h in 0..heads {
                d_gx[h].push(s.d_gx[h]);
                d_fy[h].push(s.d_fy[h]);
            }
            err_x.push(mean(&s.d_gx.iter().map(|d| losses::adv_error(*d)).collect::<Vec<_>>()));
            err_y.push(mean(&s.d_fy.iter().map(|d| losses::adv_error(*d)).collect::<Vec<_>>()));
            cyc += beta_x[i] * s.cyc_x + beta_y[i] * s.cyc_y;
            idt += beta_x[i] * s.idt_x + beta_y[i] * s.idt_y;
        }
    }
    let mut gan_g_xy = 0.0;
    let mut gan_g_yx = 0.0;
    for h in 0..heads {
        gan_g_xy += losses::gen_adv_loss(&d_gx[h], &beta_x)?;
        gan_g_yx += losses::gen_adv_loss(&d_fy[h], &beta_y)?;
    }
    let terms = LossTerms {
        gan_g_xy: gan_g_xy / heads as f64,
        gan_g_yx: gan_g_yx / heads as f64,
        disc_y,
        disc_x,
        ess_x: losses::ess_loss(&beta_x),
        ess_y: losses::ess_loss(&beta_y),
        cyc: cyc / n as f64,
        idt: idt / n as f64,
    };
    let report = assemble(&terms, &cfg.lambdas());
    if let Some(term) = report.non_finite() {
        return Err(Error::StepDiverged {
            step,
            term: term.to_string(),
        });
    }
    adam_step(&mut state.nets.g.params, &mut state.adam.g)?;
    adam_step(&mut state.nets.f.params, &mut state.adam.f)?;

    // (3), (4) importance networks against the frozen generators and discriminators
    if state.beta_x_source == BetaSource::Learned {
        if !cfg.joint_beta_update {
            err_x = xs
                .iter()
                .map(|x| adversarial_error(&state.nets.g, &state.nets.d_y, x))
                .collect::<Result<_>>()?;
        }
        beta_update(
            &mut state.nets.beta_x,
            &mut state.adam.beta_x,
            xs,
            &beta_x,
            &err_x,
            cfg.lambda_ess,
            micro,
        )?;
    }
    if state.beta_y_source == BetaSource::Learned {
        if !cfg.joint_beta_update {
            err_y = ys
                .iter()
                .map(|y| adversarial_error(&state.nets.f, &state.nets.d_x, y))
                .collect::<Result<_>>()?;
        }
        beta_update(
            &mut state.nets.beta_y,
            &mut state.adam.beta_y,
            ys,
            &beta_y,
            &err_y,
            cfg.lambda_ess,
            micro,
        )?;
    }
    state.step = step;
    Ok(StepOutcome { report, beta_x, beta_y })
}

/// Per-sample `(1 − D(G(x)))²` over a dataset.
pub fn dataset_adversarial_errors(g: &Network, d: &Network, ds: &DomainDataset) -> Result<Vec<f64>> {
    ds.samples().iter().map(|s| adversarial_error(g, d, &Tensor::from(s))).collect()
}

fn split_means(errors: &[f64], labels: Option<&[Alignment]>) -> (Option<f64>, Option<f64>) {
    let Some(labels) = labels else { return (None, None) };
    let pick = |want: Alignment| {
        let sel: Vec<f64> = errors
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == want)
            .map(|(e, _)| *e)
            .collect();
        (!sel.is_empty()).then(|| mean(&sel))
    };
    (pick(Alignment::Aligned), pick(Alignment::Unaligned))
}

/// Training inputs with labels held apart from the images the loop sees.
pub struct TrainData {
    pub x: DomainDataset,
    pub y: DomainDataset,
    x_labels: Option<Vec<Alignment>>,
    y_labels: Option<Vec<Alignment>>,
    x_tensors: Vec<Tensor>,
    y_tensors: Vec<Tensor>,
}

impl TrainData {
    pub fn new(x: &DomainDataset, y: &DomainDataset) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::InvalidArgument("training needs non-empty datasets".into()));
        }
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("domains differ: {:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(Self {
            x_labels: x.labels().map(<[_]>::to_vec),
            y_labels: y.labels().map(<[_]>::to_vec),
            x: x.without_labels(),
            y: y.without_labels(),
            x_tensors: x.samples().iter().map(Tensor::from).collect(),
            y_tensors: y.samples().iter().map(Tensor::from).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.x.shape().map_or(1, |s| s.2)
    }

    fn labeled(&self) -> bool {
        self.x_labels.is_some() || self.y_labels.is_some()
    }

    /// Adversarial errors split by label; `None` entries where labels are absent.
    pub fn subset_errors(&self, nets: &Nets) -> Result<[Option<f64>; 4]> {
        let (xa, xu) = match &self.x_labels {
            Some(l) => split_means(&dataset_adversarial_errors(&nets.g, &nets.d_y, &self.x)?, Some(l)),
            None => (None, None),
        };
        let (ya, yu) = match &self.y_labels {
            Some(l) => split_means(&dataset_adversarial_errors(&nets.f, &nets.d_x, &self.y)?, Some(l)),
            None => (None, None),
        };
        Ok([xa, xu, ya, yu])
    }

    /// Dataset-global weight reports; labels are reattached for evaluation only.
    pub fn weight_reports(&self, nets: &Nets, chunk: usize) -> Result<(WeightReport, WeightReport)> {
        let relabel = |ds: &DomainDataset, l: &Option<Vec<Alignment>>| -> Result<DomainDataset> {
            DomainDataset::new(ds.name(), ds.samples().to_vec(), ds.names().to_vec(), l.clone())
        };
        Ok((
            dataset_weights(&nets.beta_x, &relabel(&self.x, &self.x_labels)?, chunk)?,
            dataset_weights(&nets.beta_y, &relabel(&self.y, &self.y_labels)?, chunk)?,
        ))
    }
}

/// Architecture choices the specs leave implicit, stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchMetadata {
    pub generator_padding: String,
    pub normalization: String,
    pub upsampling: String,
    pub discriminator_combination: String,
    pub precision: String,
}

impl Default for ArchMetadata {
    fn default() -> Self {
        Self {
            generator_padding: "reflect".into(),
            normalization: "instance, no affine, eps 1e-5".into(),
            upsampling: "nearest x2 then 3x3 convolution".into(),
            discriminator_combination: "mean of per-head losses".into(),
            precision: "f64".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub metadata: ArchMetadata,
    pub config: ExperimentConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format tag `{}`", ck.format)));
        }
        Ok(ck)
    }
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("ep{epoch}.ckpt"))
}

/// Newest checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k: usize = name.strip_prefix("ep")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((k, e.path()))
        })
        .max_by_key(|(k, _)| *k)
        .map(|(_, p)| p)
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Tiles `[x, G(x), F(G(x))]` rows for the first few X samples followed by
/// `[y, F(y), G(F(y))]` rows for Y.
pub fn translation_grid(nets: &Nets, data: &TrainData, rows: usize) -> Result<ImageTensor> {
    let mut tiles: Vec<[Tensor; 3]> = Vec::new();
    for x in data.x_tensors.iter().take(rows) {
        let gx = nets.g.infer_one(x)?;
        let rec = nets.f.infer_one(&gx)?;
        tiles.push([x.clone(), gx, rec]);
    }
    for y in data.y_tensors.iter().take(rows) {
        let fy = nets.f.infer_one(y)?;
        let rec = nets.g.infer_one(&fy)?;
        tiles.push([y.clone(), fy, rec]);
    }
    let (c, h, w) = tiles[0][0].shape();
    let (gh, gw) = (h * tiles.len(), w * 3);
    let mut data_out = vec![0.0; c * gh * gw];
    for (r, row) in tiles.iter().enumerate() {
        for (col, t) in row.iter().enumerate() {
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        data_out[(ch * gh + r * h + yy) * gw + col * w + xx] = t.data[(ch * h + yy) * w + xx];
                    }
                }
            }
        }
    }
    ImageTensor::from_clamped(gh, gw, c, data_out)
}

/// Run-directory writer; `None` keeps everything in memory.
struct Artifacts<'a> {
    dir: Option<&'a Path>,
}

impl Artifacts<'_> {
    fn prepare(&self, cfg: &ExperimentConfig) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        create_dir(&dir.join("checkpoints"))?;
        create_dir(&dir.join("samples"))?;
        write_file(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?)
    }

    fn epoch_end(&self, state: &TrainState, cfg: &ExperimentConfig, data: &TrainData) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        write_file(&dir.join("log.csv"), state.log.csv())?;
        write_file(&dir.join("epoch_summary.csv"), state.log.epoch_csv())?;
        let e = state.epoch;
        if e % cfg.checkpoint_every == 0 || e == cfg.epochs {
            Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                metadata: ArchMetadata::default(),
                config: cfg.clone(),
                state: state.clone(),
            }
            .save(&checkpoint_path(dir, e))?;
            translation_grid(&state.nets, data, 4)?.save_png(&dir.join("samples").join(format!("ep{e}.png")))?;
        }
        Ok(())
    }

    fn finish(&self, state: &TrainState, cfg: &ExperimentConfig, data: &TrainData) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let (wx, wy) = data.weight_reports(&state.nets, cfg.report_chunk)?;
        wx.write(dir, "weights_X")?;
        wy.write(dir, "weights_Y")
    }
}

/// Called after every completed epoch.
pub type EpochHook<'a> = dyn FnMut(&TrainState, &TrainData) -> Result<()> + 'a;

fn train_loop(
    mut state: TrainState,
    cfg: &ExperimentConfig,
    data: &TrainData,
    out: Option<&Path>,
    hook: &mut EpochHook<'_>,
) -> Result<TrainState> {
    let art = Artifacts { dir: out };
    art.prepare(cfg)?;
    let iters = cfg.iters_for(data.x.len(), data.y.len());
    for epoch in state.epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        state.set_lr(lr);
        let mut ess_x = Vec::with_capacity(iters);
        let mut ess_y = Vec::with_capacity(iters);
        let mut total_g = Vec::with_capacity(iters);
        for _ in 0..iters {
            let (ix, iy) = state.next_batches(cfg, &data.x, &data.y)?;
            let xs: Vec<Tensor> = ix.iter().map(|&i| data.x_tensors[i].clone()).collect();
            let ys: Vec<Tensor> = iy.iter().map(|&i| data.y_tensors[i].clone()).collect();
            let out = train_step(&mut state, cfg, &xs, &ys)?;
            let row = StepRow {
                step: state.step,
                epoch,
                lr,
                report: out.report,
                batch_ess_x: ess_statistic(&out.beta_x)?,
                batch_ess_y: ess_statistic(&out.beta_y)?,
            };
            ess_x.push(row.batch_ess_x);
            ess_y.push(row.batch_ess_y);
            total_g.push(row.report.total_g);
            state.log.steps.push(row);
        }
        let [xa, xu, ya, yu] = if data.labeled() {
            data.subset_errors(&state.nets)?
        } else {
            [None; 4]
        };
        state.epoch = epoch;
        state.log.epochs.push(EpochSummary {
            epoch,
            steps: iters,
            lr,
            mean_ess_x: mean(&ess_x),
            mean_ess_y: mean(&ess_y),
            mean_total_g: mean(&total_g),
            adv_x_aligned: xa,
            adv_x_unaligned: xu,
            adv_y_aligned: ya,
            adv_y_unaligned: yu,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        art.epoch_end(&state, cfg, data)?;
        hook(&state, data)?;
    }
    art.finish(&state, cfg, data)?;
    Ok(state)
}

/// Trains from scratch; with `out` set, writes the run directory as it goes.
pub fn run_training(
    x: &DomainDataset,
    y: &DomainDataset,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<TrainState> {
    run_training_with(x, y, cfg, out, &mut |_, _| Ok(()))
}

pub fn run_training_with(
    x: &DomainDataset,
    y: &DomainDataset,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    hook: &mut EpochHook<'_>,
) -> Result<TrainState> {
    let data = TrainData::new(x, y)?;
    let state = TrainState::new(cfg, data.channels(), x.len(), y.len())?;
    train_loop(state, cfg, &data, out, hook)
}

/// Continues from a checkpoint until the checkpoint's configured epoch count.
pub fn resume_training(
    x: &DomainDataset,
    y: &DomainDataset,
    checkpoint: &Checkpoint,
    out: Option<&Path>,
) -> Result<TrainState> {
    let data = TrainData::new(x, y)?;
    train_loop(checkpoint.state.clone(), &checkpoint.config, &data, out, &mut |_, _| Ok(()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub epoch: usize,
    pub mean_aligned: f64,
    pub mean_unaligned: f64,
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("epoch,mean_aligned,mean_unaligned\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.mean_aligned, r.mean_unaligned);
    }
    s
}

/// Trains with all weights fixed to 1 and records, per epoch (including the
/// untrained epoch 0), the mean `(1 − D_X(F(y)))²` over aligned and unaligned Y.
pub fn hypothesis_probe(
    x: &DomainDataset,
    y: &DomainDataset,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<ProbeRow>> {
    let labels = y
        .labels()
        .ok_or_else(|| Error::MissingLabels("the probe splits Y by alignment".into()))?
        .to_vec();
    if !labels.iter().any(|l| l.is_aligned()) || labels.iter().all(|l| l.is_aligned()) {
        return Err(Error::MissingLabels("the probe needs both aligned and unaligned Y samples".into()));
    }
    let cfg = ExperimentConfig {
        learn_beta_x: false,
        learn_beta_y: false,
        ..cfg.clone()
    };
    let data = TrainData::new(x, y)?;
    let probe_row = |epoch: usize, nets: &Nets, data: &TrainData| -> Result<ProbeRow> {
        let e = dataset_adversarial_errors(&nets.f, &nets.d_x, &data.y)?;
        let (a, u) = split_means(&e, Some(&labels));
        Ok(ProbeRow {
            epoch,
            mean_aligned: a.expect("aligned present"),
            mean_unaligned: u.expect("unaligned present"),
        })
    };
    let state = TrainState::new(&cfg, data.channels(), x.len(), y.len())?;
    let mut rows = vec![probe_row(0, &state.nets, &data)?];
    train_loop(state, &cfg, &data, out, &mut |s, d| {
        rows.push(probe_row(s.epoch, &s.nets, d)?);
        Ok(())
    })?;
    if let Some(dir) = out {
        write_file(&dir.join("hypothesis_probe.csv"), probe_csv(&rows))?;
    }
    Ok(rows)
}

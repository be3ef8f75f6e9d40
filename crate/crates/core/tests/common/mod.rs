//! Checks shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use irwgan::data::{rng_from_seed, Rng};
use irwgan::diffnet::{grad_check, grad_check_piecewise, GradCheckReport, Network, Tensor};
use irwgan::importance::{batch_weights, weights_vjp};
use irwgan::losses::{self, Lambdas};
use irwgan::trainer::{beta_objective, generator_objective, Nets, TrainState};
use irwgan::{ExperimentConfig, Result};
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_image(rng: &mut Rng, side: usize) -> Tensor {
    let data = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(1, side, side, data).unwrap()
}

pub fn reduced_nets(seed: u64) -> Nets {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::reduced()
    };
    TrainState::new(&cfg, 1, 4, 4).unwrap().nets
}

pub fn with_values(net: &Network, values: &[f64]) -> Network {
    let mut n = net.clone();
    n.params.values.copy_from_slice(values);
    n
}

/// Each scalar loss term against central differences in its direct inputs.
pub fn loss_term_reports() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = rng_from_seed(3);
    let n = 6;
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let real = draw(-1.0, 2.0);
    let fake = draw(-1.0, 2.0);
    let br = draw(0.1, 2.0);
    let bf = draw(0.1, 2.0);
    let scores = draw(-2.0, 2.0);
    let mut out = Vec::new();

    let a: Vec<f64> = real.iter().zip(&br).map(|(s, b)| losses::disc_real_grad(*s, *b, n)).collect();
    out.push(("disc_loss (real scores)", grad_check(|t| losses::disc_loss(t, &fake, &br, &bf), &real, &a, H, None).unwrap()));
    let a: Vec<f64> = fake.iter().zip(&bf).map(|(s, b)| losses::disc_fake_grad(*s, *b, n)).collect();
    out.push(("disc_loss (fake scores)", grad_check(|t| losses::disc_loss(&real, t, &br, &bf), &fake, &a, H, None).unwrap()));
    let a: Vec<f64> = fake.iter().zip(&bf).map(|(s, b)| losses::gen_adv_grad(*s, *b, n)).collect();
    out.push(("gen_adv_loss (scores)", grad_check(|t| losses::gen_adv_loss(t, &bf), &fake, &a, H, None).unwrap()));
    let errors: Vec<f64> = fake.iter().map(|s| losses::adv_error(*s)).collect();
    out.push((
        "gen_adv_loss (weights)",
        grad_check(|t| losses::gen_adv_loss(&fake, t), &bf, &errors.iter().map(|e| e / n as f64).collect::<Vec<_>>(), H, None)
            .unwrap(),
    ));
    let norm = losses::ess_loss(&br);
    out.push((
        "ess_loss",
        grad_check(|t| Ok(losses::ess_loss(t)), &br, &br.iter().map(|b| b / norm).collect::<Vec<_>>(), H, None).unwrap(),
    ));
    let beta = batch_weights(&scores).unwrap();
    let a = weights_vjp(&beta, &losses::beta_objective_grad(&errors, &beta, 0.7).unwrap()).unwrap();
    out.push((
        "weight objective through softmax",
        grad_check(
            |s| {
                let b = batch_weights(s)?;
                Ok(losses::gen_adv_loss(&fake, &b)? + 0.7 * losses::ess_loss(&b))
            },
            &scores,
            &a,
            H,
            None,
        )
        .unwrap(),
    ));
    let target = random_image(&mut rng, 4);
    let recon = random_image(&mut rng, 4);
    let a = losses::mae_grad(&target, &recon, 2.5);
    out.push((
        "cycle/identity mae",
        grad_check(|t| Ok(2.5 * losses::mae(&target, &Tensor::new(1, 4, 4, t.to_vec())?)?), &recon.data, &a, H, None).unwrap(),
    ));
    out
}

/// `total_g` over G and F parameters on a 4-sample batch, 200 random coordinates.
pub fn composed_generator_report() -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(21);
    let nets = reduced_nets(2);
    let xs: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
    let ys: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
    let bx = batch_weights(&[0.3, -0.2, 0.9, 0.0])?;
    let by = batch_weights(&[-0.5, 0.1, 0.4, 0.2])?;
    let lambdas = Lambdas {
        cyc: 10.0,
        idt: 5.0,
        ess: 1.0,
    };
    let (_, gg, fg) = generator_objective(&nets, &xs, &ys, &bx, &by, &lambdas)?;
    let ng = nets.g.n_params();
    let theta: Vec<f64> = nets.g.params.values.iter().chain(&nets.f.params.values).cloned().collect();
    let analytic: Vec<f64> = gg.into_iter().chain(fg).collect();
    // Absolute errors and ReLUs make the objective piecewise smooth; coordinates
    // whose ±h stencil straddles a kink are skipped.
    grad_check_piecewise(
        |t| {
            let mut n = nets.clone();
            n.g.params.values.copy_from_slice(&t[..ng]);
            n.f.params.values.copy_from_slice(&t[ng..]);
            Ok(generator_objective(&n, &xs, &ys, &bx, &by, &lambdas)?.0)
        },
        &theta,
        &analytic,
        H,
        Some((200, &mut rng)),
        1e-9,
    )
}

/// `total_beta_x` over the importance network's parameters, 300 random coordinates.
pub fn composed_weight_report() -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(22);
    // Fresh initializations put every score within ~1e-3 of zero, where most
    // gradients sit below the finite-difference noise floor; check at a point
    // with spread-out scores instead.
    let mut net = reduced_nets(3).beta_x;
    for v in net.params.values.iter_mut() {
        *v *= 6.0;
    }
    let xs: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
    let errors = [0.2, 0.9, 0.4, 1.3];
    let (_, analytic) = beta_objective(&net, &xs, &errors, 1.0)?;
    grad_check(
        |t| Ok(beta_objective(&with_values(&net, t), &xs, &errors, 1.0)?.0),
        &net.params.values,
        &analytic,
        H,
        Some((300, &mut rng)),
    )
}

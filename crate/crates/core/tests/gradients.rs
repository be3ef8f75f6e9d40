//! Analytic gradients against central differences.

mod common;

use common::{composed_generator_report, composed_weight_report, loss_term_reports, random_image, with_values, H, TOL};
use irwgan::data::rng_from_seed;
use irwgan::diffnet::{grad_check, Network, NetworkSpec, Tape, Tensor};
use irwgan::Result;
use rand::Rng as _;

/// `Σ_heads Σ_k w_k · out_k` and its gradient w.r.t. the parameters.
fn projected(net: &Network, x: &Tensor, w: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let slot = net.bind(&mut tape);
    let v = tape.input(x.clone());
    let outs = net.forward(&mut tape, slot, v)?;
    let mut value = 0.0;
    for (o, wk) in outs.iter().zip(w) {
        value += tape.value(*o).data.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>();
    }
    let seeds: Vec<_> = outs.iter().zip(w).map(|(o, wk)| (*o, wk.as_slice())).collect();
    let grads = tape.backward(&seeds)?;
    Ok((value, grads.slot(slot).to_vec()))
}

fn check_network(spec: NetworkSpec, side: usize, coords: usize) {
    let mut rng = rng_from_seed(11);
    let net = Network::new("n", spec, &mut rng).unwrap();
    let x = random_image(&mut rng, side);
    let shapes = net.spec().output_shapes((1, side, side)).unwrap();
    let w: Vec<Vec<f64>> = shapes
        .iter()
        .map(|(c, h, ww)| (0..c * h * ww).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let (_, analytic) = projected(&net, &x, &w).unwrap();
    let theta = net.params.values.clone();
    let report = grad_check(
        |t| Ok(projected(&with_values(&net, t), &x, &w)?.0),
        &theta,
        &analytic,
        H,
        Some((coords, &mut rng)),
    )
    .unwrap();
    assert!(report.max_rel_err <= TOL, "{report:?}");
}

#[test]
fn generator_parameters() {
    check_network(NetworkSpec::reduced_generator(1), 8, 300);
}

#[test]
fn discriminator_parameters() {
    check_network(NetworkSpec::reduced_discriminator(1), 16, 300);
}

#[test]
fn importance_parameters() {
    check_network(NetworkSpec::reduced_importance(1), 16, 300);
}

#[test]
fn scalar_loss_terms() {
    for (name, r) in loss_term_reports() {
        assert!(r.max_rel_err <= TOL, "{name}: {r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn composed_generator_objective() {
    let r = composed_generator_report().unwrap();
    assert!(r.max_rel_err <= TOL, "{r:?}");
    assert!(r.checked >= 100, "{r:?}");
}

#[test]
fn composed_weight_objective() {
    let r = composed_weight_report().unwrap();
    assert!(r.max_rel_err <= TOL, "{r:?}");
}

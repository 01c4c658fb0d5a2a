//! Central finite-difference verification of the backward rules.
//!
//! Each check builds a scalar from some inputs on a fresh tape, compares the
//! reverse-mode gradient against `(f(x+ε) − f(x−ε)) / 2ε` element by element
//! and reports the worst relative error
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{invalid, Result};
use crate::model::{ArchConfig, RsgnParams};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;
use crate::trainer;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Probe at most this many elements per input (all when `None`).
    pub max_probes_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_probes_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub probes: usize,
    /// Probes whose ±ε evaluations took a different ReLU / max-pool branch
    /// than the unperturbed point; finite differences are meaningless there,
    /// so they are excluded from the error.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares analytic and numeric gradients of `build` with respect to every
/// tensor in `inputs`.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor],
    build: F,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| invalid!("gradient check `{name}` must build a scalar"))?;
        Ok((v, tape.kink_signature()))
    };

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let base_signature = tape.kink_signature();

    let mut rng = stream(cfg.seed, Stream::Probe, 0);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut skipped = 0;
    let mut perturbed = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = match cfg.max_probes_per_input {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for j in indices {
            let orig = inputs[k].data()[j];
            perturbed[k].data_mut()[j] = orig + cfg.eps;
            let (plus, sig_plus) = evaluate(&perturbed)?;
            perturbed[k].data_mut()[j] = orig - cfg.eps;
            let (minus, sig_minus) = evaluate(&perturbed)?;
            perturbed[k].data_mut()[j] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
            probes += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        probes,
        skipped,
        max_rel_error: worst,
        passed: worst < cfg.tolerance && probes > 0,
    })
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal samples pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v + gap * v.signum()
    })
}

/// A random permutation of evenly spaced values: no ties, no near-ties.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let order = sample(rng, n, n).into_vec();
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - n as f64 * 0.005)
}

/// Random projection to a scalar.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, Stream::Fixture, x.index() as u64);
    let w = normal(tape.value(x).shape(), &mut rng);
    tape.weighted_sum(x, &w)
}

/// One finite-difference check per differentiable op, in registration order.
pub fn op_suite(cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&kind| op_check(kind, cfg, fault))
        .collect()
}

pub fn op_check(kind: OpKind, cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<CheckReport> {
    let mut rng = stream(cfg.seed, Stream::Fixture, kind as u64 + 1000);
    let rng = &mut rng;
    let seed = cfg.seed;
    let name = kind.name();
    match kind {
        OpKind::Conv2d => {
            let inputs = [
                normal(&[2, 3, 8, 8], rng),
                normal(&[4, 3, 3, 3], rng),
                normal(&[4], rng),
                normal(&[2, 3, 1, 1], rng),
                normal(&[2], rng),
            ];
            check(
                name,
                &inputs,
                |t, v| {
                    let same = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    let strided = t.conv2d(v[0], v[1], v[2], 0, 2)?;
                    let point = t.conv2d(v[0], v[3], v[4], 0, 1)?;
                    let a = project(t, same, seed)?;
                    let b = project(t, strided, seed)?;
                    let c = project(t, point, seed)?;
                    t.linear_combination(&[(a, 1.0), (b, 1.0), (c, 1.0)], 1.0)
                },
                cfg,
                fault,
            )
        }
        OpKind::ConvTranspose2d => {
            let inputs = [
                normal(&[2, 3, 4, 4], rng),
                normal(&[3, 4, 2, 2], rng),
                normal(&[4], rng),
            ];
            check(
                name,
                &inputs,
                |t, v| {
                    let y = t.conv_transpose2d(v[0], v[1], v[2], 2)?;
                    project(t, y, seed)
                },
                cfg,
                fault,
            )
        }
        OpKind::Relu => {
            let inputs = [away_from_zero(&[2, 3, 5, 5], 0.05, rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, seed)
                },
                cfg,
                fault,
            )
        }
        OpKind::Sigmoid => {
            let inputs = [normal(&[2, 3, 5, 5], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let y = t.sigmoid(v[0]);
                    project(t, y, seed)
                },
                cfg,
                fault,
            )
        }
        OpKind::MaxPool2 => {
            let inputs = [distinct(&[2, 3, 6, 6], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let y = t.maxpool2(v[0])?;
                    project(t, y, seed)
                },
                cfg,
                fault,
            )
        }
        OpKind::UpsampleBilinear => {
            let inputs = [normal(&[1, 2, 4, 5], rng), normal(&[1, 2, 7, 7], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let a = t.upsample_bilinear(v[0], 2)?;
                    let b = t.upsample_bilinear(v[0], 4)?;
                    let c = t.resize_bilinear(v[1], 16, 12)?;
                    let pa = project(t, a, seed)?;
                    let pb = project(t, b, seed)?;
                    let pc = project(t, c, seed)?;
                    t.linear_combination(&[(pa, 1.0), (pb, 1.0), (pc, 1.0)], 1.0)
                },
                cfg,
                fault,
            )
        }
        OpKind::AdaptiveAvgPool => {
            let inputs = [normal(&[2, 3, 9, 7], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let mut terms = Vec::new();
                    for s in [1, 3, 5, 7] {
                        let y = t.adaptive_avg_pool(v[0], s)?;
                        terms.push((project(t, y, seed)?, 1.0));
                    }
                    t.linear_combination(&terms, 1.0)
                },
                cfg,
                fault,
            )
        }
        OpKind::ConcatChannels => {
            let inputs = [normal(&[2, 2, 5, 5], rng), normal(&[2, 3, 5, 5], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let y = t.concat_channels(&[v[0], v[1], v[0]])?;
                    project(t, y, seed)
                },
                cfg,
                fault,
            )
        }
        OpKind::Add => {
            let inputs = [normal(&[2, 3, 5, 5], rng), normal(&[2, 3, 5, 5], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    let z = t.add(y, v[0])?;
                    project(t, z, seed)
                },
                cfg,
                fault,
            )
        }
        OpKind::WeightedBce => {
            let pred = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(0.05..0.95));
            let target = Tensor::from_fn(&[2, 1, 8, 8], |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 });
            check(name, &[pred], |t, v| t.weighted_bce(v[0], &target), cfg, fault)
        }
        OpKind::Sum => {
            let inputs = [normal(&[3, 4, 5, 2], rng)];
            check(name, &inputs, |t, v| Ok(t.sum(v[0])), cfg, fault)
        }
        OpKind::WeightedSum => {
            let inputs = [normal(&[2, 2, 6, 5], rng)];
            check(name, &inputs, |t, v| project(t, v[0], seed), cfg, fault)
        }
        OpKind::LinearCombination => {
            let inputs = [normal(&[120], rng), normal(&[], rng)];
            check(
                name,
                &inputs,
                |t, v| {
                    let a = project(t, v[0], seed)?;
                    t.linear_combination(&[(a, 2.0), (v[1], -0.5), (a, 1.0)], 3.0)
                },
                cfg,
                fault,
            )
        }
        OpKind::Leaf => Err(invalid!("leaves have no backward rule to check")),
    }
}

/// Whole-network check: toy architecture, recursive refinement with
/// `iterations` passes, loss = the weighted refinement loss, probed over
/// every parameter.
pub fn network_check(
    arch: &ArchConfig,
    extent: usize,
    iterations: usize,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<CheckReport> {
    let params = RsgnParams::init(arch, cfg.seed)?;
    let mut rng = stream(cfg.seed, Stream::Fixture, 1);
    let image_channels = arch.in_channels - 1;
    let image = Tensor::from_fn(&[1, image_channels, extent, extent], |_| rng.random::<f64>());
    let target = Tensor::from_fn(
        &[1, 1, extent, extent],
        |_| if rng.random_bool(0.15) { 1.0 } else { 0.0 },
    );
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let template = params.clone();
    check(
        "network",
        &inputs,
        |tape, vars| {
            let mut it = vars.iter().copied();
            let net = template.net.map(|_| it.next().expect("one var per tensor"));
            let x = tape.constant(image.clone());
            let trace = trainer::refine_on_tape(tape, &net, x, iterations, false)?;
            let report = trainer::loss_on_tape(tape, &trace, &target)?;
            Ok(report.total)
        },
        cfg,
        fault,
    )
}

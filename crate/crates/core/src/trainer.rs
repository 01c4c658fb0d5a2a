//! Recursive refinement, the deep-supervision loss and the two-stage
//! training schedule.
//!
//! One network `F` is applied `I` times; pass `i` sees the image
//! concatenated with the previous prediction `ŷ^(i-1)` (zeros for the first
//! pass). Each pass is supervised on its master and both side outputs, and
//! later passes weigh more: `L_r = Σ i·L_t^i / Z` with `Z = I(I+1)/2`.

use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;

use crate::autodiff::{self, Adam, AdamConfig, Tape, Var};
use crate::dataset::{check_patch_size, pad_reflect, sample_patch, Patch, Sample};
use crate::error::{invalid, shape_err, Error, Result};
use crate::maps::ProbMap;
use crate::model::{self, ArchConfig, ForwardOutputs, ForwardVars, Network, RsgnParams};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Prediction and outputs of every pass, recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    /// `ŷ^0 … ŷ^I`, each `N×1×H×W`.
    pub predictions: Vec<Var>,
    /// Logit maps of passes `1 … I`.
    pub outputs: Vec<ForwardVars>,
}

/// Runs `iterations` passes. With `detach` the recursed prediction is cut
/// from the graph between passes.
pub fn refine_on_tape(
    tape: &mut Tape,
    net: &Network<Var>,
    x: Var,
    iterations: usize,
    detach: bool,
) -> Result<TapeTrace> {
    if iterations == 0 {
        return Err(invalid!("refinement needs at least one iteration"));
    }
    let (n, _, h, w) = tape.value(x).dims4()?;
    let mut predictions = vec![tape.constant(Tensor::zeros(&[n, 1, h, w]))];
    let mut outputs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let prev = *predictions.last().expect("non-empty");
        let prev = if detach { tape.detach(prev) } else { prev };
        let input = tape.concat_channels(&[x, prev])?;
        let out = model::forward(tape, net, input)?;
        predictions.push(tape.sigmoid(out.master));
        outputs.push(out);
    }
    Ok(TapeTrace { predictions, outputs })
}

#[derive(Clone, Debug)]
pub struct TapeLoss {
    /// `L_t^i` for `i = 1 … I`.
    pub per_iteration: Vec<Var>,
    /// `L_r`.
    pub total: Var,
}

pub fn loss_on_tape(tape: &mut Tape, trace: &TapeTrace, target: &Tensor) -> Result<TapeLoss> {
    let mut per_iteration = Vec::with_capacity(trace.outputs.len());
    for out in &trace.outputs {
        let mut terms = Vec::with_capacity(3);
        for logits in [out.master, out.side2, out.side3] {
            let p = tape.sigmoid(logits);
            terms.push((tape.weighted_bce(p, target)?, 1.0));
        }
        per_iteration.push(tape.linear_combination(&terms, 1.0)?);
    }
    let z = normalizer(per_iteration.len()) as f64;
    let weighted: Vec<(Var, f64)> = per_iteration
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64))
        .collect();
    let total = tape.linear_combination(&weighted, z)?;
    Ok(TapeLoss { per_iteration, total })
}

/// `Z = 1 + 2 + … + I`.
pub fn normalizer(iterations: usize) -> usize {
    iterations * (iterations + 1) / 2
}

/// Iteration weights `i / Z`.
pub fn loss_weights(iterations: usize) -> Vec<f64> {
    let z = normalizer(iterations) as f64;
    (1..=iterations).map(|i| i as f64 / z).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub per_iteration: Vec<f64>,
    pub total: f64,
    pub z: usize,
}

/// `L_r` from the per-iteration losses `L_t^1 … L_t^I`.
pub fn refinement_loss(per_iteration: &[f64]) -> Result<LossReport> {
    if per_iteration.is_empty() {
        return Err(invalid!("refinement loss needs at least one iteration"));
    }
    let z = normalizer(per_iteration.len());
    let weighted: f64 = per_iteration.iter().enumerate().map(|(i, l)| (i + 1) as f64 * l).sum();
    Ok(LossReport {
        per_iteration: per_iteration.to_vec(),
        total: weighted / z as f64,
        z,
    })
}

/// Tape-free refinement result.
#[derive(Clone, Debug)]
pub struct RefinementTrace {
    /// `ŷ^0 … ŷ^I`, each `N×1×H×W` with values in `[0, 1]`.
    pub predictions: Vec<Tensor>,
    pub outputs: Vec<ForwardOutputs>,
}

impl RefinementTrace {
    pub fn iterations(&self) -> usize {
        self.outputs.len()
    }

    /// The final prediction `ŷ^I`.
    pub fn last(&self) -> &Tensor {
        self.predictions.last().expect("trace holds ŷ^0")
    }
}

/// Refinement with frozen parameters; `x` is the image without the
/// prediction channel.
pub fn refine_forward(params: &RsgnParams, x: &Tensor, iterations: usize) -> Result<RefinementTrace> {
    let mut tape = Tape::new();
    let net = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let trace = refine_on_tape(&mut tape, &net, xv, iterations, false)?;
    Ok(RefinementTrace {
        predictions: trace.predictions.iter().map(|&v| tape.value(v).clone()).collect(),
        outputs: trace
            .outputs
            .iter()
            .map(|o| ForwardOutputs {
                master: tape.value(o.master).clone(),
                side2: tape.value(o.side2).clone(),
                side3: tape.value(o.side3).clone(),
            })
            .collect(),
    })
}

/// `L_t^i` of a finished trace, `1 ≤ i ≤ I`.
pub fn iteration_loss(trace: &RefinementTrace, target: &Tensor, i: usize) -> Result<f64> {
    if i == 0 || i > trace.iterations() {
        return Err(invalid!("iteration index {i} outside 1..={}", trace.iterations()));
    }
    let out = &trace.outputs[i - 1];
    let mut tape = Tape::new();
    let mut total = 0.0;
    for logits in [&out.master, &out.side2, &out.side3] {
        let v = tape.constant(logits.clone());
        let p = tape.sigmoid(v);
        let l = tape.weighted_bce(p, target)?;
        total += tape.value(l).item().expect("scalar");
    }
    Ok(total)
}

pub fn trace_loss(trace: &RefinementTrace, target: &Tensor) -> Result<LossReport> {
    let per: Vec<f64> = (1..=trace.iterations())
        .map(|i| iteration_loss(trace, target, i))
        .collect::<Result<_>>()?;
    refinement_loss(&per)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Refinement passes `I` used in stage 2.
    pub iterations: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    pub patch_size: usize,
    /// Share of each batch centred on a vessel pixel.
    pub pos_fraction: f64,
    /// Fixed patches, drawn once from the training images, scored after
    /// every epoch.
    pub val_patches: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Cut gradients between refinement passes.
    pub detach: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3,
            stage1_epochs: 50,
            stage2_epochs: 50,
            batch_size: 8,
            steps_per_epoch: 2,
            patch_size: 64,
            pos_fraction: 0.5,
            val_patches: 4,
            seed: 0,
            adam: AdamConfig::default(),
            detach: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid!("iterations must be at least 1"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.val_patches == 0 {
            return Err(invalid!("batch_size, steps_per_epoch and val_patches must be positive"));
        }
        check_patch_size(self.patch_size)?;
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(invalid!("pos_fraction must lie in [0, 1]"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(invalid!("invalid optimizer hyperparameters {a:?}"));
        }
        Ok(())
    }

    /// `(stage, I)` for a 1-based epoch number.
    pub fn stage_of(&self, epoch: usize) -> (usize, usize) {
        if epoch <= self.stage1_epochs {
            (1, 1)
        } else {
            (2, self.iterations)
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub iterations: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl fmt::Display for EpochLog {
    /// `epoch\tstage\tI\ttrain_Lr\tval_Lr`, reals with 17 significant digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.16e}\t{:.16e}",
            self.epoch, self.stage, self.iterations, self.train_loss, self.val_loss
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when training aborted.
    pub params: RsgnParams,
    pub log: Vec<EpochLog>,
    /// Diagnostic when a non-finite loss or gradient stopped training.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(RsgnParams, Vec<EpochLog>)> {
        match self.aborted {
            Some(msg) => Err(Error::NonFinite(msg)),
            None => Ok((self.params, self.log)),
        }
    }
}

fn batch_tensors(patches: &[Patch]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = patches.iter().map(|p| p.image.clone()).collect();
    let targets: Vec<Tensor> = patches.iter().map(|p| p.target.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&targets)?))
}

fn draw_batch(samples: &[Sample], cfg: &TrainConfig, count: usize, rng: &mut crate::rng::Rng) -> Result<Vec<Patch>> {
    let positives = (cfg.pos_fraction * count as f64).ceil() as usize;
    (0..count)
        .map(|b| {
            let s = &samples[rng.random_range(0..samples.len())];
            sample_patch(s, cfg.patch_size, b < positives, rng)
        })
        .collect()
}

/// Loss and gradients of one batch.
fn batch_gradients(
    params: &RsgnParams,
    image: &Tensor,
    target: &Tensor,
    iterations: usize,
    detach: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let net = params.bind(&mut tape);
    let x = tape.constant(image.clone());
    let trace = refine_on_tape(&mut tape, &net, x, iterations, detach)?;
    let loss = loss_on_tape(&mut tape, &trace, target)?;
    tape.backward(loss.total)?;
    let value = tape.value(loss.total).item().expect("scalar loss");
    let grads = net
        .leaves()
        .into_iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .expect("parameter leaves carry gradients")
        })
        .collect();
    Ok((value, grads))
}

fn batch_loss(params: &RsgnParams, image: &Tensor, target: &Tensor, iterations: usize) -> Result<f64> {
    Ok(trace_loss(&refine_forward(params, image, iterations)?, target)?.total)
}

/// Two-stage training: `stage1_epochs` with `I = 1`, then `stage2_epochs`
/// with `I = cfg.iterations` and fresh optimizer moments. `on_epoch` sees
/// every log line with the parameters at that point.
pub fn train(
    samples: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &RsgnParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in samples {
        if s.channels() + 1 != arch.in_channels {
            return Err(shape_err!(
                "sample `{}` has {} channel(s) but the network expects {} image channel(s)",
                s.id,
                s.channels(),
                arch.in_channels - 1
            ));
        }
    }
    let mut params = RsgnParams::init(arch, cfg.seed)?;
    let mut val_rng = stream(cfg.seed, Stream::Validation, 0);
    let (val_image, val_target) = batch_tensors(&draw_batch(samples, cfg, cfg.val_patches, &mut val_rng)?)?;

    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::new();
    let mut step = 0u64;
    let total_epochs = cfg.stage1_epochs + cfg.stage2_epochs;
    for epoch in 1..=total_epochs {
        let (stage, iterations) = cfg.stage_of(epoch);
        if epoch == cfg.stage1_epochs + 1 {
            adam.reset();
        }
        let mut train_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let mut rng = stream(cfg.seed, Stream::Epoch, step);
            step += 1;
            let (image, target) = batch_tensors(&draw_batch(samples, cfg, cfg.batch_size, &mut rng)?)?;
            let (loss, grads) = batch_gradients(&params, &image, &target, iterations, cfg.detach)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Ok(TrainOutcome {
                    params,
                    log,
                    aborted: Some(format!(
                        "epoch {epoch}, step {step}: loss {loss} or its gradient is not finite"
                    )),
                });
            }
            let before = params.clone();
            adam.step(&mut params.tensors_mut(), &grads);
            if params.tensors().iter().any(|t| !t.is_finite()) {
                return Ok(TrainOutcome {
                    params: before,
                    log,
                    aborted: Some(format!(
                        "epoch {epoch}, step {step}: parameter update produced non-finite weights"
                    )),
                });
            }
            train_sum += loss;
        }
        let val_loss = batch_loss(&params, &val_image, &val_target, iterations)?;
        let entry = EpochLog {
            epoch,
            stage,
            iterations,
            train_loss: train_sum / cfg.steps_per_epoch as f64,
            val_loss,
        };
        if !val_loss.is_finite() {
            return Ok(TrainOutcome {
                params,
                log,
                aborted: Some(format!("epoch {epoch}: validation loss is not finite")),
            });
        }
        on_epoch(&entry, &params)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        log,
        aborted: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig { tile: 64, overlap: 16 }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        check_patch_size(self.tile)
            .map_err(|_| invalid!("tile must be a multiple of 4 and at least 28, got {}", self.tile))?;
        if self.overlap >= self.tile {
            return Err(invalid!(
                "overlap {} must be smaller than the tile {}",
                self.overlap,
                self.tile
            ));
        }
        Ok(())
    }

    /// Tile origins along an axis of length `n` and the padded length.
    pub fn origins(&self, n: usize) -> (Vec<usize>, usize) {
        let stride = self.tile - self.overlap;
        let count = if n <= self.tile {
            1
        } else {
            (n - self.tile).div_ceil(stride) + 1
        };
        let origins: Vec<usize> = (0..count).map(|k| k * stride).collect();
        let padded = origins[count - 1] + self.tile;
        (origins, padded)
    }
}

/// Whole-image prediction: reflect-pad to the tile grid, refine each tile
/// `iterations` times, average overlaps and crop back.
pub fn infer(image: &Tensor, params: &RsgnParams, iterations: usize, tiles: &TileConfig) -> Result<ProbMap> {
    tiles.validate()?;
    let [c, h, w] = image.shape()[..] else {
        return Err(shape_err!("infer expects a C×H×W image, got {:?}", image.shape()));
    };
    if c + 1 != params.config.in_channels {
        return Err(shape_err!(
            "image has {c} channel(s) but the network expects {}",
            params.config.in_channels - 1
        ));
    }
    let (ys, ph) = tiles.origins(h);
    let (xs, pw) = (tiles.origins(w).0, tiles.origins(w).1);
    let padded = pad_reflect(image, ph, pw)?;
    let t = tiles.tile;
    let positions: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let predictions: Vec<Tensor> = positions
        .par_iter()
        .map(|&(x0, y0)| {
            let tile = Tensor::from_fn(&[1, c, t, t], |i| {
                let ch = i / (t * t);
                let (y, x) = ((i / t) % t, i % t);
                padded.data()[(ch * ph + y0 + y) * pw + x0 + x]
            });
            Ok(refine_forward(params, &tile, iterations)?.last().clone())
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; ph * pw];
    let mut count = vec![0u32; ph * pw];
    for (&(x0, y0), pred) in positions.iter().zip(&predictions) {
        for y in 0..t {
            for x in 0..t {
                let k = (y0 + y) * pw + x0 + x;
                sum[k] += pred.data()[y * t + x];
                count[k] += 1;
            }
        }
    }
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let k = y * pw + x;
            values.push((sum[k] / count[k] as f64).clamp(0.0, 1.0));
        }
    }
    ProbMap::new(w, h, values)
}

/// Logistic function, re-exported for callers that post-process logits.
pub fn sigmoid(v: f64) -> f64 {
    autodiff::sigmoid(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_image;

    #[test]
    fn weights_sum_to_one_and_increase() {
        for iterations in [1, 2, 3, 5] {
            let w = loss_weights(iterations);
            assert_eq!(w.iter().sum::<f64>(), 1.0, "I = {iterations}");
            assert!(w.windows(2).all(|p| p[0] < p[1]));
        }
        assert_eq!(loss_weights(3), vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]);
    }

    #[test]
    fn refinement_loss_examples() {
        let r = refinement_loss(&[0.6, 0.3, 0.3]).unwrap();
        assert_eq!(r.z, 6);
        assert!((r.total - 0.35).abs() < 1e-15);
        assert_eq!(refinement_loss(&[0.42]).unwrap().total, 0.42);
        assert!(refinement_loss(&[]).is_err());
    }

    #[test]
    fn zero_parameters_predict_one_half() {
        let p = RsgnParams::zeros(&ArchConfig::toy()).unwrap();
        let x = Tensor::full(&[1, 3, 28, 28], 0.3);
        let trace = refine_forward(&p, &x, 3).unwrap();
        assert_eq!(trace.predictions.len(), 4);
        assert!(trace.predictions[0].data().iter().all(|&v| v == 0.0));
        for pred in &trace.predictions[1..] {
            assert!(pred.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn single_pass_is_plain_forward_with_zero_channel() {
        let p = RsgnParams::init(&ArchConfig::toy(), 2).unwrap();
        let x = Tensor::from_fn(&[1, 3, 28, 28], |i| (i % 17) as f64 / 16.0);
        let trace = refine_forward(&p, &x, 1).unwrap();
        let mut with_zero = x.data().to_vec();
        with_zero.extend(std::iter::repeat_n(0.0, 28 * 28));
        let direct = p.forward(&Tensor::new(vec![1, 4, 28, 28], with_zero).unwrap()).unwrap();
        assert_eq!(trace.outputs[0], direct);
    }

    #[test]
    fn second_pass_chains_two_forward_calls() {
        let p = RsgnParams::init(&ArchConfig::toy(), 9).unwrap();
        let x = Tensor::from_fn(&[1, 3, 28, 28], |i| ((i * 7) % 23) as f64 / 22.0);
        let trace = refine_forward(&p, &x, 2).unwrap();
        let cat = |pred: &[f64]| {
            let mut d = x.data().to_vec();
            d.extend_from_slice(pred);
            Tensor::new(vec![1, 4, 28, 28], d).unwrap()
        };
        let first = p.forward(&cat(&[0.0; 28 * 28])).unwrap();
        let y1: Vec<f64> = first.master.data().iter().map(|&v| sigmoid(v)).collect();
        let second = p.forward(&cat(&y1)).unwrap();
        let y2: Vec<f64> = second.master.data().iter().map(|&v| sigmoid(v)).collect();
        assert_eq!(trace.predictions[2].data(), &y2[..]);
    }

    #[test]
    fn iteration_loss_matches_hand_sum() {
        let p = RsgnParams::init(&ArchConfig::toy(), 4).unwrap();
        let x = Tensor::from_fn(&[1, 3, 28, 28], |i| (i % 5) as f64 / 4.0);
        let target = Tensor::from_fn(&[1, 1, 28, 28], |i| if i % 9 == 0 { 1.0 } else { 0.0 });
        let trace = refine_forward(&p, &x, 2).unwrap();
        let beta = 1.0 - (0..784).filter(|i| i % 9 == 0).count() as f64 / 784.0;
        let bce = |logits: &Tensor| {
            let mut s = 0.0;
            for (z, y) in logits.data().iter().zip(target.data()) {
                let q = sigmoid(*z).clamp(1e-7, 1.0 - 1e-7);
                s += beta * y * q.ln() + (1.0 - beta) * (1.0 - y) * (1.0 - q).ln();
            }
            -s / 784.0
        };
        let out = &trace.outputs[1];
        let hand = bce(&out.master) + bce(&out.side2) + bce(&out.side3);
        assert!((iteration_loss(&trace, &target, 2).unwrap() - hand).abs() < 1e-12);
        assert!(iteration_loss(&trace, &target, 0).is_err());
        assert!(iteration_loss(&trace, &target, 3).is_err());
    }

    #[test]
    fn tape_loss_agrees_with_trace_loss() {
        let p = RsgnParams::init(&ArchConfig::toy(), 4).unwrap();
        let x = Tensor::from_fn(&[2, 3, 28, 28], |i| (i % 11) as f64 / 10.0);
        let target = Tensor::from_fn(&[2, 1, 28, 28], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
        let (loss, grads) = batch_gradients(&p, &x, &target, 3, false).unwrap();
        assert_eq!(grads.len(), p.tensors().len());
        let report = trace_loss(&refine_forward(&p, &x, 3).unwrap(), &target).unwrap();
        assert!((loss - report.total).abs() < 1e-12);
    }

    #[test]
    fn log_line_format() {
        let line = EpochLog {
            epoch: 3,
            stage: 1,
            iterations: 1,
            train_loss: 0.25,
            val_loss: 1.0 / 3.0,
        }
        .to_string();
        assert_eq!(line, "3\t1\t1\t2.5000000000000000e-1\t3.3333333333333331e-1");
    }

    #[test]
    fn tile_origins_cover_axis() {
        let t = TileConfig { tile: 64, overlap: 16 };
        assert_eq!(t.origins(128), (vec![0, 48, 96], 160));
        assert_eq!(t.origins(40), (vec![0], 64));
        assert_eq!(t.origins(64), (vec![0], 64));
        assert!(TileConfig { tile: 64, overlap: 64 }.validate().is_err());
        assert!(TileConfig { tile: 30, overlap: 2 }.validate().is_err());
    }

    #[test]
    fn constant_network_stitches_to_constant() {
        let p = RsgnParams::zeros(&ArchConfig::toy()).unwrap();
        let s = synth_image(96, 1, 0).sample;
        let map = infer(&s.image, &p, 2, &TileConfig { tile: 32, overlap: 8 }).unwrap();
        assert_eq!((map.width(), map.height()), (96, 96));
        assert!(map.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn small_image_uses_one_padded_tile() {
        let p = RsgnParams::init(&ArchConfig::toy(), 1).unwrap();
        let image = Tensor::from_fn(&[3, 20, 30], |i| (i % 13) as f64 / 12.0);
        let map = infer(&image, &p, 1, &TileConfig { tile: 32, overlap: 8 }).unwrap();
        assert_eq!((map.width(), map.height()), (30, 20));
        let padded = pad_reflect(&image, 32, 32)
            .unwrap()
            .reshape(vec![1, 3, 32, 32])
            .unwrap();
        let direct = refine_forward(&p, &padded, 1).unwrap();
        for y in 0..20 {
            for x in 0..30 {
                assert_eq!(map.get(x, y), direct.last().data()[y * 32 + x]);
            }
        }
    }

    #[test]
    fn two_tiles_average_in_the_overlap() {
        let p = RsgnParams::init(&ArchConfig::toy(), 6).unwrap();
        let tiles = TileConfig { tile: 32, overlap: 8 };
        let image = Tensor::from_fn(&[3, 32, 56], |i| ((i * 31) % 97) as f64 / 96.0);
        let map = infer(&image, &p, 1, &tiles).unwrap();
        let part = |x0: usize| {
            let t = Tensor::from_fn(&[1, 3, 32, 32], |i| {
                let ch = i / 1024;
                let (y, x) = ((i / 32) % 32, i % 32);
                image.data()[(ch * 32 + y) * 56 + x0 + x]
            });
            refine_forward(&p, &t, 1).unwrap().last().clone()
        };
        let (left, right) = (part(0), part(24));
        for y in 0..32 {
            assert_eq!(map.get(10, y), left.data()[y * 32 + 10]);
            let expect = (left.data()[y * 32 + 28] + right.data()[y * 32 + 4]) / 2.0;
            assert_eq!(map.get(28, y), expect);
            assert_eq!(map.get(50, y), right.data()[y * 32 + 26]);
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_param_count() {
        let samples: Vec<Sample> = (0..2).map(|i| synth_image(64, 3, i).sample).collect();
        let cfg = TrainConfig {
            iterations: 2,
            stage1_epochs: 1,
            stage2_epochs: 1,
            batch_size: 2,
            steps_per_epoch: 1,
            patch_size: 28,
            val_patches: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || train(&samples, &ArchConfig::toy(), &cfg, |_, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
        assert_eq!((a.log[0].stage, a.log[0].iterations), (1, 1));
        assert_eq!((a.log[1].stage, a.log[1].iterations), (2, 2));
        assert_eq!(a.params.param_count(), model::param_count(&ArchConfig::toy()));
    }

    #[test]
    fn empty_training_set_rejected() {
        let err = train(&[], &ArchConfig::toy(), &TrainConfig::default(), |_, _| Ok(())).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}

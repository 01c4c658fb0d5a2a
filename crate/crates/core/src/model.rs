//! The three-level semantics-guided encoder–decoder.
//!
//! Parameters live in a [`Network`] that is generic over its leaf type, so
//! the same structure describes tensor shapes, concrete weights
//! ([`RsgnParams`]) and tape handles bound for one forward pass. The field
//! order of `Network` is also the canonical traversal order used by the
//! optimizer and the checkpoint format.

use rand::distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Output sizes of the four adaptive pooling branches.
pub const PYRAMID_BINS: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Image channels plus one channel for the recursed prediction.
    pub in_channels: usize,
    /// Encoder widths `(C1, C2, C3)`.
    pub widths: [usize; 3],
    /// Channels of the semantics feature `S`.
    pub ppm_out: usize,
    /// When false, the pyramid is replaced by a 1×1 projection and no
    /// semantics flow reaches the aggregation blocks.
    pub semantics_guided: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 4,
            widths: [32, 64, 128],
            ppm_out: 128,
            semantics_guided: true,
        }
    }
}

impl ArchConfig {
    /// The small configuration used for whole-network gradient checks.
    pub fn toy() -> Self {
        ArchConfig {
            in_channels: 4,
            widths: [4, 8, 8],
            ppm_out: 8,
            semantics_guided: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 {
            return Err(invalid!(
                "in_channels must count at least one image channel plus the prediction channel"
            ));
        }
        if self.widths.iter().any(|&w| w < 4) {
            return Err(invalid!("encoder widths must all be at least 4, got {:?}", self.widths));
        }
        if !self.widths[2].is_multiple_of(4) {
            return Err(invalid!(
                "third encoder width must be divisible by 4, got {}",
                self.widths[2]
            ));
        }
        if self.ppm_out == 0 {
            return Err(invalid!("ppm_out must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub first: Conv<T>,
    pub second: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Semantics<T> {
    /// One 1×1 compression per [`PYRAMID_BINS`] entry, then the fusion conv.
    Pyramid { branches: Vec<Conv<T>>, fuse: Conv<T> },
    /// Ablation stand-in: a single 1×1 projection of the deepest features.
    Projection(Conv<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation<T> {
    pub deconv: Conv<T>,
    /// Present only in the semantics-guided network.
    pub semantic: Option<Conv<T>>,
    pub fuse: ConvBlock<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub encoder: [ConvBlock<T>; 3],
    pub semantics: Semantics<T>,
    pub aggregate2: Aggregation<T>,
    pub aggregate1: Aggregation<T>,
    pub master: Conv<T>,
    pub side2: Conv<T>,
    pub side3: Conv<T>,
}

impl<T> Conv<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T> ConvBlock<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvBlock<U> {
        ConvBlock {
            first: self.first.map(f),
            second: self.second.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.first.visit(f);
        self.second.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

impl<T> Semantics<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Semantics<U> {
        match self {
            Semantics::Pyramid { branches, fuse } => Semantics::Pyramid {
                branches: branches.iter().map(|b| b.map(f)).collect(),
                fuse: fuse.map(f),
            },
            Semantics::Projection(c) => Semantics::Projection(c.map(f)),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        match self {
            Semantics::Pyramid { branches, fuse } => {
                branches.iter().for_each(|b| b.visit(f));
                fuse.visit(f);
            }
            Semantics::Projection(c) => c.visit(f),
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        match self {
            Semantics::Pyramid { branches, fuse } => {
                branches.iter_mut().for_each(|b| b.visit_mut(f));
                fuse.visit_mut(f);
            }
            Semantics::Projection(c) => c.visit_mut(f),
        }
    }
}

impl<T> Aggregation<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Aggregation<U> {
        Aggregation {
            deconv: self.deconv.map(f),
            semantic: self.semantic.as_ref().map(|c| c.map(f)),
            fuse: self.fuse.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.deconv.visit(f);
        if let Some(c) = &self.semantic {
            c.visit(f);
        }
        self.fuse.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.deconv.visit_mut(f);
        if let Some(c) = &mut self.semantic {
            c.visit_mut(f);
        }
        self.fuse.visit_mut(f);
    }
}

impl<T> Network<T> {
    /// Structure-preserving map in canonical traversal order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Network<U> {
        let f = &mut f;
        let [e1, e2, e3] = &self.encoder;
        Network {
            encoder: [e1.map(f), e2.map(f), e3.map(f)],
            semantics: self.semantics.map(f),
            aggregate2: self.aggregate2.map(f),
            aggregate1: self.aggregate1.map(f),
            master: self.master.map(f),
            side2: self.side2.map(f),
            side3: self.side3.map(f),
        }
    }

    /// Leaves in canonical traversal order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        let f = &mut |t| out.push(t);
        self.encoder.iter().for_each(|b| b.visit(f));
        self.semantics.visit(f);
        self.aggregate2.visit(f);
        self.aggregate1.visit(f);
        self.master.visit(f);
        self.side2.visit(f);
        self.side3.visit(f);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        let f = &mut |t| out.push(t);
        self.encoder.iter_mut().for_each(|b| b.visit_mut(f));
        self.semantics.visit_mut(f);
        self.aggregate2.visit_mut(f);
        self.aggregate1.visit_mut(f);
        self.master.visit_mut(f);
        self.side2.visit_mut(f);
        self.side3.visit_mut(f);
        out
    }
}

fn conv_shape(cin: usize, cout: usize, k: usize) -> Conv<Vec<usize>> {
    Conv {
        weight: vec![cout, cin, k, k],
        bias: vec![cout],
    }
}

fn block_shape(cin: usize, cout: usize) -> ConvBlock<Vec<usize>> {
    ConvBlock {
        first: conv_shape(cin, cout, 3),
        second: conv_shape(cout, cout, 3),
    }
}

fn aggregation_shape(deconv_in: usize, out: usize, ppm_out: usize, guided: bool) -> Aggregation<Vec<usize>> {
    Aggregation {
        deconv: Conv {
            weight: vec![deconv_in, out, 2, 2],
            bias: vec![out],
        },
        semantic: guided.then(|| conv_shape(ppm_out, out, 3)),
        fuse: block_shape(2 * out, out),
    }
}

/// Shapes of every parameter tensor for `config`.
pub fn layout(config: &ArchConfig) -> Network<Vec<usize>> {
    let [c1, c2, c3] = config.widths;
    let s = config.ppm_out;
    let semantics = if config.semantics_guided {
        Semantics::Pyramid {
            branches: PYRAMID_BINS.iter().map(|_| conv_shape(c3, c3 / 4, 1)).collect(),
            fuse: conv_shape(2 * c3, s, 1),
        }
    } else {
        Semantics::Projection(conv_shape(c3, s, 1))
    };
    Network {
        encoder: [
            block_shape(config.in_channels, c1),
            block_shape(c1, c2),
            block_shape(c2, c3),
        ],
        semantics,
        aggregate2: aggregation_shape(s, c2, s, config.semantics_guided),
        aggregate1: aggregation_shape(c2, c1, s, config.semantics_guided),
        master: conv_shape(c1, 1, 1),
        side2: conv_shape(c2, 1, 1),
        side3: conv_shape(s, 1, 1),
    }
}

/// Number of learnable scalars; depends on the architecture alone.
pub fn param_count(config: &ArchConfig) -> usize {
    layout(config)
        .leaves()
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum()
}

/// Concrete network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RsgnParams {
    pub config: ArchConfig,
    pub net: Network<Tensor>,
}

impl RsgnParams {
    pub fn zeros(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        Ok(RsgnParams {
            config: *config,
            net: layout(config).map(|s| Tensor::zeros(s)),
        })
    }

    /// Uniform initialisation in `±sqrt(1/fan_in)`, seeded.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let shapes = layout(config);
        let mut bound = 0.0;
        let net = shapes.map(|shape| {
            // weights precede their bias in traversal order
            if shape.len() == 4 {
                let fan_in = if shape[2] == 2 {
                    shape[0] // transposed conv: each output sees `in` taps
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                bound = (1.0 / fan_in as f64).sqrt();
            }
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        });
        Ok(RsgnParams { config: *config, net })
    }

    pub fn param_count(&self) -> usize {
        self.net.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.net.leaves()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.leaves_mut()
    }

    /// Registers every weight as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Network<Var> {
        self.net.map(|t| tape.leaf(t.clone()))
    }

    /// Registers every weight as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Network<Var> {
        self.net.map(|t| tape.constant(t.clone()))
    }
}

/// Logit maps of one forward pass, each `N×1×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub master: Var,
    pub side2: Var,
    pub side3: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub master: Tensor,
    pub side2: Tensor,
    pub side3: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

fn conv(tape: &mut Tape, x: Var, c: &Conv<Var>, padding: usize) -> Result<Var> {
    tape.conv2d(x, c.weight, c.bias, padding, 1)
}

/// conv3×3 → ReLU → conv3×3 → ReLU.
pub fn conv_block(tape: &mut Tape, x: Var, block: &ConvBlock<Var>) -> Result<Var> {
    let h = conv(tape, x, &block.first, 1)?;
    let h = tape.relu(h);
    let h = conv(tape, h, &block.second, 1)?;
    Ok(tape.relu(h))
}

pub fn encoder_forward(tape: &mut Tape, net: &Network<Var>, x: Var) -> Result<EncoderFeatures> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(shape_err!(
            "encoder input spatial axes must be divisible by 4, got {h}×{w}"
        ));
    }
    let f1 = conv_block(tape, x, &net.encoder[0])?;
    let p1 = tape.maxpool2(f1)?;
    let f2 = conv_block(tape, p1, &net.encoder[1])?;
    let p2 = tape.maxpool2(f2)?;
    let f3 = conv_block(tape, p2, &net.encoder[2])?;
    Ok(EncoderFeatures { f1, f2, f3 })
}

/// Semantics feature `S` at the resolution of `f3`.
pub fn pyramid_pooling(tape: &mut Tape, semantics: &Semantics<Var>, f3: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(f3).dims4()?;
    match semantics {
        Semantics::Pyramid { branches, fuse } => {
            let largest = PYRAMID_BINS[PYRAMID_BINS.len() - 1];
            if h < largest || w < largest {
                return Err(shape_err!(
                    "pyramid pooling needs at least {largest}×{largest} deepest features, got {h}×{w}"
                ));
            }
            let mut parts = vec![f3];
            for (&bins, branch) in PYRAMID_BINS.iter().zip(branches) {
                let pooled = tape.adaptive_avg_pool(f3, bins)?;
                let squeezed = conv(tape, pooled, branch, 0)?;
                parts.push(tape.resize_bilinear(squeezed, h, w)?);
            }
            let cat = tape.concat_channels(&parts)?;
            let s = conv(tape, cat, fuse, 0)?;
            Ok(tape.relu(s))
        }
        Semantics::Projection(proj) => {
            let s = conv(tape, f3, proj, 0)?;
            Ok(tape.relu(s))
        }
    }
}

/// Decoder stage fusing the deconvolution flow, the semantics flow and the
/// lateral encoder features.
pub fn feature_aggregation(
    tape: &mut Tape,
    block: &Aggregation<Var>,
    deconv_in: Var,
    semantics: Var,
    lateral: Var,
    sem_factor: usize,
) -> Result<Var> {
    let d = tape.conv_transpose2d(deconv_in, block.deconv.weight, block.deconv.bias, 2)?;
    let (_, _, lh, lw) = tape.value(lateral).dims4()?;
    let (_, _, dh, dw) = tape.value(d).dims4()?;
    if (dh, dw) != (lh, lw) {
        return Err(shape_err!(
            "aggregation spatial axes: deconvolution flow {dh}×{dw} vs lateral {lh}×{lw}"
        ));
    }
    let fused = match &block.semantic {
        Some(sem_conv) => {
            let up = tape.upsample_bilinear(semantics, sem_factor)?;
            let (_, _, uh, uw) = tape.value(up).dims4()?;
            if (uh, uw) != (lh, lw) {
                return Err(shape_err!(
                    "aggregation spatial axes: semantics flow {uh}×{uw} vs lateral {lh}×{lw}"
                ));
            }
            let m = conv(tape, up, sem_conv, 1)?;
            tape.add(d, m)?
        }
        None => d,
    };
    let fused = tape.relu(fused);
    let cat = tape.concat_channels(&[fused, lateral])?;
    conv_block(tape, cat, &block.fuse)
}

/// Full network on an input that already carries the prediction channel.
pub fn forward(tape: &mut Tape, net: &Network<Var>, x: Var) -> Result<ForwardVars> {
    let feats = encoder_forward(tape, net, x)?;
    let s = pyramid_pooling(tape, &net.semantics, feats.f3)?;
    let o2 = feature_aggregation(tape, &net.aggregate2, s, s, feats.f2, 2)?;
    let o1 = feature_aggregation(tape, &net.aggregate1, o2, s, feats.f1, 4)?;
    let master = conv(tape, o1, &net.master, 0)?;
    let up3 = tape.upsample_bilinear(s, 4)?;
    let side3 = conv(tape, up3, &net.side3, 0)?;
    let up2 = tape.upsample_bilinear(o2, 2)?;
    let side2 = conv(tape, up2, &net.side2, 0)?;
    Ok(ForwardVars { master, side2, side3 })
}

impl RsgnParams {
    /// Inference-only forward pass returning the three logit maps.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutputs> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(shape_err!(
                "input channel axis: network expects {}, got {c}",
                self.config.in_channels
            ));
        }
        let mut tape = Tape::new();
        let net = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = forward(&mut tape, &net, xv)?;
        Ok(ForwardOutputs {
            master: tape.value(out.master).clone(),
            side2: tape.value(out.side2).clone(),
            side3: tape.value(out.side3).clone(),
        })
    }
}

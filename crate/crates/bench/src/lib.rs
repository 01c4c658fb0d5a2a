//! Fixtures shared by the benchmarks.

use rsgn_core::dataset::synth_image;
use rsgn_core::{BinaryMask, ProbMap, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn tensor(shape: &[usize], salt: u64) -> Tensor {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// The top-left `s×s` crop of a synthetic image as a `1×3×s×s` batch.
pub fn network_input(extent: usize) -> Tensor {
    let s = synth_image(extent.max(64), 1, 0).sample;
    let full = s.image.shape()[2];
    Tensor::from_fn(&[1, 3, extent, extent], |i| {
        let (c, y, x) = (i / (extent * extent), i / extent % extent, i % extent);
        s.image.data()[(c * full + y) * full + x]
    })
}

/// Ground truth and a noisy probability map over it.
pub fn scored_mask(extent: usize) -> (ProbMap, BinaryMask) {
    let gt = synth_image(extent, 3, 0).sample.gt;
    let noise = tensor(&[extent * extent], 5);
    let values = gt
        .bits()
        .iter()
        .zip(noise.data())
        .map(|(&g, &n)| (if g { 0.7 } else { 0.2 } + 0.3 * n).clamp(0.0, 1.0))
        .collect();
    (ProbMap::new(extent, extent, values).expect("extent"), gt)
}

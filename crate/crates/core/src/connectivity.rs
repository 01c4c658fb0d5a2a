//! Path-based topology measures: sample pixel pairs that lie on both the
//! ground truth and the segmentation, then compare geodesic lengths.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::maps::BinaryMask;
use crate::rng::{stream, Rng, Stream};

pub type Pixel = (usize, usize);

pub const DEFAULT_PAIRS: usize = 1000;
pub const DEFAULT_DELTA: f64 = 0.1;
/// Consecutive ground-truth-disconnected draws before the sampler gives up.
pub const MAX_DISCARDS: usize = 100;

const NEIGHBOURS: [(isize, isize, bool); 8] = [
    (-1, -1, true),
    (0, -1, false),
    (1, -1, true),
    (-1, 0, false),
    (1, 0, false),
    (-1, 1, true),
    (0, 1, false),
    (1, 1, true),
];

/// Neighbouring foreground pixels and whether the step is diagonal.
fn neighbours(mask: &BinaryMask, i: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let (x, y) = ((i as isize) % w, (i as isize) / w);
    NEIGHBOURS.iter().filter_map(move |&(dx, dy, diagonal)| {
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= w || ny >= h {
            return None;
        }
        let j = (ny * w + nx) as usize;
        mask.bits()[j].then_some((j, diagonal))
    })
}

/// Path length `axial + diagonal·√2`, compared exactly so the result does
/// not depend on summation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PathLength {
    pub axial: u64,
    pub diagonal: u64,
}

impl PathLength {
    pub const ZERO: PathLength = PathLength { axial: 0, diagonal: 0 };

    pub fn step(self, diagonal: bool) -> Self {
        if diagonal {
            PathLength {
                diagonal: self.diagonal + 1,
                ..self
            }
        } else {
            PathLength {
                axial: self.axial + 1,
                ..self
            }
        }
    }

    pub fn value(self) -> f64 {
        self.axial as f64 + self.diagonal as f64 * SQRT_2
    }
}

impl Ord for PathLength {
    fn cmp(&self, other: &Self) -> Ordering {
        // sign of (a1 − a2) + (d1 − d2)·√2
        let a = self.axial as i128 - other.axial as i128;
        let d = self.diagonal as i128 - other.diagonal as i128;
        match (a.signum(), d.signum()) {
            (0, 0) => Ordering::Equal,
            (sa, sd) if sa >= 0 && sd >= 0 => Ordering::Greater,
            (sa, sd) if sa <= 0 && sd <= 0 => Ordering::Less,
            // opposite signs: compare a² with 2d²
            (sa, _) => {
                let mag = (a * a).cmp(&(2 * d * d));
                if sa > 0 {
                    mag
                } else {
                    mag.reverse()
                }
            }
        }
    }
}

impl PartialOrd for PathLength {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact geodesic between two foreground pixels over the 8-connected
/// foreground graph; `None` when they lie in different components.
pub fn shortest_path(mask: &BinaryMask, p1: Pixel, p2: Pixel) -> Result<Option<PathLength>> {
    for (x, y) in [p1, p2] {
        if x >= mask.width() || y >= mask.height() || !mask.get(x, y) {
            return Err(invalid!("shortest path endpoint ({x}, {y}) is not a foreground pixel"));
        }
    }
    let w = mask.width();
    let (src, dst) = (p1.1 * w + p1.0, p2.1 * w + p2.0);
    let mut dist: Vec<Option<PathLength>> = vec![None; mask.bits().len()];
    let mut heap = BinaryHeap::new();
    dist[src] = Some(PathLength::ZERO);
    heap.push(Reverse((PathLength::ZERO, src)));
    while let Some(Reverse((d, u))) = heap.pop() {
        if u == dst {
            return Ok(Some(d));
        }
        if dist[u].is_some_and(|best| d > best) {
            continue;
        }
        for (v, diagonal) in neighbours(mask, u) {
            let nd = d.step(diagonal);
            if dist[v].is_none_or(|best| nd < best) {
                dist[v] = Some(nd);
                heap.push(Reverse((nd, v)));
            }
        }
    }
    Ok(None)
}

/// Geodesic distance between two foreground pixels (axial steps cost 1,
/// diagonal steps √2). `None` when they lie in different components.
pub fn shortest_path_length(mask: &BinaryMask, p1: Pixel, p2: Pixel) -> Result<Option<f64>> {
    Ok(shortest_path(mask, p1, p2)?.map(PathLength::value))
}

/// 8-connected component label per pixel (`usize::MAX` for background).
pub fn component_labels(mask: &BinaryMask) -> Vec<usize> {
    let n = mask.bits().len();
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if !mask.bits()[start] || labels[start] != usize::MAX {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for (v, _) in neighbours(mask, u) {
                if labels[v] == usize::MAX {
                    labels[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    labels
}

/// Draws pairs of distinct pixels uniformly from `gt ∧ seg`, redrawing pairs
/// that are disconnected in the ground truth.
pub struct PairSampler {
    width: usize,
    candidates: Vec<usize>,
    gt_labels: Vec<usize>,
}

impl PairSampler {
    pub fn new(gt: &BinaryMask, seg: &BinaryMask) -> Result<Self> {
        let both = gt.and(seg)?;
        let candidates = (0..both.bits().len()).filter(|&i| both.bits()[i]).collect();
        Ok(PairSampler {
            width: gt.width(),
            candidates,
            gt_labels: component_labels(gt),
        })
    }

    pub fn candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Next accepted pair, or `None` once `MAX_DISCARDS` consecutive draws
    /// were disconnected in the ground truth (or fewer than two candidates
    /// exist).
    pub fn sample_pair(&self, rng: &mut Rng) -> Option<(Pixel, Pixel)> {
        let n = self.candidates.len();
        if n < 2 {
            return None;
        }
        for _ in 0..MAX_DISCARDS {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let (i, j) = (self.candidates[a.min(b)], self.candidates[a.max(b)]);
            if self.gt_labels[i] == self.gt_labels[j] {
                let at = |k: usize| (k % self.width, k / self.width);
                return Some((at(i), at(j)));
            }
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Correct,
    Infeasible,
    WrongLength,
}

pub fn classify(len_gt: f64, len_seg: Option<f64>, delta: f64) -> Verdict {
    match len_seg {
        None => Verdict::Infeasible,
        Some(l) if (l - len_gt).abs() <= delta * len_gt => Verdict::Correct,
        Some(_) => Verdict::WrongLength,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSample {
    pub p1: Pixel,
    pub p2: Pixel,
    pub len_gt: f64,
    pub len_seg: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityReport {
    pub n_samples: usize,
    /// Percentages over classified samples; zero when `n_samples == 0`.
    pub cor: f64,
    pub inf: f64,
    pub wrn: f64,
    pub seed: u64,
    /// The sampler ran out of ground-truth-connected pairs before `n`.
    pub exhausted: bool,
    /// `gt ∧ seg` held fewer than two pixels.
    pub degenerate: bool,
}

/// The seeded pair sequence with ground-truth and segmentation path lengths.
pub fn sample_paths(
    gt: &BinaryMask,
    seg: &BinaryMask,
    n: usize,
    delta: f64,
    seed: u64,
) -> Result<(Vec<PathSample>, bool)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(invalid!("path tolerance must be positive, got {delta}"));
    }
    let sampler = PairSampler::new(gt, seg)?;
    let mut rng = stream(seed, Stream::Pairs, 0);
    let mut samples = Vec::with_capacity(n);
    let mut exhausted = false;
    while samples.len() < n {
        let Some((p1, p2)) = sampler.sample_pair(&mut rng) else {
            exhausted = sampler.candidates() >= 2;
            break;
        };
        let len_gt = shortest_path_length(gt, p1, p2)?.expect("pair is connected in the ground truth");
        let len_seg = shortest_path_length(seg, p1, p2)?;
        samples.push(PathSample {
            p1,
            p2,
            len_gt,
            len_seg,
            verdict: classify(len_gt, len_seg, delta),
        });
    }
    Ok((samples, exhausted))
}

pub fn connectivity(gt: &BinaryMask, seg: &BinaryMask, n: usize, delta: f64, seed: u64) -> Result<ConnectivityReport> {
    let (samples, exhausted) = sample_paths(gt, seg, n, delta, seed)?;
    let count = |v: Verdict| samples.iter().filter(|s| s.verdict == v).count();
    let total = samples.len();
    let pct = |k: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * k as f64 / total as f64
        }
    };
    Ok(ConnectivityReport {
        n_samples: total,
        cor: pct(count(Verdict::Correct)),
        inf: pct(count(Verdict::Infeasible)),
        wrn: pct(count(Verdict::WrongLength)),
        seed,
        exhausted,
        degenerate: PairSampler::new(gt, seg)?.candidates() < 2,
    })
}

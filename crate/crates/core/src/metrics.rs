//! Otsu binarization and pixel-level quality metrics.
//!
//! Every function takes an optional field of view; when present only the
//! pixels inside it are counted.

use std::cmp::Ordering;

use crate::error::{invalid, shape_err, Result};
use crate::maps::{BinaryMask, ProbMap};

pub const BINS: usize = 256;

/// Histogram bin of a probability: `floor(v·255 + 0.5)`.
pub fn quantize(v: f64) -> usize {
    ((v * 255.0 + 0.5).floor() as usize).min(BINS - 1)
}

fn check_fov(width: usize, height: usize, fov: Option<&BinaryMask>) -> Result<()> {
    match fov {
        Some(f) if !f.same_extent(width, height) => Err(shape_err!(
            "field of view {}×{} vs map {width}×{height}",
            f.width(),
            f.height()
        )),
        _ => Ok(()),
    }
}

fn inside(fov: Option<&BinaryMask>, i: usize) -> bool {
    fov.is_none_or(|f| f.bits()[i])
}

/// 256-bin histogram of the map inside the field of view.
pub fn histogram(p: &ProbMap, fov: Option<&BinaryMask>) -> Result<[u64; BINS]> {
    check_fov(p.width(), p.height(), fov)?;
    let mut hist = [0u64; BINS];
    for (i, &v) in p.values().iter().enumerate() {
        if inside(fov, i) {
            hist[quantize(v)] += 1;
        }
    }
    Ok(hist)
}

/// Between-class variance of splitting at `k`, scaled by `N²` and held as an
/// exact fraction `num / den` split into quotient and remainder so
/// comparisons never round.
#[derive(Clone, Copy, Debug)]
struct Separation {
    quot: u128,
    rem: u128,
    den: u128,
}

impl Separation {
    fn zero() -> Self {
        Separation {
            quot: 0,
            rem: 0,
            den: 1,
        }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        self.quot
            .cmp(&other.quot)
            .then_with(|| (self.rem * other.den).cmp(&(other.rem * self.den)))
    }
}

/// `w0·w1·(μ0−μ1)²·N² = (S0·n1 − S1·n0)² / (n0·n1)` for each split.
fn separations(hist: &[u64; BINS]) -> Result<Vec<Separation>> {
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(b, &c)| b as u128 * c as u128).sum();
    let mut out = Vec::with_capacity(BINS);
    let (mut n0, mut s0) = (0u128, 0u128);
    for (k, &c) in hist.iter().enumerate() {
        n0 += c as u128;
        s0 += k as u128 * c as u128;
        let (n1, s1) = (n - n0, s - s0);
        if n0 == 0 || n1 == 0 {
            out.push(Separation::zero());
            continue;
        }
        let (a, b) = (s0 * n1, s1 * n0);
        let diff = a.abs_diff(b);
        let num = diff
            .checked_mul(diff)
            .ok_or_else(|| invalid!("map too large for exact Otsu arithmetic"))?;
        let den = n0 * n1;
        out.push(Separation {
            quot: num / den,
            rem: num % den,
            den,
        });
    }
    Ok(out)
}

/// Otsu threshold bin. Ties between maximizers resolve to the floor of their
/// mean index. Pixels with bin `> k` are foreground.
pub fn otsu_from_histogram(hist: &[u64; BINS]) -> Result<usize> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(invalid!(
            "Otsu threshold undefined: fewer than two distinct quantized values inside the field of view"
        ));
    }
    let seps = separations(hist)?;
    let mut best = Separation::zero();
    let mut maximizers: Vec<usize> = Vec::new();
    for (k, sep) in seps.iter().enumerate() {
        match sep.cmp(&best) {
            Ordering::Greater => {
                best = *sep;
                maximizers.clear();
                maximizers.push(k);
            }
            Ordering::Equal => maximizers.push(k),
            Ordering::Less => {}
        }
    }
    Ok(maximizers.iter().sum::<usize>() / maximizers.len())
}

pub fn otsu_threshold(p: &ProbMap, fov: Option<&BinaryMask>) -> Result<usize> {
    otsu_from_histogram(&histogram(p, fov)?)
}

/// Foreground iff the quantized value exceeds `k`; pixels outside the field
/// of view are background.
pub fn binarize(p: &ProbMap, k: usize, fov: Option<&BinaryMask>) -> Result<BinaryMask> {
    check_fov(p.width(), p.height(), fov)?;
    let bits = p
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| inside(fov, i) && quantize(v) > k)
        .collect();
    BinaryMask::new(p.width(), p.height(), bits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn confusion(seg: &BinaryMask, gt: &BinaryMask, fov: Option<&BinaryMask>) -> Result<Confusion> {
    seg.check_extent(gt, "segmentation vs ground truth")?;
    check_fov(gt.width(), gt.height(), fov)?;
    let mut c = Confusion::default();
    for (i, (&s, &g)) in seg.bits().iter().zip(gt.bits()).enumerate() {
        if !inside(fov, i) {
            continue;
        }
        match (s, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Sensitivity and specificity; `None` when the corresponding class is empty.
pub fn se_sp(c: &Confusion) -> (Option<f64>, Option<f64>) {
    let ratio = |a: u64, b: u64| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    (ratio(c.tp, c.fn_), ratio(c.tn, c.fp))
}

/// Area under the ROC curve via the midrank statistic. `None` when either
/// class is absent inside the field of view.
pub fn auc(p: &ProbMap, gt: &BinaryMask, fov: Option<&BinaryMask>) -> Result<Option<f64>> {
    if !gt.same_extent(p.width(), p.height()) {
        return Err(shape_err!(
            "ground truth {}×{} vs map {}×{}",
            gt.width(),
            gt.height(),
            p.width(),
            p.height()
        ));
    }
    check_fov(p.width(), p.height(), fov)?;
    let mut scored: Vec<(f64, bool)> = p
        .values()
        .iter()
        .zip(gt.bits())
        .enumerate()
        .filter(|(i, _)| inside(fov, *i))
        .map(|(_, (&v, &g))| (v, g))
        .collect();
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum keeps midranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j, midrank (i+1+j)/2
        let positives = scored[i..j].iter().filter(|s| s.1).count() as u128;
        twice_rank_sum += positives * (i + 1 + j) as u128;
        i = j;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(Some(twice_u as f64 / (2 * np * nn) as f64))
}

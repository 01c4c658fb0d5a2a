//! Shortest paths and pair sampling against exhaustive references.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rsgn_core::connectivity::{connectivity, sample_paths, shortest_path_length, PairSampler, Verdict};
use rsgn_core::maps::BinaryMask;
use rsgn_core::rng::{stream, Stream};

/// `a1 + d1·√2 < a2 + d2·√2` in exact integer arithmetic.
fn shorter(p: (i64, i64), q: (i64, i64)) -> bool {
    // (p.a − q.a) < (q.d − p.d)·√2
    let a = p.0 - q.0;
    let d = q.1 - p.1;
    match (a < 0, d < 0) {
        (true, false) => true,
        (false, true) => false,
        (false, false) => a * a < 2 * d * d,
        (true, true) => a * a > 2 * d * d,
    }
}

/// Single-source Bellman-Ford relaxation over the 8-connected foreground,
/// lengths held as (axial steps, diagonal steps).
fn bellman_ford(mask: &BinaryMask, src: (usize, usize)) -> Vec<Option<f64>> {
    let (w, h) = (mask.width(), mask.height());
    let mut dist: Vec<Option<(i64, i64)>> = vec![None; w * h];
    dist[src.1 * w + src.0] = Some((0, 0));
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let Some((a, d)) = dist[y * w + x] else { continue };
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !mask.get(nx as usize, ny as usize) {
                            continue;
                        }
                        let cand = if dx != 0 && dy != 0 { (a, d + 1) } else { (a + 1, d) };
                        let j = ny as usize * w + nx as usize;
                        if dist[j].is_none_or(|cur| shorter(cand, cur)) {
                            dist[j] = Some(cand);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return dist
                .into_iter()
                .map(|o| o.map(|(a, d)| a as f64 + d as f64 * SQRT_2))
                .collect();
        }
    }
}

fn blob_mask(rng: &mut rsgn_core::rng::Rng, n: usize) -> BinaryMask {
    let density = rng.random_range(0.45..0.7);
    BinaryMask::from_fn(n, n, |_, _| rng.random_bool(density))
}

#[test]
fn dijkstra_equals_bellman_ford() {
    let mut rng = stream(10, Stream::Fixture, 0);
    for _ in 0..20 {
        let m = blob_mask(&mut rng, 32);
        let fg: Vec<(usize, usize)> = (0..32 * 32)
            .filter(|&i| m.bits()[i])
            .map(|i| (i % 32, i / 32))
            .collect();
        let src = fg[rng.random_range(0..fg.len())];
        let reference = bellman_ford(&m, src);
        for _ in 0..30 {
            let dst = fg[rng.random_range(0..fg.len())];
            let d = shortest_path_length(&m, src, dst).unwrap();
            assert_eq!(d, reference[dst.1 * 32 + dst.0]);
        }
    }
}

#[test]
fn symmetry_and_triangle_inequality() {
    let mut rng = stream(11, Stream::Fixture, 0);
    let m = blob_mask(&mut rng, 24);
    let fg: Vec<(usize, usize)> = (0..24 * 24)
        .filter(|&i| m.bits()[i])
        .map(|i| (i % 24, i / 24))
        .collect();
    for _ in 0..50 {
        let [a, b, c] = [0; 3].map(|_| fg[rng.random_range(0..fg.len())]);
        let ab = shortest_path_length(&m, a, b).unwrap();
        assert_eq!(ab, shortest_path_length(&m, b, a).unwrap());
        let bc = shortest_path_length(&m, b, c).unwrap();
        let ac = shortest_path_length(&m, a, c).unwrap();
        if let (Some(ab), Some(bc), Some(ac)) = (ab, bc, ac) {
            assert!(ac <= ab + bc + 1e-9);
        }
    }
}

#[test]
fn pair_sampling_is_uniform() {
    let gt = BinaryMask::from_fn(10, 1, |_, _| true);
    let sampler = PairSampler::new(&gt, &gt).unwrap();
    let mut rng = stream(12, Stream::Pairs, 0);
    let draws = 100_000;
    let mut counts = [0u64; 10];
    for _ in 0..draws {
        let (a, b) = sampler.sample_pair(&mut rng).unwrap();
        assert_ne!(a, b);
        counts[a.0] += 1;
        counts[b.0] += 1;
    }
    // each pixel appears in a pair with probability 2/10
    let p = 0.2;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn pair_sequence_is_reproducible() {
    let gt = BinaryMask::from_fn(30, 30, |x, y| x == 15 || y == 15);
    let a = sample_paths(&gt, &gt, 50, 0.1, 3).unwrap();
    let b = sample_paths(&gt, &gt, 50, 0.1, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_masks_are_fully_correct() {
    let mut rng = stream(13, Stream::Fixture, 0);
    let gt = blob_mask(&mut rng, 48);
    let r = connectivity(&gt, &gt, 1000, 0.1, 1).unwrap();
    assert_eq!(r.n_samples, 1000);
    assert_eq!((r.cor, r.inf, r.wrn), (100.0, 0.0, 0.0));
}

#[test]
fn single_pixel_cut_matches_enumeration() {
    let len = 60;
    let cut = 20;
    let gt = BinaryMask::from_fn(len, 1, |_, _| true);
    let seg = BinaryMask::from_fn(len, 1, |x, _| x != cut);
    // pairs over the intersection that straddle the cut
    let left = cut as f64;
    let right = (len - cut - 1) as f64;
    let n = (len - 1) as f64;
    let expected = 100.0 * left * right / (n * (n - 1.0) / 2.0);
    let r = connectivity(&gt, &seg, 1000, 0.1, 7).unwrap();
    assert!((r.inf - expected).abs() <= 3.0, "INF {} vs {expected}", r.inf);
    assert_eq!(r.wrn, 0.0);
}

#[test]
fn dilating_segmentation_never_raises_inf() {
    let mut rng = stream(14, Stream::Fixture, 0);
    for seed in 0..5 {
        let gt = BinaryMask::from_fn(40, 40, |x, y| x == 20 || y == 8 || x == y);
        let seg = BinaryMask::from_fn(40, 40, |x, y| gt.get(x, y) && rng.random_bool(0.93));
        let dilated = seg.dilate();
        // intersections differ, so compare on the pairs drawn for `seg`
        let (samples, _) = sample_paths(&gt, &seg, 300, 0.1, seed).unwrap();
        let before = samples.iter().filter(|s| s.verdict == Verdict::Infeasible).count();
        let after = samples
            .iter()
            .filter(|s| shortest_path_length(&dilated, s.p1, s.p2).unwrap().is_none())
            .count();
        assert!(after <= before);
    }
}

#[test]
fn disjoint_seeds_converge() {
    let s = rsgn_core::dataset::synth_image(128, 21, 0).sample;
    let mut rng = stream(15, Stream::Fixture, 0);
    let seg = BinaryMask::from_fn(128, 128, |x, y| s.gt.get(x, y) && rng.random_bool(0.97));
    let a = connectivity(&s.gt, &seg, 1000, 0.1, 100).unwrap();
    let b = connectivity(&s.gt, &seg, 1000, 0.1, 200).unwrap();
    assert!((a.cor - b.cor).abs() < 3.0, "{} vs {}", a.cor, b.cor);
}

//! Seeded synthetic fundus-like images with exact vessel ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::image_io::{save_image, save_mask};
use super::Sample;
use crate::error::{invalid, Error, Result};
use crate::maps::BinaryMask;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

const NOISE_SIGMA: f64 = 0.05;
const MARGIN: f64 = 2.0;
const MAX_DEPTH: usize = 3;

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub sample: Sample,
    /// Rasterization of each tree on its own.
    pub trees: Vec<BinaryMask>,
}

struct Canvas {
    extent: usize,
    gt: BinaryMask,
    tree: BinaryMask,
    /// Darkening applied at each pixel (max over covering strokes).
    contrast: Vec<f64>,
}

impl Canvas {
    /// Disc stamp of diameter `width` at a point. The rounded pixel is always
    /// set, so a densely sampled curve gives an 8-connected trace.
    fn stamp(&mut self, px: f64, py: f64, width: f64, contrast: f64) {
        let n = self.extent as isize;
        let r = width / 2.0;
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        let reach = r.ceil() as isize + 1;
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                if x < 0 || y < 0 || x >= n || y >= n {
                    continue;
                }
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                if (x, y) == (cx, cy) || d2 <= r * r {
                    let (ux, uy) = (x as usize, y as usize);
                    self.gt.set(ux, uy, true);
                    self.tree.set(ux, uy, true);
                    let c = &mut self.contrast[uy * self.extent + ux];
                    *c = c.max(contrast);
                }
            }
        }
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(MARGIN, self.extent as f64 - 1.0 - MARGIN)
    }
}

fn vessel_contrast(width: f64) -> f64 {
    0.12 + 0.05 * width
}

/// One stroke as a chain of quadratic Bézier segments with matching
/// tangents at the joints; children branch off at joints.
fn grow(canvas: &mut Canvas, rng: &mut Rng, start: (f64, f64), heading: f64, width: f64, length: f64, depth: usize) {
    let mut p0 = start;
    let mut dir = heading;
    let mut travelled = 0.0;
    let contrast = vessel_contrast(width);
    while travelled < length {
        let seg = rng.random_range(12.0..24.0_f64).min(length - travelled).max(4.0);
        let turn = rng.random_range(-0.5..0.5);
        let p1 = (
            canvas.clamp(p0.0 + dir.cos() * seg / 2.0),
            canvas.clamp(p0.1 + dir.sin() * seg / 2.0),
        );
        let end_dir = dir + turn;
        let raw = (p1.0 + end_dir.cos() * seg / 2.0, p1.1 + end_dir.sin() * seg / 2.0);
        let p2 = (canvas.clamp(raw.0), canvas.clamp(raw.1));
        let hit_border = p2 != raw;

        let chord = (p1.0 - p0.0).hypot(p1.1 - p0.1) + (p2.0 - p1.0).hypot(p2.1 - p1.1);
        let steps = (chord / 0.25).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let a = (1.0 - t) * (1.0 - t);
            let b = 2.0 * (1.0 - t) * t;
            let c = t * t;
            canvas.stamp(
                a * p0.0 + b * p1.0 + c * p2.0,
                a * p0.1 + b * p1.1 + c * p2.1,
                width,
                contrast,
            );
        }
        travelled += seg;
        if (p2.0 - p1.0).abs() + (p2.1 - p1.1).abs() > 1e-9 {
            dir = (p2.1 - p1.1).atan2(p2.0 - p1.0);
        }
        p0 = p2;
        if hit_border {
            break;
        }
        if depth < MAX_DEPTH && travelled < length && rng.random_bool(0.35) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let child_dir = dir + side * rng.random_range(0.4..1.2);
            let child_width = (width - 1.0).max(1.0);
            let child_len = (length - travelled) * rng.random_range(0.4..0.8);
            grow(canvas, rng, p0, child_dir, child_width, child_len, depth + 1);
        }
    }
}

/// Image `index` of the synthetic set for `seed`. Requires `extent ≥ 64`.
pub fn synth_image(extent: usize, seed: u64, index: usize) -> SynthImage {
    let mut rng = stream(seed, Stream::Synth, index as u64);
    let rng = &mut rng;
    let mut canvas = Canvas {
        extent,
        gt: BinaryMask::filled(extent, extent, false),
        tree: BinaryMask::filled(extent, extent, false),
        contrast: vec![0.0; extent * extent],
    };
    let n = extent as f64;
    let n_trees = rng.random_range(2..=4);
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        canvas.tree = BinaryMask::filled(extent, extent, false);
        // start on a random border, heading roughly to the centre
        let along = rng.random_range(0.15..0.85) * n;
        let start = match rng.random_range(0..4) {
            0 => (along, MARGIN),
            1 => (n - 1.0 - MARGIN, along),
            2 => (along, n - 1.0 - MARGIN),
            _ => (MARGIN, along),
        };
        let to_centre = (n / 2.0 - start.1).atan2(n / 2.0 - start.0);
        let heading = to_centre + rng.random_range(-PI / 4.0..PI / 4.0);
        let width = rng.random_range(3.0..=4.0_f64).round();
        let length = rng.random_range(0.5..0.9) * n;
        grow(&mut canvas, rng, start, heading, width, length, 0);
        trees.push(canvas.tree.clone());
    }

    let base = rng.random_range(0.5..0.7);
    let slope = rng.random_range(0.1..0.25);
    let theta = rng.random_range(0.0..2.0 * PI);
    let gains = [1.0, 0.8, 0.6];
    let offsets = [0.25, 0.05, 0.0];
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("finite sigma");
    let mut image = vec![0.0; 3 * extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let u = ((x as f64 - n / 2.0) * theta.cos() + (y as f64 - n / 2.0) * theta.sin()) / n;
            let intensity = base + slope * u - canvas.contrast[y * extent + x];
            for ch in 0..3 {
                let v = gains[ch] * intensity + offsets[ch] + noise.sample(rng);
                image[(ch * extent + y) * extent + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::new(vec![3, extent, extent], image).expect("extent matches");
    let fov = BinaryMask::filled(extent, extent, true);
    let sample = Sample::new(format!("synth_{index:03}"), image, canvas.gt, Some(fov)).expect("extents match");
    SynthImage { sample, trees }
}

/// Writes `n_images` synthetic samples under `out`: `images/<id>.ppm`,
/// `gt/<id>.pgm`, `fov/<id>.pgm`.
pub fn synth_vessels(out: &Path, n_images: usize, extent: usize, seed: u64) -> Result<()> {
    if extent < 64 {
        return Err(invalid!("synthetic extent must be at least 64, got {extent}"));
    }
    for dir in ["images", "gt", "fov"] {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for i in 0..n_images {
        let s = synth_image(extent, seed, i).sample;
        save_image(&out.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        save_mask(&out.join("gt").join(format!("{}.pgm", s.id)), &s.gt)?;
        save_mask(
            &out.join("fov").join(format!("{}.pgm", s.id)),
            s.fov.as_ref().expect("full frame"),
        )?;
    }
    Ok(())
}

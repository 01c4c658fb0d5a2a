//! Samples, padding, patch sampling, manifests and the synthetic generator.

mod image_io;
mod manifest;
mod synth;

pub use image_io::{load_image, load_mask, save_image, save_mask, save_prob_map};
pub use manifest::{make_split, DatasetKind, Manifest, Record, Split};
pub use synth::{synth_image, synth_vessels, SynthImage};

use rand::Rng as _;

use crate::error::{invalid, shape_err, Error, Result};
use crate::maps::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One image with its ground truth and optional field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `C×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt: BinaryMask,
    pub fov: Option<BinaryMask>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, gt: BinaryMask, fov: Option<BinaryMask>) -> Result<Self> {
        let id = id.into();
        let [c, h, w] = image.shape()[..] else {
            return Err(shape_err!(
                "sample `{id}`: image must be C×H×W, got {:?}",
                image.shape()
            ));
        };
        if c != 1 && c != 3 {
            return Err(shape_err!("sample `{id}`: image channel axis must be 1 or 3, got {c}"));
        }
        if !gt.same_extent(w, h) {
            return Err(shape_err!(
                "sample `{id}`: ground truth {}×{} vs image {w}×{h}",
                gt.width(),
                gt.height()
            ));
        }
        if let Some(f) = &fov {
            if !f.same_extent(w, h) {
                return Err(shape_err!(
                    "sample `{id}`: field of view {}×{} vs image {w}×{h}",
                    f.width(),
                    f.height()
                ));
            }
        }
        Ok(Sample { id, image, gt, fov })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    fn in_fov(&self, x: usize, y: usize) -> bool {
        self.fov.as_ref().is_none_or(|f| f.get(x, y))
    }
}

/// Mirror index without edge repetition (`… 2 1 | 0 1 2 … n-1 | n-2 …`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads a `C×H×W` tensor on the right and bottom to `new_h × new_w`.
pub fn pad_reflect(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(shape_err!("pad_reflect expects C×H×W, got {:?}", image.shape()));
    };
    if new_h < h || new_w < w {
        return Err(shape_err!("cannot pad {h}×{w} down to {new_h}×{new_w}"));
    }
    let src = image.data();
    Ok(Tensor::from_fn(&[c, new_h, new_w], |i| {
        let ch = i / (new_h * new_w);
        let y = reflect_index(((i / new_w) % new_h) as isize, h);
        let x = reflect_index((i % new_w) as isize, w);
        src[(ch * h + y) * w + x]
    }))
}

/// Top-left `h × w` window of a `C×H×W` tensor.
pub fn crop(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    window(image, 0, 0, h, w)
}

fn window(image: &Tensor, x0: usize, y0: usize, h: usize, w: usize) -> Result<Tensor> {
    let [c, ih, iw] = image.shape()[..] else {
        return Err(shape_err!("crop expects C×H×W, got {:?}", image.shape()));
    };
    if y0 + h > ih || x0 + w > iw {
        return Err(shape_err!("window {w}×{h} at ({x0},{y0}) exceeds {iw}×{ih}"));
    }
    let src = image.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        src[(ch * ih + y0 + y) * iw + x0 + x]
    }))
}

fn pad_mask(mask: &BinaryMask, new_h: usize, new_w: usize) -> BinaryMask {
    BinaryMask::from_fn(new_w, new_h, |x, y| {
        x < mask.width() && y < mask.height() && mask.get(x, y)
    })
}

fn crop_mask(mask: &BinaryMask, x0: usize, y0: usize, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| mask.get(x0 + x, y0 + y))
}

/// A sample padded for the network, remembering its original extent.
#[derive(Clone, Debug)]
pub struct PaddedSample {
    pub sample: Sample,
    pub original_height: usize,
    pub original_width: usize,
}

impl PaddedSample {
    pub fn crop(&self) -> Result<Sample> {
        let (h, w) = (self.original_height, self.original_width);
        Sample::new(
            self.sample.id.clone(),
            crop(&self.sample.image, h, w)?,
            crop_mask(&self.sample.gt, 0, 0, h, w),
            self.sample.fov.as_ref().map(|f| crop_mask(f, 0, 0, h, w)),
        )
    }
}

/// Pads right/bottom up to the next multiple: image by reflection, masks
/// with background.
pub fn pad_to_grid(sample: &Sample, multiple: usize) -> Result<PaddedSample> {
    if multiple == 0 {
        return Err(invalid!("padding multiple must be positive"));
    }
    let (h, w) = (sample.height(), sample.width());
    let (nh, nw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    Ok(PaddedSample {
        sample: Sample {
            id: sample.id.clone(),
            image: pad_reflect(&sample.image, nh, nw)?,
            gt: pad_mask(&sample.gt, nh, nw),
            fov: sample.fov.as_ref().map(|f| pad_mask(f, nh, nw)),
        },
        original_height: h,
        original_width: w,
    })
}

/// A training patch.
#[derive(Clone, Debug)]
pub struct Patch {
    /// `1×C×s×s`.
    pub image: Tensor,
    /// `1×1×s×s` binary target.
    pub target: Tensor,
    /// Top-left corner `(x, y)` in the source image.
    pub origin: (usize, usize),
    /// Whether the patch was drawn around a vessel pixel.
    pub vessel_centred: bool,
}

pub fn check_patch_size(size: usize) -> Result<()> {
    if !size.is_multiple_of(4) || size < 28 {
        return Err(invalid!(
            "patch size must be a multiple of 4 and at least 28, got {size}"
        ));
    }
    Ok(())
}

/// Draws one patch. Centres come from field-of-view pixels (vessel pixels
/// inside the field of view when `vessel_centred`); windows are clamped to
/// the image.
pub fn sample_patch(sample: &Sample, size: usize, vessel_centred: bool, rng: &mut Rng) -> Result<Patch> {
    check_patch_size(size)?;
    let (h, w) = (sample.height(), sample.width());
    if size > h || size > w {
        return Err(Error::Data(format!(
            "sample `{}`: {size}×{size} patches do not fit a {w}×{h} image",
            sample.id
        )));
    }
    let candidates: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| sample.in_fov(x, y) && (!vessel_centred || sample.gt.get(x, y)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data(format!(
            "sample `{}`: no {} pixel inside the field of view to centre a patch on",
            sample.id,
            if vessel_centred { "vessel" } else { "valid" }
        )));
    }
    let (cx, cy) = candidates[rng.random_range(0..candidates.len())];
    let x0 = cx.saturating_sub(size / 2).min(w - size);
    let y0 = cy.saturating_sub(size / 2).min(h - size);
    let image = window(&sample.image, x0, y0, size, size)?;
    let c = image.shape()[0];
    let target = crop_mask(&sample.gt, x0, y0, size, size).to_tensor();
    Ok(Patch {
        image: image.reshape(vec![1, c, size, size])?,
        target,
        origin: (x0, y0),
        vessel_centred,
    })
}

/// `count` patches, the first `ceil(pos_fraction·count)` vessel-centred.
pub fn sample_patches(
    sample: &Sample,
    size: usize,
    count: usize,
    pos_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<Patch>> {
    if !(0.0..=1.0).contains(&pos_fraction) {
        return Err(invalid!("pos_fraction must lie in [0, 1], got {pos_fraction}"));
    }
    let positives = (pos_fraction * count as f64).ceil() as usize;
    (0..count)
        .map(|i| sample_patch(sample, size, i < positives, rng))
        .collect()
}

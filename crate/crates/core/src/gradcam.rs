//! Grad-CAM saliency over time and space.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::ClipTensor;
use crate::error::{Error, Result};
use crate::model::{Model, Pathway};
use crate::nn::{self, Volume};

/// Saliency for one clip, target class and pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub target_class: usize,
    pub pathway: Pathway,
    /// One weight per channel of the final activations.
    pub channel_weights: Vec<f64>,
    /// ReLU of the weighted activation sum at feature resolution
    /// `(T', H', W')`.
    pub raw: Vec<f64>,
    pub raw_dims: [usize; 3],
    /// `raw` upsampled to the clip's `(T, H, W)` and scaled so the maximum
    /// is 1 (all zeros if `raw` is).
    pub map: Vec<f64>,
    pub dims: [usize; 3],
}

impl SaliencyMap {
    pub fn at(&self, t: usize, y: usize, x: usize) -> f64 {
        let [_, h, w] = self.dims;
        self.map[(t * h + y) * w + x]
    }

    /// Fraction of total saliency inside `mask`, a `(T, H, W)` voxel mask.
    /// Zero for an all-zero map.
    pub fn mass_fraction(&self, mask: &[bool]) -> Result<f64> {
        if mask.len() != self.map.len() {
            return Err(Error::Shape(format!(
                "mask has {} voxels, saliency map has {}",
                mask.len(),
                self.map.len()
            )));
        }
        let total: f64 = self.map.iter().sum();
        if total == 0.0 {
            return Ok(0.0);
        }
        let inside: f64 = self.map.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        Ok(inside / total)
    }
}

/// Channel weights: the class-score gradient averaged over each channel.
pub fn channel_weights(gradient: &Volume) -> Vec<f64> {
    (0..gradient.channels)
        .map(|c| {
            let g = gradient.channel(c);
            g.iter().sum::<f64>() / g.len() as f64
        })
        .collect()
}

/// Grad-CAM of `clip` for `target` (the predicted class if `None`) from the
/// final activations of `pathway`.
pub fn compute_gradcam(
    model: &Model,
    clip: &ClipTensor,
    target: Option<usize>,
    pathway: Pathway,
) -> Result<SaliencyMap> {
    let trace = model.forward_trace(clip)?;
    let target = target.unwrap_or_else(|| nn::argmax(&trace.logits));
    if target >= model.num_classes() {
        return Err(Error::Invalid(format!(
            "target class {target} out of range for {} classes",
            model.num_classes()
        )));
    }
    let activations = trace.final_activations(pathway).ok_or_else(|| {
        Error::Config(format!("model has no {pathway:?} pathway"))
    })?;
    let (d_slow, d_fast) = model.class_score_gradients(&trace, target);
    let gradient = match pathway {
        Pathway::Slow => d_slow,
        Pathway::Fast => d_fast.expect("fast activations imply fast gradients"),
    };
    let weights = channel_weights(&gradient);
    let [_, t, h, w] = activations.dims();
    let mut raw = vec![0.0; t * h * w];
    for (c, wc) in weights.iter().enumerate() {
        for (r, a) in raw.iter_mut().zip(activations.channel(c)) {
            *r += wc * a;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let dims = [clip.frames, clip.height, clip.width];
    let mut map = upsample_trilinear(&raw, [t, h, w], dims);
    let peak = map.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        map.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(SaliencyMap {
        target_class: target,
        pathway,
        channel_weights: weights,
        raw,
        raw_dims: [t, h, w],
        map,
        dims,
    })
}

/// Sample positions and weights along one axis, half-pixel aligned.
fn axis_taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(from - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Trilinear resize of a `(T, H, W)` grid.
pub fn upsample_trilinear(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let [ft, fh, fw] = from;
    let (tt, th, tw) = (axis_taps(ft, to[0]), axis_taps(fh, to[1]), axis_taps(fw, to[2]));
    let at = |t: usize, y: usize, x: usize| src[(t * fh + y) * fw + x];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(t0, t1, a) in &tt {
        for &(y0, y1, b) in &th {
            for &(x0, x1, c) in &tw {
                let plane = |t| {
                    let top = at(t, y0, x0) * (1.0 - c) + at(t, y0, x1) * c;
                    let bottom = at(t, y1, x0) * (1.0 - c) + at(t, y1, x1) * c;
                    top * (1.0 - b) + bottom * b
                };
                out.push(plane(t0) * (1.0 - a) + plane(t1) * a);
            }
        }
    }
    out
}

/// Blends the saliency map onto each frame as a green tint whose opacity
/// is `max_alpha` times the saliency.
pub fn render_overlays(map: &SaliencyMap, clip: &ClipTensor, max_alpha: f64) -> Result<Vec<RgbImage>> {
    if map.dims != [clip.frames, clip.height, clip.width] {
        return Err(Error::Shape(format!(
            "saliency dims {:?} do not match clip {:?}",
            map.dims,
            clip.shape()
        )));
    }
    if !(0.0..=1.0).contains(&max_alpha) {
        return Err(Error::Config(format!("overlay alpha {max_alpha} must lie in [0, 1]")));
    }
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    Ok((0..clip.frames)
        .map(|t| {
            let frame = clip.frame(t);
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                let px = &frame[(y * w + x) * c..][..c];
                let rgb = if c >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
                let a = max_alpha * map.at(t, y, x);
                let tint = [0.0, 1.0, 0.0];
                let mix = |i: usize| {
                    let v = (1.0 - a) * f64::from(rgb[i]) + a * tint[i];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                Rgb([mix(0), mix(1), mix(2)])
            })
        })
        .collect())
}

/// Dumps the upsampled map in the packed tensor format, shape `(T, H, W, 1)`.
pub fn save_raw_map(map: &SaliencyMap, path: &Path) -> Result<()> {
    let [t, h, w] = map.dims;
    let data: Vec<f32> = map.map.iter().map(|&v| v as f32).collect();
    crate::data::write_packed(path, [t, h, w, 1], &data)
}

/// Writes overlays as `NNNNNN.png` under `dir`.
pub fn save_overlays(images: &[RgbImage], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(t, img)| {
            let path = dir.join(format!("{t:06}.png"));
            img.save(&path)
                .map_err(|e| Error::Image { path: path.clone(), source: e })?;
            Ok(path)
        })
        .collect()
}

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Crop rectangle in pixels, origin at the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// One image, row-major with interleaved channels (`H x W x C`).
///
/// `max_value` is the largest representable sample value of the source
/// encoding; a normalized frame has `max_value == 1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_value: f32,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        max_value: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!(
                "frames must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "frame data has {} samples, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if !(max_value > 0.0 && max_value.is_finite()) {
            return Err(Error::Invalid(format!("bad max value {max_value}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            max_value,
            data,
        })
    }

    /// Converts a decoded image to raw samples, keeping the source scale.
    pub fn from_image(img: &DynamicImage, channels: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (max_value, data): (f32, Vec<f32>) = match (img, channels) {
            (
                DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageRgb8(_)
                | DynamicImage::ImageRgba8(_),
                1,
            ) => (255.0, img.to_luma8().into_raw().into_iter().map(f32::from).collect()),
            (
                DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageRgb8(_)
                | DynamicImage::ImageRgba8(_),
                3,
            ) => (255.0, img.to_rgb8().into_raw().into_iter().map(f32::from).collect()),
            (
                DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_),
                1,
            ) => (65535.0, img.to_luma16().into_raw().into_iter().map(f32::from).collect()),
            (
                DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_),
                3,
            ) => (65535.0, img.to_rgb16().into_raw().into_iter().map(f32::from).collect()),
            (_, 1) => (1.0, img.to_luma32f().into_raw()),
            (_, 3) => (1.0, img.to_rgb32f().into_raw()),
            (_, c) => {
                return Err(Error::Invalid(format!(
                    "frames must have 1 or 3 channels, got {c}"
                )))
            }
        };
        Frame::new(h, w, channels, max_value, data)
    }

    /// 8-bit encoding of a normalized frame.
    pub fn to_image(&self) -> DynamicImage {
        let quantize = |v: f32| ((v / self.max_value).clamp(0.0, 1.0) * 255.0).round() as u8;
        let raw: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(ImageBuffer::from_raw(w, h, raw).expect("sized buffer"))
        } else {
            DynamicImage::ImageRgb8(ImageBuffer::from_raw(w, h, raw).expect("sized buffer"))
        }
    }

    fn crop(&self, rect: CropRect) -> Frame {
        let (x0, y0) = (rect.x as usize, rect.y as usize);
        let (cw, ch) = (rect.width as usize, rect.height as usize);
        let c = self.channels;
        let mut data = Vec::with_capacity(cw * ch * c);
        for row in y0..y0 + ch {
            let start = (row * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + cw * c]);
        }
        Frame {
            height: ch,
            width: cw,
            channels: c,
            max_value: self.max_value,
            data,
        }
    }

    fn resize(&self, height: usize, width: usize) -> Frame {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let (nw, nh) = (width as u32, height as u32);
        let data = if self.channels == 1 {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w, h, self.data.clone()).expect("sized buffer");
            imageops::resize(&buf, nw, nh, FilterType::Triangle).into_raw()
        } else {
            let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w, h, self.data.clone()).expect("sized buffer");
            imageops::resize(&buf, nw, nh, FilterType::Triangle).into_raw()
        };
        Frame {
            height,
            width,
            channels: self.channels,
            max_value: self.max_value,
            data,
        }
    }

    fn normalized(mut self) -> Frame {
        if self.max_value != 1.0 {
            let scale = 1.0 / self.max_value;
            self.data.iter_mut().for_each(|v| *v *= scale);
        }
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self.max_value = 1.0;
        self
    }
}

/// The largest centred square inside a `width x height` frame.
fn centre_square(width: usize, height: usize) -> CropRect {
    let side = width.min(height);
    CropRect {
        x: ((width - side) / 2) as u32,
        y: ((height - side) / 2) as u32,
        width: side as u32,
        height: side as u32,
    }
}

/// Crops each frame to `crop` (or the centred square when absent), resizes to
/// `target = (height, width)` and scales samples into `[0, 1]`.
pub fn preprocess_frames(
    raw_frames: &[Frame],
    crop: Option<CropRect>,
    target: (usize, usize),
) -> Result<Vec<Frame>> {
    let first = raw_frames
        .first()
        .ok_or_else(|| Error::Invalid("no frames to preprocess".into()))?;
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Invalid(format!("target size {target:?} must be positive")));
    }
    let (width, height) = (first.width, first.height);
    if raw_frames
        .iter()
        .any(|f| f.width != width || f.height != height || f.channels != first.channels)
    {
        return Err(Error::Shape("frames of one clip differ in size".into()));
    }
    let rect = match crop {
        Some(r) => {
            if r.width == 0 || r.height == 0 {
                return Err(Error::Invalid(format!("zero-area crop rectangle {r:?}")));
            }
            let right = u64::from(r.x) + u64::from(r.width);
            let bottom = u64::from(r.y) + u64::from(r.height);
            if right > width as u64 || bottom > height as u64 {
                return Err(Error::Invalid(format!(
                    "crop rectangle {r:?} lies outside the {width}x{height} frame"
                )));
            }
            r
        }
        None => centre_square(width, height),
    };
    let full = rect.x == 0 && rect.y == 0 && rect.width as usize == width && rect.height as usize == height;
    Ok(raw_frames
        .iter()
        .map(|f| {
            let cropped = if full { f.clone() } else { f.crop(rect) };
            cropped.resize(target.0, target.1).normalized()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, max: f32) -> Frame {
        let data = (0..h * w).map(|i| (i % 256) as f32 * max / 255.0).collect();
        Frame::new(h, w, 1, max, data).unwrap()
    }

    #[test]
    fn same_size_only_rescales() {
        let f = ramp(8, 8, 255.0);
        let out = preprocess_frames(std::slice::from_ref(&f), None, (8, 8)).unwrap();
        for (a, b) in out[0].data.iter().zip(&f.data) {
            assert!((a - b / 255.0).abs() < 1e-7);
        }
        assert_eq!(out[0].max_value, 1.0);
    }

    #[test]
    fn downsizes_to_target() {
        let f = ramp(300, 300, 255.0);
        let out = preprocess_frames(&[f.clone(), f], None, (150, 150)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].height, out[0].width), (150, 150));
        assert!(out[0].data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_crops() {
        let f = ramp(10, 10, 255.0);
        let past_right = CropRect { x: 5, y: 0, width: 6, height: 4 };
        assert!(preprocess_frames(std::slice::from_ref(&f), Some(past_right), (4, 4)).is_err());
        let empty = CropRect { x: 0, y: 0, width: 0, height: 4 };
        assert!(preprocess_frames(std::slice::from_ref(&f), Some(empty), (4, 4)).is_err());
        assert!(preprocess_frames(&[], None, (4, 4)).is_err());
    }

    #[test]
    fn crop_selects_region() {
        let f = ramp(10, 10, 255.0);
        let rect = CropRect { x: 2, y: 3, width: 4, height: 4 };
        let out = preprocess_frames(std::slice::from_ref(&f), Some(rect), (4, 4)).unwrap();
        assert!((out[0].data[0] - f.data[3 * 10 + 2] / 255.0).abs() < 1e-7);
    }

    #[test]
    fn centre_square_fallback() {
        let f = ramp(6, 10, 255.0);
        let out = preprocess_frames(std::slice::from_ref(&f), None, (6, 6)).unwrap();
        assert!((out[0].data[0] - f.data[2] / 255.0).abs() < 1e-7);
    }

    #[test]
    fn idempotent_on_prepared_input() {
        let f = ramp(12, 12, 255.0);
        let once = preprocess_frames(std::slice::from_ref(&f), None, (6, 6)).unwrap();
        let twice = preprocess_frames(&once, None, (6, 6)).unwrap();
        assert_eq!(once, twice);
    }
}

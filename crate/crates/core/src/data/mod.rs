//! Images, masks, the synthetic dataset generator, augmentation and on-disk
//! formats.

mod augment;
mod io;
mod synthetic;

pub use augment::{augment, crop_resize, flip_horizontal};
pub use io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_gray, load_image, load_mask, load_split,
    save_gray, save_image, save_mask, save_split, DatasetManifest,
};
pub use synthetic::{generate_synthetic, synthetic_sample, GENERATOR_VERSION};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-major (`C x H x W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Binary mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                op: "Image::new",
                expected: vec![channels, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "Mask::new",
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::contract("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn salient_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn has_both_classes(&self) -> bool {
        self.data.contains(&0) && self.data.contains(&1)
    }
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width) {
            return Err(Error::Shape {
                op: "sample",
                expected: vec![self.image.height, self.image.width],
                actual: vec![self.mask.height, self.mask.width],
            });
        }
        Ok(())
    }
}

/// Bilinear resampling of the window `(y0, x0, ch, cw)` to `out_h x out_w`
/// using pixel-centre alignment. A full window at the same size is exact.
pub fn resample_bilinear(
    img: &Image,
    (y0, x0, ch, cw): (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Image {
    let coords = |o: usize, n_out: usize, start: usize, n_in: usize| -> (usize, usize, f64) {
        let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let s = s.clamp(0.0, (n_in - 1) as f64);
        let i = s.floor() as usize;
        let j = (i + 1).min(n_in - 1);
        (start + i, start + j, s - i as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coords(o, out_h, y0, ch)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coords(o, out_w, x0, cw)).collect();
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        let p = img.plane(c);
        for &(ya, yb, fy) in &ys {
            for &(xa, xb, fx) in &xs {
                let at = |y: usize, x: usize| p[y * img.width + x];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                data.push(if fy == 0.0 {
                    top
                } else {
                    top * (1.0 - fy) + bot * fy
                });
            }
        }
    }
    Image {
        channels: img.channels,
        height: out_h,
        width: out_w,
        data,
    }
}

/// Nearest-neighbour counterpart of [`resample_bilinear`] for masks.
pub fn resample_nearest(
    mask: &Mask,
    (y0, x0, ch, cw): (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Mask {
    let idx = |o: usize, n_out: usize, start: usize, n_in: usize| {
        start + (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = idx(oy, out_h, y0, ch);
        for ox in 0..out_w {
            data.push(mask.data[y * mask.width + idx(ox, out_w, x0, cw)]);
        }
    }
    Mask {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Bilinear resize of the whole image.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::contract("resize needs non-empty source and target"));
    }
    Ok(resample_bilinear(
        img,
        (0, 0, img.height, img.width),
        height,
        width,
    ))
}

pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 || mask.height == 0 || mask.width == 0 {
        return Err(Error::contract("resize needs non-empty source and target"));
    }
    Ok(resample_nearest(
        mask,
        (0, 0, mask.height, mask.width),
        height,
        width,
    ))
}

/// Stack images into an `N x C x H x W` tensor.
pub fn to_batch<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Shape {
                op: "to_batch",
                expected: vec![c, h, w],
                actual: vec![img.channels, img.height, img.width],
            });
        }
        data.extend(img.data.iter().map(|&v| T::of(v)));
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

//! Input corruptions: additive white Gaussian noise and a block-DCT
//! quantizer standing in for JPEG compression.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const SIGMA_RANGE: (f64, f64) = (0.02, 0.20);
pub const QUALITY_RANGE: (f64, f64) = (20.0, 80.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distortion {
    Awgn { sigma: f64 },
    DctQuant { quality: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub distortion: Distortion,
    #[serde(default)]
    pub seed: u64,
    /// When set, [`random_strength`] draws the strength from this range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
}

impl DistortionSpec {
    pub fn awgn(sigma: f64) -> Self {
        Self {
            distortion: Distortion::Awgn { sigma },
            seed: 0,
            range: None,
        }
    }

    pub fn dct_quant(quality: u8) -> Self {
        Self {
            distortion: Distortion::DctQuant { quality },
            seed: 0,
            range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.distortion {
            Distortion::Awgn { sigma } if !(sigma >= 0.0) => {
                return Err(Error::config("sigma", format!("must be >= 0, got {sigma}")))
            }
            Distortion::DctQuant { quality } if !(1..=100).contains(&quality) => {
                return Err(Error::config(
                    "quality",
                    format!("must be in 1..=100, got {quality}"),
                ))
            }
            _ => {}
        }
        if let Some((lo, hi)) = self.range {
            let ok = match self.distortion {
                Distortion::Awgn { .. } => lo >= 0.0 && lo <= hi,
                Distortion::DctQuant { .. } => lo >= 1.0 && lo <= hi && hi <= 100.0,
            };
            if !ok {
                return Err(Error::config(
                    "range",
                    format!("invalid strength range [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }

    /// Apply with the spec's own seed, mixed with `tag` (for per-image streams).
    pub fn apply(&self, image: &Image, tag: u64) -> Result<Image> {
        self.validate()?;
        match self.distortion {
            Distortion::Awgn { sigma } => {
                awgn(image, sigma, &mut Rng::new(self.seed, 0).split(tag))
            }
            Distortion::DctQuant { quality } => dct_quant(image, quality),
        }
    }
}

/// `clip(x + sigma * N(0, 1), 0, 1)` independently per element.
pub fn awgn(image: &Image, sigma: f64, rng: &mut Rng) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::config("sigma", format!("must be >= 0, got {sigma}")));
    }
    let mut out = image.clone();
    if sigma > 0.0 {
        for v in &mut out.data {
            *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

const LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantization steps in `[0, 1]` intensity units. The DC step is 0 (exact);
/// quality 100 gives all-zero steps.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(
            "quality",
            format!("must be in 1..=100, got {quality}"),
        ));
    }
    let q = quality as f64;
    let scale = if q < 50.0 {
        5000.0 / q
    } else {
        200.0 - 2.0 * q
    };
    let mut t = [0.0; 64];
    for (i, s) in t.iter_mut().enumerate().skip(1) {
        *s = LUMA[i] * scale / 100.0 / 255.0;
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    c
}

/// Per channel: orthonormal 8x8 DCT-II (edge blocks zero-padded), quantize,
/// dequantize, inverse DCT, clip to `[0, 1]`.
pub fn dct_quant(image: &Image, quality: u8) -> Result<Image> {
    let table = quant_table(quality)?;
    let basis = dct_basis();
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    for ch in 0..image.channels {
        let plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        if by + y < h && bx + x < w {
                            *v = plane[(by + y) * w + bx + x];
                        }
                    }
                }
                let mut coef = transform(&basis, &block, false);
                for (i, c) in coef.iter_mut().flatten().enumerate() {
                    if table[i] > 0.0 {
                        *c = (*c / table[i]).round() * table[i];
                    }
                }
                let rec = transform(&basis, &coef, true);
                for (y, row) in rec.iter().enumerate() {
                    for (x, v) in row.iter().enumerate() {
                        if by + y < h && bx + x < w {
                            plane[(by + y) * w + bx + x] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `C B C^T` forward, `C^T B C` inverse.
fn transform(c: &[[f64; 8]; 8], b: &[[f64; 8]; 8], inverse: bool) -> [[f64; 8]; 8] {
    let at = |m: &[[f64; 8]; 8], i: usize, j: usize, t: bool| if t { m[j][i] } else { m[i][j] };
    let mut tmp = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            tmp[i][j] = (0..8).map(|k| at(c, i, k, inverse) * b[k][j]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            out[i][j] = (0..8).map(|k| tmp[i][k] * at(c, j, k, inverse)).sum();
        }
    }
    out
}

/// Draw a concrete strength: sigma uniform in the range (default
/// [`SIGMA_RANGE`]) or quality a uniform integer (default [`QUALITY_RANGE`]).
pub fn random_strength(spec: &DistortionSpec, rng: &mut Rng) -> Result<DistortionSpec> {
    spec.validate()?;
    let distortion = match spec.distortion {
        Distortion::Awgn { .. } => {
            let (lo, hi) = spec.range.unwrap_or(SIGMA_RANGE);
            Distortion::Awgn {
                sigma: if lo == hi { lo } else { rng.uniform_in(lo, hi) },
            }
        }
        Distortion::DctQuant { .. } => {
            let (lo, hi) = spec.range.unwrap_or(QUALITY_RANGE);
            Distortion::DctQuant {
                quality: rng.int_in(lo.ceil() as i64, hi.floor() as i64) as u8,
            }
        }
    };
    Ok(DistortionSpec {
        distortion,
        seed: spec.seed,
        range: None,
    })
}

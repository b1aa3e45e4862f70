use std::f64::consts::PI;

use super::{Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::Rng;

/// Bumped whenever generated pixels change for a given seed.
pub const GENERATOR_VERSION: u32 = 1;

const MIN_FRACTION: f64 = 0.06;
const MAX_FRACTION: f64 = 0.30;

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        hy: f64,
        hx: f64,
        angle: f64,
    },
    /// Counter-clockwise convex polygon.
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(r: &mut Rng, size: f64) -> Self {
        let cy = r.uniform_in(0.25, 0.75) * size;
        let cx = r.uniform_in(0.25, 0.75) * size;
        let angle = r.uniform_in(0.0, PI);
        match r.below(3) {
            0 => Shape::Ellipse {
                cy,
                cx,
                ry: r.uniform_in(0.1, 0.28) * size,
                rx: r.uniform_in(0.1, 0.28) * size,
                angle,
            },
            1 => Shape::Rect {
                cy,
                cx,
                hy: r.uniform_in(0.08, 0.24) * size,
                hx: r.uniform_in(0.08, 0.24) * size,
                angle,
            },
            _ => {
                let k = 5 + r.below(3);
                let mut angles: Vec<f64> = (0..k).map(|_| r.uniform_in(0.0, 2.0 * PI)).collect();
                angles.sort_by(f64::total_cmp);
                let radius = r.uniform_in(0.14, 0.3) * size;
                let pts: Vec<(f64, f64)> = angles
                    .iter()
                    .map(|a| (cy + radius * a.sin(), cx + radius * a.cos()))
                    .collect();
                Shape::Polygon(pts)
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let rotate = |cy: f64, cx: f64, angle: f64| {
            let (dy, dx) = (y - cy, x - cx);
            let (s, c) = angle.sin_cos();
            (c * dy - s * dx, s * dy + c * dx)
        };
        match *self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (u, v) = rotate(cy, cx, angle);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::Rect {
                cy,
                cx,
                hy,
                hx,
                angle,
            } => {
                let (u, v) = rotate(cy, cx, angle);
                u.abs() <= hy && v.abs() <= hx
            }
            Shape::Polygon(ref pts) => {
                // points sorted by angle around an interior centre are counter-clockwise in (x, y)
                (0..pts.len()).all(|i| {
                    let (ay, ax) = pts[i];
                    let (by, bx) = pts[(i + 1) % pts.len()];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

/// Smooth field: a handful of random low-frequency cosines.
fn low_freq(r: &mut Rng, size: usize, amp: (f64, f64)) -> Vec<f64> {
    let waves: Vec<_> = (0..3)
        .map(|_| {
            (
                r.uniform_in(amp.0, amp.1),
                r.uniform_in(-2.5, 2.5) * 2.0 * PI / size as f64,
                r.uniform_in(-2.5, 2.5) * 2.0 * PI / size as f64,
                r.uniform_in(0.0, 2.0 * PI),
            )
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            waves
                .iter()
                .map(|(a, fy, fx, ph)| a * (fy * y + fx * x + ph).cos())
                .sum()
        })
        .collect()
}

/// Band-limited texture: white noise smoothed by two 3x3 box passes.
fn texture(r: &mut Rng, size: usize, std: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..size * size).map(|_| r.normal()).collect();
    for _ in 0..2 {
        let src = v.clone();
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                            acc += src[yy as usize * size + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                v[y * size + x] = acc / n;
            }
        }
    }
    // two box passes leave roughly a fifth of the white-noise std
    v.iter_mut().for_each(|x| *x *= std * 5.0);
    v
}

/// Offset of length `len` orthogonal to the grey axis, at hue `angle`
/// (0 is pure red).
fn chroma(angle: f64, len: f64) -> [f64; 3] {
    let red = [2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
    let cross = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
    let (s, c) = angle.sin_cos();
    [0, 1, 2].map(|k| len * (c * red[k] + s * cross[k]))
}

/// Sample `index` of the dataset drawn from `rng`.
pub fn synthetic_sample(rng: &Rng, index: usize, size: usize, id: String) -> Sample {
    let mut r = rng.split(index as u64);
    let sz = size as f64;

    let mut mask = vec![0u8; size * size];
    loop {
        let shapes: Vec<Shape> = (0..if r.bernoulli(0.3) { 2 } else { 1 })
            .map(|_| Shape::random(&mut r, sz))
            .collect();
        for (i, m) in mask.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            *m = shapes.iter().any(|s| s.contains(y, x)) as u8;
        }
        let frac = mask.iter().map(|&v| v as f64).sum::<f64>() / mask.len() as f64;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&frac) {
            break;
        }
    }

    // object hues cluster around red, background hues around cyan; the two
    // families overlap in their tails
    let bg_grey = r.uniform_in(0.3, 0.7);
    let fg_grey = r.uniform_in(0.3, 0.7);
    let bg_chroma = {
        let (angle, len) = (PI + 0.8 * r.normal(), r.uniform_in(0.0, 0.2));
        chroma(angle, len)
    };
    let fg_chroma = {
        let (angle, len) = (0.6 * r.normal(), r.uniform_in(0.15, 0.35));
        chroma(angle, len)
    };
    let base: Vec<f64> = bg_chroma.iter().map(|c| bg_grey + c).collect();
    let fg_base: Vec<f64> = fg_chroma.iter().map(|c| fg_grey + c).collect();

    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let bg_field = low_freq(&mut r, size, (0.02, 0.06));
        let fg_field = low_freq(&mut r, size, (0.01, 0.05));
        let tex = texture(&mut r, size, 0.04);
        let fg = fg_base[c].clamp(0.05, 0.95);
        for i in 0..size * size {
            let v = if mask[i] == 1 {
                fg + fg_field[i]
            } else {
                base[c] + bg_field[i]
            };
            data.push((v + tex[i]).clamp(0.0, 1.0));
        }
    }
    Sample {
        id,
        image: Image {
            channels: 3,
            height: size,
            width: size,
            data,
        },
        mask: Mask {
            height: size,
            width: size,
            data: mask,
        },
    }
}

/// `n` samples with ids `{prefix}-{index:05}`; sample `i` depends only on
/// `(seed, i)`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64, prefix: &str) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    if !size.is_power_of_two() || size < 8 {
        return Err(Error::config(
            "size",
            format!("must be a power of two >= 8, got {size}"),
        ));
    }
    let rng = Rng::new(seed, GENERATOR_VERSION as u64);
    Ok(exec::map_indexed(n, |i| {
        synthetic_sample(&rng, i, size, format!("{prefix}-{i:05}"))
    }))
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image, Mask, Sample};
use crate::error::{Error, Result};

/// Index of one split on disk: `manifest.json`, `images/{id}.ppm`,
/// `masks/{id}.pgm`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub ids: Vec<String>,
    pub seed: u64,
    pub size: usize,
    pub version: u32,
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let err = |offset: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err(err(start, format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "number out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected one whitespace byte after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(2, format!("empty image {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(err(
            pos,
            format!("maxval {maxval} not supported (8-bit only)"),
        ));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = h.data_start + h.width * h.height * channels;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[h.data_start..expected])
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) to a channel-major image.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let h = parse_header(bytes, b"P6", path)?;
    let px = payload(bytes, &h, 3, path)?;
    let hw = h.width * h.height;
    let mut data = vec![0.0; 3 * hw];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = rgb[c] as f64 / h.maxval as f64;
        }
    }
    Image::new(3, h.height, h.width, data)
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::contract(format!(
            "PPM needs 3 channels, image has {}",
            img.channels
        )));
    }
    let hw = img.height * img.width;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for i in 0..hw {
        for c in 0..3 {
            out.push(to_byte(img.data[c * hw + i]));
        }
    }
    Ok(out)
}

/// Binary PGM (P5) as intensities in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let h = parse_header(bytes, b"P5", path)?;
    let px = payload(bytes, &h, 1, path)?;
    Ok((
        h.height,
        h.width,
        px.iter().map(|&v| v as f64 / h.maxval as f64).collect(),
    ))
}

pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Shape {
            op: "encode_pgm",
            expected: vec![height, width],
            actual: vec![values.len()],
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_ppm(&read(path)?, path)
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write(path, &encode_ppm(img)?)
}

/// Grayscale map in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm(&read(path)?, path)
}

pub fn save_gray(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    write(path, &encode_pgm(height, width, values)?)
}

/// Mask pixels at or above half intensity are salient.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let (h, w, v) = load_gray(path)?;
    Mask::new(h, w, v.iter().map(|&x| (x >= 0.5) as u8).collect())
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let v: Vec<f64> = mask.data.iter().map(|&m| m as f64).collect();
    save_gray(path, mask.height, mask.width, &v)
}

fn split_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{id}.ppm")),
        dir.join("masks").join(format!("{id}.pgm")),
    )
}

pub fn save_split(dir: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let (img, mask) = split_paths(dir, &s.id);
        save_image(&img, &s.image)?;
        save_mask(&mask, &s.mask)?;
    }
    let path = dir.join("manifest.json");
    write(&path, serde_json::to_string_pretty(manifest)?.as_bytes())
}

/// Read a split written by [`save_split`], checking image and mask sizes.
pub fn load_split(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&read(&path)?).map_err(|e| Error::Parse {
            path: path.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let (img_path, mask_path) = split_paths(dir, id);
        let image = load_image(&img_path)?;
        let mask = load_mask(&mask_path)?;
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::Parse {
                path: mask_path,
                offset: 0,
                reason: format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.width, mask.height, image.width, image.height
                ),
            });
        }
        samples.push(Sample {
            id: id.clone(),
            image,
            mask,
        });
    }
    Ok((manifest, samples))
}

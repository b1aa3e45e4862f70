use super::{resample_bilinear, resample_nearest, Sample};
use crate::rng::Rng;

const MAX_CROP_ATTEMPTS: usize = 5;

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut image = sample.image.clone();
    for c in 0..image.channels {
        for y in 0..h {
            let row = (c * h + y) * w;
            image.data[row..row + w].reverse();
        }
    }
    let mut mask = sample.mask.clone();
    for row in mask.data.chunks_mut(w) {
        row.reverse();
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

/// Crop the square-scaled window `scale * (h, w)` at `(y0, x0)` and resize it
/// back: bilinear for the image, nearest for the mask.
pub fn crop_resize(sample: &Sample, scale: f64, y0: usize, x0: usize) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    let (y0, x0) = (y0.min(h - ch), x0.min(w - cw));
    let window = (y0, x0, ch, cw);
    Sample {
        id: sample.id.clone(),
        image: resample_bilinear(&sample.image, window, h, w),
        mask: resample_nearest(&sample.mask, window, h, w),
    }
}

/// Random horizontal flip (p = 0.5) and a random crop of scale in
/// `[0.8, 1.0]` resized back to the input size. A crop that removes a class
/// is redrawn; after five failures the sample is returned untouched.
pub fn augment(sample: &Sample, rng: &mut Rng) -> Sample {
    let flipped = if rng.bernoulli(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let (h, w) = (sample.image.height, sample.image.width);
    for _ in 0..MAX_CROP_ATTEMPTS {
        let scale = rng.uniform_in(0.8, 1.0);
        let ch = ((scale * h as f64).round() as usize).clamp(1, h);
        let cw = ((scale * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.below(h - ch + 1);
        let x0 = rng.below(w - cw + 1);
        let out = crop_resize(&flipped, scale, y0, x0);
        if out.mask.has_both_classes() || !sample.mask.has_both_classes() {
            return out;
        }
    }
    sample.clone()
}

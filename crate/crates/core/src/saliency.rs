//! Saliency maps from a forward pass: the classifier probability map and the
//! metric map (distance of each embedding to the background centroid).

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::metrics::adaptive_threshold;
use crate::model::ForwardOutput;
use crate::tensor::Tensor;

/// `salient[i]` is true for pixels the classifier puts in the salient region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub salient: Vec<bool>,
}

impl RegionPartition {
    pub fn background_count(&self) -> usize {
        self.salient.iter().filter(|s| !**s).count()
    }
}

/// How background pixels are weighted when averaging their embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidWeighting {
    /// Proportional to the classifier's background probability.
    #[default]
    Posterior,
    Uniform,
}

/// Which map downstream evaluation reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    #[default]
    Metric,
    Ce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMaps {
    pub size: usize,
    /// Metric map normalized to `[0, 1]` by its maximum.
    pub metric: Vec<f64>,
    /// Classifier probability of the salient class.
    pub ce: Vec<f64>,
    /// `selected > 2 * mean(selected)`.
    pub binary: Vec<u8>,
    pub selected: MapKind,
}

impl SaliencyMaps {
    pub fn map(&self, kind: MapKind) -> &[f64] {
        match kind {
            MapKind::Metric => &self.metric,
            MapKind::Ce => &self.ce,
        }
    }
}

/// A pixel is salient iff `P(salient) > 0.5`; exact ties go to background.
pub fn partition_regions(p_salient: &[f64]) -> RegionPartition {
    RegionPartition {
        salient: p_salient.iter().map(|&p| p > 0.5).collect(),
    }
}

/// Weighted mean of background embeddings. `emb` is channel-major
/// (`C x HW`). Falls back to all pixels when the background region is empty.
pub fn background_centroid(
    emb: &[f64],
    channels: usize,
    partition: &RegionPartition,
    p_salient: &[f64],
    weighting: CentroidWeighting,
) -> Result<Vec<f64>> {
    let hw = partition.salient.len();
    if emb.len() != channels * hw || p_salient.len() != hw || hw == 0 {
        return Err(Error::contract(format!(
            "background_centroid: {} embedding values, {} probabilities for {hw} pixels of dimension {channels}",
            emb.len(),
            p_salient.len()
        )));
    }
    let empty = partition.background_count() == 0;
    let weight = |i: usize| -> f64 {
        if !empty && partition.salient[i] {
            return 0.0;
        }
        match weighting {
            CentroidWeighting::Posterior => 1.0 - p_salient[i],
            CentroidWeighting::Uniform => 1.0,
        }
    };
    let mut total: f64 = (0..hw).map(weight).sum();
    let uniform_fallback = total <= 0.0;
    if uniform_fallback {
        // every candidate pixel has zero posterior weight
        total = if empty {
            hw as f64
        } else {
            partition.background_count() as f64
        };
    }
    let mut centroid = vec![0.0; channels];
    for i in 0..hw {
        let w = if uniform_fallback {
            if empty || !partition.salient[i] {
                1.0
            } else {
                0.0
            }
        } else {
            weight(i)
        };
        if w == 0.0 {
            continue;
        }
        for (c, acc) in centroid.iter_mut().enumerate() {
            *acc += w * emb[c * hw + i];
        }
    }
    centroid.iter_mut().for_each(|v| *v /= total);
    Ok(centroid)
}

/// Per-pixel Euclidean distance to `centroid` (channel-major `emb`).
pub fn metric_saliency_raw(emb: &[f64], centroid: &[f64]) -> Vec<f64> {
    let c = centroid.len();
    let hw = emb.len() / c.max(1);
    let mut d = vec![0.0; hw];
    for (ch, &m) in centroid.iter().enumerate() {
        for (acc, &v) in d.iter_mut().zip(&emb[ch * hw..(ch + 1) * hw]) {
            *acc += (v - m) * (v - m);
        }
    }
    d.iter_mut().for_each(|v| *v = v.sqrt());
    d
}

/// Divide by the maximum; an all-zero map stays zero.
pub fn normalize_max(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        raw.iter().map(|v| v / m).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Both maps and the adaptive binary map for image `b` of a forward pass.
pub fn saliency_maps<T: Element>(
    out: &ForwardOutput<T>,
    b: usize,
    weighting: CentroidWeighting,
    selected: MapKind,
) -> Result<SaliencyMaps> {
    let (n, c, h, w) = out.embedding.dims4()?;
    if b >= n {
        return Err(Error::contract(format!(
            "image {b} out of range for batch of {n}"
        )));
    }
    let hw = h * w;
    let emb: Vec<f64> = out.embedding.image(b).iter().map(|v| v.as_f64()).collect();
    let ce: Vec<f64> = out.probs.image(b)[hw..]
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let partition = partition_regions(&ce);
    let centroid = background_centroid(&emb, c, &partition, &ce, weighting)?;
    let metric = normalize_max(&metric_saliency_raw(&emb, &centroid));
    let sel = match selected {
        MapKind::Metric => &metric,
        MapKind::Ce => &ce,
    };
    let t = adaptive_threshold(sel);
    let binary = sel.iter().map(|&v| (v > t) as u8).collect();
    Ok(SaliencyMaps {
        size: h,
        metric,
        ce,
        binary,
        selected,
    })
}

/// Background centroids of every image, computed from values (no tape).
pub fn batch_centroids<T: Element>(
    embedding: &Tensor<T>,
    probs: &Tensor<T>,
    weighting: CentroidWeighting,
) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = embedding.dims4()?;
    let hw = h * w;
    (0..n)
        .map(|b| {
            let emb: Vec<f64> = embedding.image(b).iter().map(|v| v.as_f64()).collect();
            let ce: Vec<f64> = probs.image(b)[hw..].iter().map(|v| v.as_f64()).collect();
            background_centroid(&emb, c, &partition_regions(&ce), &ce, weighting)
        })
        .collect()
}

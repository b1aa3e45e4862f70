//! Dataset-level evaluation, the distortion degradation table and the
//! per-dataset gradient statistics table.

use serde::{Deserialize, Serialize};

use crate::data::{to_batch, Image, Sample};
use crate::distortions::DistortionSpec;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_map, mean_curve, mean_report, pr_curve, quantize_8bit, EvalReport, PrCurve,
};
use crate::model::MEnetParams;
use crate::nn::BnMode;
use crate::robustness::{input_gradient, jacobian_stats, AbsStats, MenetProbe, ProbeHead};
use crate::saliency::{saliency_maps, CentroidWeighting, MapKind, SaliencyMaps};
use crate::tensor::Tensor;

/// Images per inference forward pass.
pub const INFER_BATCH: usize = 10;

/// Saliency maps for every image, computed in inference mode.
pub fn predict<T: Element>(
    params: &MEnetParams<T>,
    images: &[&Image],
    selected: MapKind,
) -> Result<Vec<SaliencyMaps>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let fwd = params.forward(&to_batch::<T>(chunk)?, BnMode::Inference)?;
        for b in 0..chunk.len() {
            out.push(saliency_maps(
                &fwd,
                b,
                CentroidWeighting::Posterior,
                selected,
            )?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub map: MapKind,
    pub per_image: Vec<EvalReport>,
    pub mean: EvalReport,
    /// Averaged over images, computed on the classifier map.
    pub pr_curve: PrCurve,
}

/// Score maps against masks: F-beta and MAE on `map`, PR curve on the
/// classifier probability map.
pub fn score_maps(maps: &[SaliencyMaps], masks: &[&[u8]], map: MapKind) -> Result<DatasetEval> {
    if maps.len() != masks.len() {
        return Err(Error::contract(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let per_image = maps
        .iter()
        .zip(masks)
        .map(|(m, g)| evaluate_map(m.map(map), g))
        .collect::<Result<Vec<_>>>()?;
    let curves = maps
        .iter()
        .zip(masks)
        .map(|(m, g)| pr_curve(&quantize_8bit(&m.ce), g))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetEval {
        map,
        mean: mean_report(&per_image)?,
        pr_curve: mean_curve(&curves)?,
        per_image,
    })
}

pub fn evaluate_samples<T: Element>(
    params: &MEnetParams<T>,
    samples: &[Sample],
    map: MapKind,
) -> Result<DatasetEval> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let maps = predict(params, &images, map)?;
    let masks: Vec<&[u8]> = samples.iter().map(|s| s.mask.data.as_slice()).collect();
    score_maps(&maps, &masks, map)
}

/// Mean metric-map value over ground-truth background and salient pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub background: f64,
    pub salient: f64,
}

/// Per-image class means of the normalized metric map, averaged over images.
pub fn metric_separation<T: Element>(
    params: &MEnetParams<T>,
    samples: &[Sample],
) -> Result<Separation> {
    if samples.is_empty() {
        return Err(Error::contract(
            "metric_separation needs at least one sample",
        ));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let maps = predict(params, &images, MapKind::Metric)?;
    let (mut bg, mut fg) = (0.0, 0.0);
    for (m, s) in maps.iter().zip(samples) {
        let class_mean = |cls: u8| {
            let v: Vec<f64> = m
                .metric
                .iter()
                .zip(&s.mask.data)
                .filter(|(_, &g)| g == cls)
                .map(|(&v, _)| v)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        bg += class_mean(0);
        fg += class_mean(1);
    }
    let n = samples.len() as f64;
    Ok(Separation {
        background: bg / n,
        salient: fg / n,
    })
}

/// F-beta of one model under clean input and each distortion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub model: String,
    pub clean: f64,
    /// `(column label, F-beta)` in order of increasing strength.
    pub distorted: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationTable {
    pub rows: Vec<DegradationRow>,
}

impl DegradationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,clean");
        if let Some(r) = self.rows.first() {
            for (label, _) in &r.distorted {
                s.push(',');
                s.push_str(label);
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.model, r.clean));
            for (_, f) in &r.distorted {
                s.push_str(&format!(",{f}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn distortion_label(spec: &DistortionSpec) -> String {
    match spec.distortion {
        crate::distortions::Distortion::Awgn { sigma } => format!("awgn_{sigma}"),
        crate::distortions::Distortion::DctQuant { quality } => format!("dct_q{quality}"),
    }
}

/// Evaluate each `(name, params, map)` on clean and distorted copies of
/// `samples`. Distorted image `i` uses stream `i` of the spec's seed, so every
/// model sees identical corruptions.
pub fn degradation_table<T: Element>(
    models: &[(&str, &MEnetParams<T>, MapKind)],
    samples: &[Sample],
    specs: &[DistortionSpec],
) -> Result<DegradationTable> {
    let distorted_sets = specs
        .iter()
        .map(|spec| {
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(Sample {
                        id: s.id.clone(),
                        image: spec.apply(&s.image, i as u64)?,
                        mask: s.mask.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(models.len());
    for &(name, params, map) in models {
        let clean = evaluate_samples(params, samples, map)?.mean.f_beta;
        let distorted = specs
            .iter()
            .zip(&distorted_sets)
            .map(|(spec, set)| {
                Ok((
                    distortion_label(spec),
                    evaluate_samples(params, set, map)?.mean.f_beta,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(DegradationRow {
            model: name.to_string(),
            clean,
            distorted,
        });
    }
    Ok(DegradationTable { rows })
}

/// One dataset's averaged `|g|` statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianRow {
    pub dataset: String,
    pub images: usize,
    #[serde(flatten)]
    pub stats: AbsStats,
}

impl JacobianRow {
    pub const CSV_HEADER: &'static str = "dataset,images,max,min,median,mean,var\n";

    pub fn to_csv_line(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}\n",
            self.dataset, self.images, s.max, s.min, s.median, s.mean, s.var
        )
    }
}

/// Input gradients of the scalarized `head` for every image of a dataset.
pub fn gradient_fields<T: Element>(
    params: &MEnetParams<T>,
    images: &[&Image],
    head: ProbeHead,
) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let x: Tensor<T> = to_batch(&[img])?;
            let probe = MenetProbe::new(params, &x, head)?;
            Ok(input_gradient(&probe, &x)?
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect())
        })
        .collect()
}

pub fn jacobian_row<T: Element>(
    params: &MEnetParams<T>,
    dataset: &str,
    images: &[&Image],
    head: ProbeHead,
) -> Result<JacobianRow> {
    let fields = gradient_fields(params, images, head)?;
    Ok(JacobianRow {
        dataset: dataset.to_string(),
        images: images.len(),
        stats: jacobian_stats(&fields)?.mean,
    })
}

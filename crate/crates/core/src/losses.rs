//! Training objective: per-pixel cross entropy, the pairwise metric loss and
//! its centroid form, their weighted sum, and balanced hard-negative mining.
//!
//! All losses take per-image label vectors (`0` background, `1` salient,
//! length `H * W`) and per-image [`SampleSet`]s. Each image contributes the
//! mean over its sampled pixels; the batch value is the mean over images.

use crate::autodiff::{self, Ctx, Function, InputGrads, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-7;

/// Pixels (flat `y * W + x` indices) taking part in a loss, by class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl SampleSet {
    /// Every pixel, split by label.
    pub fn all(labels: &[u8]) -> Self {
        let mut s = Self::default();
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 {
                s.positive.push(i);
            } else {
                s.negative.push(i);
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require_both(&self, op: &str) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Degenerate(format!(
                "{op} needs pixels of both classes"
            )));
        }
        Ok(())
    }

    fn iter(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.positive
            .iter()
            .map(|&i| (i, true))
            .chain(self.negative.iter().map(|&i| (i, false)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub l_ce: f64,
    /// Pairwise metric loss; only evaluated on request (quadratic cost).
    pub l_ml: Option<f64>,
    pub l_ml_star: f64,
    pub total: f64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ce: Var,
    pub l_ml_star: Var,
    pub total: Var,
}

/// Mean embeddings of the two sampled classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCentroids {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn check_batch<T: Element>(
    x: &Tensor<T>,
    labels: &[Vec<u8>],
    sets: &[SampleSet],
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if labels.len() != n || sets.len() != n {
        return Err(Error::contract(format!(
            "{op}: {n} images but {} label maps and {} sample sets",
            labels.len(),
            sets.len()
        )));
    }
    let hw = h * w;
    for (lab, set) in labels.iter().zip(sets) {
        if lab.len() != hw {
            return Err(Error::Shape {
                op,
                expected: vec![hw],
                actual: vec![lab.len()],
            });
        }
        if set.iter().any(|(i, _)| i >= hw) {
            return Err(Error::contract(format!("{op}: sample index out of range")));
        }
    }
    Ok((n, c, hw))
}

/// Per-pixel `-ln P(true class)` for one image of an `N x 2 x H x W` map.
pub fn per_pixel_ce<T: Element>(probs: &Tensor<T>, image: usize, labels: &[u8]) -> Vec<f64> {
    let hw = labels.len();
    let img = probs.image(image);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = img[if l != 0 { hw + i } else { i }].as_f64();
            -p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
        })
        .collect()
}

struct CrossEntropy {
    probs: Var,
    labels: Vec<Vec<u8>>,
    sets: Vec<SampleSet>,
}

impl<T: Element> Function<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.probs]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let p = ctx.value(self.probs);
        let n = self.labels.len();
        let hw = self.labels[0].len();
        let g = grad.item().as_f64();
        let mut dp = Tensor::zeros(p.shape());
        for b in 0..n {
            let scale = g / (n * self.sets[b].len()) as f64;
            for (i, pos) in self.sets[b].iter() {
                let idx = b * 2 * hw + if pos { hw + i } else { i };
                let v = p.data()[idx].as_f64();
                if (PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&v) {
                    dp.data_mut()[idx] += T::of(-scale / v);
                }
            }
        }
        Ok(vec![Some(dp)])
    }
}

/// Mean of `-ln P(l_i = y_i)` over the sampled pixels, probabilities clamped
/// to `[1e-7, 1 - 1e-7]`. `probs` is `N x 2 x H x W`, channel 1 salient.
pub fn cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[Vec<u8>],
    sets: &[SampleSet],
) -> Result<Var> {
    let p = tape.value(probs);
    let (n, c, _) = check_batch(p, labels, sets, "cross_entropy")?;
    if c != 2 {
        return Err(Error::contract(
            "cross_entropy expects 2 probability channels",
        ));
    }
    let mut total = 0.0;
    for b in 0..n {
        if sets[b].is_empty() {
            return Err(Error::Degenerate(
                "cross_entropy on an empty sample set".into(),
            ));
        }
        let ce = per_pixel_ce(p, b, &labels[b]);
        total += sets[b].iter().map(|(i, _)| ce[i]).sum::<f64>() / sets[b].len() as f64;
    }
    let value = Tensor::scalar(T::of(total / n as f64));
    let node = CrossEntropy {
        probs,
        labels: labels.to_vec(),
        sets: sets.to_vec(),
    };
    Ok(tape.push(value, Box::new(node)))
}

fn gather<T: Element>(
    x: &Tensor<T>,
    b: usize,
    c: usize,
    hw: usize,
    i: usize,
) -> impl Iterator<Item = f64> + '_ {
    (0..c).map(move |ch| x.data()[(b * c + ch) * hw + i].as_f64())
}

/// Class centroids of image `b` in an `N x C x H x W` embedding.
pub fn class_centroids<T: Element>(
    emb: &Tensor<T>,
    b: usize,
    set: &SampleSet,
) -> Result<ClassCentroids> {
    set.require_both("class_centroids")?;
    let (_, c, h, w) = emb.dims4()?;
    let mean = |idx: &[usize]| {
        let mut m = vec![0.0; c];
        for &i in idx {
            m.iter_mut()
                .zip(gather(emb, b, c, h * w, i))
                .for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a /= idx.len() as f64);
        m
    };
    Ok(ClassCentroids {
        positive: mean(&set.positive),
        negative: mean(&set.negative),
    })
}

struct MetricCentroid {
    emb: Var,
    sets: Vec<SampleSet>,
    centroids: Vec<ClassCentroids>,
}

impl<T: Element> Function<T> for MetricCentroid {
    fn name(&self) -> &'static str {
        "metric_loss_centroid"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.emb]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        // per image the loss equals -||mu+ - mu-||^2, so d/df_i is
        // -2 delta / |set+| on positives and +2 delta / |set-| on negatives
        let e = ctx.value(self.emb);
        let (n, c, h, w) = e.dims4()?;
        let hw = h * w;
        let g = grad.item().as_f64() / n as f64;
        let mut de = Tensor::zeros(e.shape());
        for (b, (set, cen)) in self.sets.iter().zip(&self.centroids).enumerate() {
            let delta: Vec<f64> = cen
                .positive
                .iter()
                .zip(&cen.negative)
                .map(|(p, q)| p - q)
                .collect();
            let (a, bn) = (set.positive.len() as f64, set.negative.len() as f64);
            for (i, pos) in set.iter() {
                let k = if pos { -2.0 * g / a } else { 2.0 * g / bn };
                for ch in 0..c {
                    de.data_mut()[(b * c + ch) * hw + i] += T::of(k * delta[ch]);
                }
            }
        }
        Ok(vec![Some(de)])
    }
}

/// Mean over sampled pixels of `||f_i - f_same||^2 - ||f_i - f_other||^2`
/// where `f_same`/`f_other` are the centroids of the pixel's own and the
/// opposite class.
pub fn metric_loss_centroid<T: Element>(
    tape: &mut Tape<T>,
    emb: Var,
    labels: &[Vec<u8>],
    sets: &[SampleSet],
) -> Result<Var> {
    let e = tape.value(emb);
    let (n, c, hw) = check_batch(e, labels, sets, "metric_loss_centroid")?;
    let mut total = 0.0;
    let mut centroids = Vec::with_capacity(n);
    for (b, set) in sets.iter().enumerate() {
        let cen = class_centroids(e, b, set)?;
        let mut acc = 0.0;
        for (i, pos) in set.iter() {
            let (same, other) = if pos {
                (&cen.positive, &cen.negative)
            } else {
                (&cen.negative, &cen.positive)
            };
            for (ch, v) in gather(e, b, c, hw, i).enumerate() {
                acc += (v - same[ch]).powi(2) - (v - other[ch]).powi(2);
            }
        }
        total += acc / set.len() as f64;
        centroids.push(cen);
    }
    let value = Tensor::scalar(T::of(total / n as f64));
    let node = MetricCentroid {
        emb,
        sets: sets.to_vec(),
        centroids,
    };
    Ok(tape.push(value, Box::new(node)))
}

struct MetricPairwise {
    emb: Var,
    sets: Vec<SampleSet>,
}

impl MetricPairwise {
    /// Calls `f(i, k, coeff)` for every ordered pair contributing
    /// `coeff * ||f_i - f_k||^2` to the loss of one image.
    fn pairs(set: &SampleSet, mut f: impl FnMut(usize, usize, f64)) {
        let p = set.len() as f64;
        for (i, pos_i) in set.iter() {
            let (n_same, n_other) = if pos_i {
                (set.positive.len(), set.negative.len())
            } else {
                (set.negative.len(), set.positive.len())
            };
            for (k, pos_k) in set.iter() {
                let coeff = if pos_k == pos_i {
                    1.0 / (p * n_same as f64)
                } else {
                    -1.0 / (p * n_other as f64)
                };
                f(i, k, coeff);
            }
        }
    }
}

impl<T: Element> Function<T> for MetricPairwise {
    fn name(&self) -> &'static str {
        "metric_loss_pairwise"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.emb]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let e = ctx.value(self.emb);
        let (n, c, h, w) = e.dims4()?;
        let hw = h * w;
        let g = grad.item().as_f64() / n as f64;
        let mut de = vec![0.0; e.numel()];
        for (b, set) in self.sets.iter().enumerate() {
            Self::pairs(set, |i, k, coeff| {
                for ch in 0..c {
                    let (ii, kk) = ((b * c + ch) * hw + i, (b * c + ch) * hw + k);
                    let d = 2.0 * g * coeff * (e.data()[ii].as_f64() - e.data()[kk].as_f64());
                    de[ii] += d;
                    de[kk] -= d;
                }
            });
        }
        Ok(vec![Some(Tensor::from_vec(
            e.shape(),
            de.into_iter().map(T::of).collect(),
        )?)])
    }
}

/// Mean over sampled pixels `i` of the mean squared distance to same-class
/// samples minus the mean squared distance to other-class samples (`k = i`
/// included in the same-class mean). Quadratic in the sample count.
pub fn metric_loss_pairwise<T: Element>(
    tape: &mut Tape<T>,
    emb: Var,
    labels: &[Vec<u8>],
    sets: &[SampleSet],
) -> Result<Var> {
    let e = tape.value(emb);
    let (n, c, hw) = check_batch(e, labels, sets, "metric_loss_pairwise")?;
    let mut total = 0.0;
    for (b, set) in sets.iter().enumerate() {
        set.require_both("metric_loss_pairwise")?;
        let mut acc = 0.0;
        MetricPairwise::pairs(set, |i, k, coeff| {
            let d2: f64 = gather(e, b, c, hw, i)
                .zip(gather(e, b, c, hw, k))
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            acc += coeff * d2;
        });
        total += acc;
    }
    let value = Tensor::scalar(T::of(total / n as f64));
    let node = MetricPairwise {
        emb,
        sets: sets.to_vec(),
    };
    Ok(tape.push(value, Box::new(node)))
}

/// `l_ml_star * metric_weight + lambda * l_ce` recorded on the tape.
/// `ce_sets` and `metric_sets` may differ (metric loss over all pixels when
/// mining is restricted to the classifier).
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<T: Element>(
    tape: &mut Tape<T>,
    embedding: Var,
    probs: Var,
    labels: &[Vec<u8>],
    ce_sets: &[SampleSet],
    metric_sets: &[SampleSet],
    lambda: f64,
    metric_weight: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) || !(metric_weight >= 0.0) {
        return Err(Error::contract(format!(
            "loss weights must be >= 0, got lambda {lambda}, metric {metric_weight}"
        )));
    }
    let l_ce = cross_entropy(tape, probs, labels, ce_sets)?;
    let l_ml_star = metric_loss_centroid(tape, embedding, labels, metric_sets)?;
    let a = autodiff::scale(tape, l_ml_star, metric_weight)?;
    let b = autodiff::scale(tape, l_ce, lambda)?;
    let total = autodiff::add(tape, a, b)?;
    Ok(LossVars {
        l_ce,
        l_ml_star,
        total,
    })
}

impl LossVars {
    pub fn values<T: Element>(&self, tape: &Tape<T>, lambda: f64) -> LossValues {
        LossValues {
            l_ce: tape.value(self.l_ce).item().as_f64(),
            l_ml: None,
            l_ml_star: tape.value(self.l_ml_star).item().as_f64(),
            total: tape.value(self.total).item().as_f64(),
            lambda,
        }
    }
}

/// Balanced 1:1 sample: every minority-class pixel plus the same number of
/// majority-class pixels with the largest per-pixel loss (ties to the lower
/// index). Index lists are returned sorted.
pub fn hard_negative_sample(per_pixel_loss: &[f64], labels: &[u8]) -> Result<SampleSet> {
    if per_pixel_loss.len() != labels.len() {
        return Err(Error::Shape {
            op: "hard_negative_sample",
            expected: vec![labels.len()],
            actual: vec![per_pixel_loss.len()],
        });
    }
    let all = SampleSet::all(labels);
    all.require_both("hard_negative_sample")?;
    let (minority, mut majority, pos_is_minority) = if all.positive.len() <= all.negative.len() {
        (all.positive, all.negative, true)
    } else {
        (all.negative, all.positive, false)
    };
    majority.sort_by(|&a, &b| {
        per_pixel_loss[b]
            .total_cmp(&per_pixel_loss[a])
            .then(a.cmp(&b))
    });
    majority.truncate(minority.len());
    majority.sort_unstable();
    Ok(if pos_is_minority {
        SampleSet {
            positive: minority,
            negative: majority,
        }
    } else {
        SampleSet {
            positive: majority,
            negative: minority,
        }
    })
}

//! Input-gradient statistics, Monte-Carlo directional norms, element-wise
//! Jacobian bounds and measured distortion sensitivity.
//!
//! Every probe works on a [`Scalarized`] function: a network whose outputs are
//! summed into one number. [`MenetProbe`] wraps a trained model in inference
//! mode; [`MlpProbe`] is a small dense fixture with known gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::MEnetParams;
use crate::nn::{self, BnMode};
use crate::rng::{random_uniform_sphere, Rng};
use crate::saliency::{batch_centroids, CentroidWeighting};
use crate::tensor::Tensor;

/// A scalar function of one input tensor that can be recorded on a tape.
pub trait Scalarized<T: Element>: Sync {
    fn input_shape(&self) -> Vec<usize>;

    /// Record `f(x)` as a single-element node.
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;

    fn eval(&self, x: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.record(&mut tape, xv)?;
        Ok(tape.value(y).item().as_f64())
    }
}

/// Which MEnet output gets summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeHead {
    /// Raw (unnormalized) distance map to the background centroid.
    #[default]
    Metric,
    /// Salient-class probability map.
    Ce,
}

/// MEnet scalarized for one image. The background centroid is computed once
/// from the clean image and then held fixed, so the probed function is a
/// smooth map of the input almost everywhere.
pub struct MenetProbe<'a, T: Element> {
    params: &'a MEnetParams<T>,
    head: ProbeHead,
    mode: BnMode,
    centers: Vec<Vec<T>>,
    shape: Vec<usize>,
}

impl<'a, T: Element> MenetProbe<'a, T> {
    pub fn new(params: &'a MEnetParams<T>, image: &Tensor<T>, head: ProbeHead) -> Result<Self> {
        let out = params.forward(image, BnMode::Inference)?;
        let centers = batch_centroids(&out.embedding, &out.probs, CentroidWeighting::Posterior)?
            .into_iter()
            .map(|c| c.into_iter().map(T::of).collect())
            .collect();
        Ok(Self {
            params,
            head,
            mode: BnMode::Inference,
            centers,
            shape: image.shape().to_vec(),
        })
    }

    /// Override the batch-norm mode; anything but inference makes every probe fail.
    pub fn with_mode(mut self, mode: BnMode) -> Self {
        self.mode = mode;
        self
    }
}

impl<T: Element> Scalarized<T> for MenetProbe<'_, T> {
    fn input_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.mode != BnMode::Inference {
            return Err(Error::contract("robustness probes need inference-mode batch norm; batch statistics would couple the images"));
        }
        let vars = self.params.register(tape, false);
        let f = self.params.forward_on_tape(tape, x, &vars, self.mode)?;
        let map = match self.head {
            ProbeHead::Metric => nn::point_distance(tape, f.embedding, &self.centers)?,
            ProbeHead::Ce => autodiff::select_channel(tape, f.probs, 1)?,
        };
        autodiff::sum(tape, map)
    }
}

/// Dense network `sum(W_n relu(... relu(W_1 x)))` on a flat input.
#[derive(Clone, Debug)]
pub struct MlpProbe<T> {
    /// `weights[i]` is `out_i x in_i`.
    pub weights: Vec<Tensor<T>>,
}

impl<T: Element> MlpProbe<T> {
    pub fn new(weights: Vec<Tensor<T>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::contract("mlp probe needs at least one layer"));
        }
        for pair in weights.windows(2) {
            if pair[0].shape().len() != 2
                || pair[1].shape().len() != 2
                || pair[0].shape()[0] != pair[1].shape()[1]
            {
                return Err(Error::contract("mlp layer shapes do not chain"));
            }
        }
        Ok(Self { weights })
    }
}

impl<T: Element> Scalarized<T> for MlpProbe<T> {
    fn input_shape(&self) -> Vec<usize> {
        vec![1, self.weights[0].shape()[1]]
    }

    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                h = nn::relu(tape, h)?;
            }
            let w = tape.constant(w.clone());
            h = autodiff::linear(tape, h, w, None)?;
        }
        autodiff::sum(tape, h)
    }
}

/// `g = d f / d x` by one backward pass.
pub fn input_gradient<T: Element, F: Scalarized<T> + ?Sized>(
    f: &F,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    image.expect_shape(&f.input_shape(), "input_gradient")?;
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone(), true);
    let y = f.record(&mut tape, x)?;
    let seed = Tensor::ones(tape.value(y).shape());
    let mut grads = tape.backward(y, seed)?;
    grads
        .take(x)
        .ok_or_else(|| Error::contract("input did not reach the output"))
}

/// Statistics of `|g|` over all coordinates of one field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsStats {
    pub max: f64,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    /// Population variance.
    pub var: f64,
}

impl AbsStats {
    pub fn of(g: &[f64]) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::contract("statistics of an empty field"));
        }
        let mut a: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        a.sort_by(f64::total_cmp);
        let n = a.len();
        let median = if n % 2 == 1 {
            a[n / 2]
        } else {
            0.5 * (a[n / 2 - 1] + a[n / 2])
        };
        let mean = a.iter().sum::<f64>() / n as f64;
        let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Ok(Self {
            max: a[n - 1],
            min: a[0],
            median,
            mean,
            var,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub per_image: Vec<AbsStats>,
    /// Field-wise arithmetic mean of `per_image`.
    pub mean: AbsStats,
}

/// Per-image `|g|` statistics and their dataset average.
pub fn jacobian_stats(fields: &[Vec<f64>]) -> Result<JacobianReport> {
    if fields.is_empty() {
        return Err(Error::contract("jacobian_stats needs at least one image"));
    }
    let per_image = fields
        .iter()
        .map(|g| AbsStats::of(g))
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let avg = |f: fn(&AbsStats) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let mean = AbsStats {
        max: avg(|s| s.max),
        min: avg(|s| s.min),
        median: avg(|s| s.median),
        mean: avg(|s| s.mean),
        var: avg(|s| s.var),
    };
    Ok(JacobianReport { per_image, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalEstimate {
    pub p: f64,
    pub t: f64,
    pub samples: usize,
    /// Mean of `|f(x + t n) - f(x)|^p / t^p` over unit directions `n`.
    pub estimate: f64,
    pub std_error: f64,
    /// Input dimension `d`. For `p = 2` the directional mean is
    /// `||grad f||^2 / d`, so the estimate of the squared norm itself is
    /// `estimate * d`.
    pub dimension: usize,
}

/// Monte-Carlo directional estimate of the gradient norm. Sample `i` draws its
/// direction from `rng.split(i)`, so the result does not depend on scheduling.
pub fn mc_directional_norm<T: Element, F: Scalarized<T> + ?Sized>(
    f: &F,
    image: &Tensor<T>,
    p: f64,
    t: f64,
    samples: usize,
    rng: &Rng,
) -> Result<DirectionalEstimate> {
    if !(t > 0.0) {
        return Err(Error::contract(format!("step t must be > 0, got {t}")));
    }
    if !(p >= 1.0) {
        return Err(Error::contract(format!("order p must be >= 1, got {p}")));
    }
    if samples == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    image.expect_shape(&f.input_shape(), "mc_directional_norm")?;
    let f0 = f.eval(image)?;
    let d = image.numel();
    let terms = exec::map_indexed(samples, |i| -> Result<f64> {
        let mut r = rng.split(i as u64);
        let dir: Vec<T> = random_uniform_sphere(&mut r, d)?;
        let step = T::of(t);
        let shifted = Tensor::from_vec(
            image.shape(),
            image
                .data()
                .iter()
                .zip(&dir)
                .map(|(&x, &n)| x + step * n)
                .collect(),
        )?;
        Ok(((f.eval(&shifted)? - f0).abs() / t).powf(p))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = samples as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let std_error = if samples > 1 {
        (terms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(DirectionalEstimate {
        p,
        t,
        samples,
        estimate: mean,
        std_error,
        dimension: d,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    #[default]
    L2,
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Element-wise bound `G`, flattened in input order.
    pub bound: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub norm: Norm,
    /// Lipschitz constant: `G` measured in `norm`.
    pub lipschitz: f64,
}

/// Element-wise Jacobian bound of `f`: the backward pass through the absolute
/// network with every nonlinearity's derivative replaced by 1. The result
/// does not depend on the input values.
pub fn lipschitz_bound<T: Element, F: Scalarized<T> + ?Sized>(
    f: &F,
    norm: Norm,
) -> Result<BoundReport> {
    let shape = f.input_shape();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&shape), true);
    let y = f.record(&mut tape, x)?;
    let mut grads = tape.backward_bound(y)?;
    let g = grads
        .take(x)
        .ok_or_else(|| Error::contract("input did not reach the output"))?;
    let bound: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
    let (l1, l2, linf) = (
        Norm::L1.of(&bound),
        Norm::L2.of(&bound),
        Norm::Linf.of(&bound),
    );
    Ok(BoundReport {
        lipschitz: norm.of(&bound),
        bound,
        l1,
        l2,
        linf,
        norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub e_input: f64,
    pub e_output: f64,
    pub ratio: f64,
}

/// `|f(distorted) - f(clean)| / ||distorted - clean||_2`.
pub fn distortion_sensitivity<T: Element, F: Scalarized<T> + ?Sized>(
    f: &F,
    clean: &Tensor<T>,
    distorted: &Tensor<T>,
) -> Result<SensitivityRecord> {
    clean.expect_shape(&f.input_shape(), "distortion_sensitivity")?;
    distorted.expect_shape(clean.shape(), "distortion_sensitivity")?;
    let e_input = clean
        .data()
        .iter()
        .zip(distorted.data())
        .map(|(&a, &b)| (b.as_f64() - a.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    if e_input == 0.0 {
        return Err(Error::Degenerate(
            "distortion left the input unchanged".into(),
        ));
    }
    let e_output = (f.eval(distorted)? - f.eval(clean)?).abs();
    Ok(SensitivityRecord {
        e_input,
        e_output,
        ratio: e_output / e_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v).unwrap()
    }

    #[test]
    fn linear_gradient_is_column_sums() {
        let f = MlpProbe::new(vec![mat(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, -1.0])]).unwrap();
        let g = input_gradient(&f, &mat(1, 3, vec![0.3, 0.1, -4.0])).unwrap();
        assert_eq!(g.data(), &[1.5, -1.5, 2.0]);
        let b = lipschitz_bound(&f, Norm::L2).unwrap();
        assert_eq!(b.bound, vec![1.5, 2.5, 4.0]);
    }

    #[test]
    fn zero_weights_have_zero_bound() {
        let f = MlpProbe::new(vec![mat(4, 3, vec![0.0; 12]), mat(1, 4, vec![0.0; 4])]).unwrap();
        let b = lipschitz_bound(&f, Norm::Linf).unwrap();
        assert_eq!((b.l1, b.l2, b.linf, b.lipschitz), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn four_element_field_stats() {
        let s = AbsStats::of(&[1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            (s.mean, s.median, s.var, s.min, s.max),
            (2.5, 2.5, 1.25, 1.0, 4.0)
        );
        assert!(jacobian_stats(&[]).is_err());
    }

    #[test]
    fn constant_function_has_zero_estimate() {
        let f = MlpProbe::new(vec![mat(1, 5, vec![0.0; 5])]).unwrap();
        let e = mc_directional_norm(&f, &mat(1, 5, vec![0.2; 5]), 2.0, 0.1, 50, &Rng::new(3, 0))
            .unwrap();
        assert_eq!(e.estimate, 0.0);
        assert!(
            mc_directional_norm(&f, &mat(1, 5, vec![0.2; 5]), 2.0, 0.0, 5, &Rng::new(3, 0))
                .is_err()
        );
    }

    #[test]
    fn zero_perturbation_is_rejected() {
        let f = MlpProbe::new(vec![mat(1, 2, vec![1.0, 1.0])]).unwrap();
        let x = mat(1, 2, vec![0.5, 0.5]);
        assert!(matches!(
            distortion_sensitivity(&f, &x, &x),
            Err(Error::Degenerate(_))
        ));
    }
}

use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Function, InputGrads, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Inference,
}

/// Per-channel batch normalization state. `gamma`/`beta` are absent for a
/// non-affine layer (equivalent to fixed `gamma = 1`, `beta = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Statistics of one training batch, used to refresh the running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`M - 1` denominator) variance.
    pub var: Vec<f64>,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            gamma: affine.then(|| Tensor::ones(&[channels])),
            beta: affine.then(|| Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    pub fn is_affine(&self) -> bool {
        self.gamma.is_some()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::of(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::of(m * r.as_f64() + (1.0 - m) * b);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::contract(format!(
                "batch norm eps must be > 0, got {}",
                self.eps
            )));
        }
        if self.running_var.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::contract("batch norm running variance must be >= 0"));
        }
        Ok(())
    }
}

struct BatchNormNode<T> {
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    mode: BnMode,
    /// Per-channel normalization applied: mean and 1/sqrt(var + eps).
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Element> BatchNormNode<T> {
    fn gamma_of(&self, ctx: &Ctx<'_, T>, c: usize) -> T {
        self.gamma.map_or(T::one(), |g| ctx.value(g).data()[c])
    }
}

impl<T: Element> Function<T> for BatchNormNode<T> {
    fn name(&self) -> &'static str {
        match self.mode {
            BnMode::Train => "batch_norm_train",
            BnMode::Inference => "batch_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x];
        v.extend(self.gamma);
        v.extend(self.beta);
        v
    }

    fn backward(
        &self,
        ctx: &Ctx<'_, T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<InputGrads<T>> {
        let x = ctx.value(self.x);
        let (n, ch, h, w) = x.dims4()?;
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        for c in 0..ch {
            let (mu, inv) = (self.mean[c], self.inv_std[c]);
            let g = self.gamma_of(ctx, c);
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for b in 0..n {
                let off = (b * ch + c) * hw;
                for i in off..off + hw {
                    let xhat = (x.data()[i] - mu) * inv;
                    sum_dy += grad.data()[i];
                    sum_dy_xhat += grad.data()[i] * xhat;
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            for b in 0..n {
                let off = (b * ch + c) * hw;
                for i in off..off + hw {
                    dx.data_mut()[i] = match self.mode {
                        BnMode::Inference => grad.data()[i] * g * inv,
                        BnMode::Train => {
                            let xhat = (x.data()[i] - mu) * inv;
                            g * inv * (grad.data()[i] - sum_dy / count - xhat * sum_dy_xhat / count)
                        }
                    };
                }
            }
        }
        let mut out: InputGrads<T> = vec![wanted[0].then_some(dx)];
        if self.gamma.is_some() {
            out.push(Some(Tensor::from_vec(&[ch], dgamma)?));
        }
        if self.beta.is_some() {
            out.push(Some(Tensor::from_vec(&[ch], dbeta)?));
        }
        Ok(out)
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        if self.mode == BnMode::Train {
            return Err(Error::UnsupportedBound("batch_norm_train"));
        }
        let (n, ch, h, w) = ctx.value(self.x).dims4()?;
        let hw = h * w;
        let mut dx = bound.clone();
        for b in 0..n {
            for c in 0..ch {
                let k = (self.gamma_of(ctx, c) * self.inv_std[c]).abs();
                let off = (b * ch + c) * hw;
                dx.data_mut()[off..off + hw]
                    .iter_mut()
                    .for_each(|v| *v *= k);
            }
        }
        let mut out: InputGrads<T> = vec![Some(dx)];
        out.extend(self.gamma.map(|_| None));
        out.extend(self.beta.map(|_| None));
        Ok(out)
    }
}

/// Normalize `x` per channel. `gamma`/`beta` must be given iff `params` is
/// affine and are the tape copies of `params.gamma`/`params.beta`.
///
/// Train mode normalizes with batch statistics (population variance) and
/// returns them for [`BatchNormParams::update_running`]; inference mode uses
/// the running estimates and is affine in `x`.
pub fn batch_norm<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    params: &BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Var, Option<BatchStats>)> {
    params.validate()?;
    let xv = tape.value(x);
    let (n, ch, h, w) = xv.dims4()?;
    if ch != params.channels() {
        return Err(Error::Shape {
            op: "batch_norm",
            expected: vec![n, params.channels(), h, w],
            actual: xv.shape().to_vec(),
        });
    }
    if gamma.is_some() != params.is_affine() || beta.is_some() != params.is_affine() {
        return Err(Error::contract(
            "batch_norm affine vars do not match the layer",
        ));
    }
    let hw = h * w;
    let count = n * hw;
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if n < 2 {
                return Err(Error::contract(format!(
                    "batch_norm in train mode needs a batch of at least 2, got {n}"
                )));
            }
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for c in 0..ch {
                let vals =
                    (0..n).flat_map(|b| xv.data()[(b * ch + c) * hw..(b * ch + c + 1) * hw].iter());
                let m = vals.clone().map(|v| v.as_f64()).sum::<f64>() / count as f64;
                let ss = vals.map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                mean[c] = m;
                var[c] = ss / count as f64;
            }
            let unbiased = var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        BnMode::Inference => (
            params
                .running_mean
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
            params
                .running_var
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
            None,
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::of(1.0 / (v + params.eps).sqrt()))
        .collect();
    let mean: Vec<T> = mean.into_iter().map(T::of).collect();
    let g = |c| gamma.map_or(T::one(), |g| tape.value(g).data()[c]);
    let bt = |c| beta.map_or(T::zero(), |b| tape.value(b).data()[c]);
    let mut y = vec![T::zero(); xv.numel()];
    for b in 0..n {
        for c in 0..ch {
            let (gc, bc) = (g(c), bt(c));
            let off = (b * ch + c) * hw;
            for i in off..off + hw {
                y[i] = gc * (xv.data()[i] - mean[c]) * inv_std[c] + bc;
            }
        }
    }
    let value = Tensor::from_vec(xv.shape(), y)?;
    let node = BatchNormNode {
        x,
        gamma,
        beta,
        mode,
        mean,
        inv_std,
    };
    Ok((tape.push(value, Box::new(node)), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, weighted_sum};
    use crate::rng::{random_normal, Rng};

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = random_normal::<f64>(&mut Rng::new(1, 0), &[4, 3, 5, 5], 2.0, 3.0).unwrap();
        let params = BatchNormParams::<f64>::new(3, true);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(params.gamma.clone().unwrap());
        let b = tape.constant(params.beta.clone().unwrap());
        let (y, stats) =
            batch_norm(&mut tape, xv, Some(g), Some(b), &params, BnMode::Train).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn inference_mode_applies_running_affine() {
        let mut params = BatchNormParams::<f64>::new(2, true);
        params.running_mean = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        params.running_var = Tensor::from_vec(&[2], vec![4.0, 0.25]).unwrap();
        params.gamma = Some(Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap());
        params.beta = Some(Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
        let x = random_normal::<f64>(&mut Rng::new(2, 0), &[1, 2, 3, 3], 0.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(params.gamma.clone().unwrap());
        let b = tape.constant(params.beta.clone().unwrap());
        let (y, stats) =
            batch_norm(&mut tape, xv, Some(g), Some(b), &params, BnMode::Inference).unwrap();
        assert!(stats.is_none());
        for (i, (&yi, &xi)) in tape.value(y).data().iter().zip(x.data()).enumerate() {
            let c = i / 9;
            let (m, v) = (params.running_mean.data()[c], params.running_var.data()[c]);
            let (gm, bt) = (
                params.gamma.as_ref().unwrap().data()[c],
                params.beta.as_ref().unwrap().data()[c],
            );
            let want = gm * (xi - m) / (v + 1e-5).sqrt() + bt;
            assert!((yi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let params = BatchNormParams::<f64>::new(1, false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(batch_norm(&mut tape, x, None, None, &params, BnMode::Train).is_err());
        assert!(batch_norm(&mut tape, x, None, None, &params, BnMode::Inference).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut params = BatchNormParams::<f64>::new(1, false);
        params.update_running(&BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        });
        assert!((params.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((params.running_var.data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        let mut rng = Rng::new(3, 0);
        let x = random_normal::<f64>(&mut rng, &[3, 2, 3, 3], 0.5, 2.0).unwrap();
        let gamma = random_normal::<f64>(&mut rng, &[2], 1.0, 0.5).unwrap();
        let beta = random_normal::<f64>(&mut rng, &[2], 0.0, 0.5).unwrap();
        let r = random_normal::<f64>(&mut rng, &[3, 2, 3, 3], 0.0, 1.0).unwrap();
        let params = BatchNormParams::<f64>::new(2, true);
        let run = |t: &mut Tape<f64>, x: Var, g: Var, b: Var| {
            let (y, _) = batch_norm(t, x, Some(g), Some(b), &params, BnMode::Train)?;
            weighted_sum(t, y, r.clone())
        };
        let gx = finite_diff_check(
            |t, x| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                run(t, x, g, b)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let gg = finite_diff_check(
            |t, g| {
                let (x, b) = (t.constant(x.clone()), t.constant(beta.clone()));
                run(t, x, g, b)
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        let gb = finite_diff_check(
            |t, b| {
                let (x, g) = (t.constant(x.clone()), t.constant(gamma.clone()));
                run(t, x, g, b)
            },
            &beta,
            1e-5,
        )
        .unwrap();
        for g in [gx, gg, gb] {
            assert!(g.max_rel_error < 1e-4, "{}", g.max_rel_error);
        }
    }
}

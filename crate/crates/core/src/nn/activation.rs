use crate::autodiff::{Ctx, Function, InputGrads, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Relu(Var);

impl<T: Element> Function<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let dx = ctx
            .value(self.0)
            .zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })?;
        Ok(vec![Some(dx)])
    }

    fn bound_backward(
        &self,
        _: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        Ok(vec![Some(bound.clone())])
    }
}

pub fn relu<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = tape.value(x).map(|v| v.max(T::zero()));
    Ok(tape.push(value, Box::new(Relu(x))))
}

struct Softmax2(Var);

impl<T: Element> Function<T> for Softmax2 {
    fn name(&self) -> &'static str {
        "softmax2"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let p = ctx.output();
        let (n, _, h, w) = p.dims4()?;
        let hw = h * w;
        let mut dz = Tensor::zeros(p.shape());
        for b in 0..n {
            let base = b * 2 * hw;
            for i in 0..hw {
                let (i0, i1) = (base + i, base + hw + i);
                let (p0, p1) = (p.data()[i0], p.data()[i1]);
                let (g0, g1) = (grad.data()[i0], grad.data()[i1]);
                let dot = g0 * p0 + g1 * p1;
                dz.data_mut()[i0] = p0 * (g0 - dot);
                dz.data_mut()[i1] = p1 * (g1 - dot);
            }
        }
        Ok(vec![Some(dz)])
    }

    fn bound_backward(
        &self,
        _: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        // every Jacobian entry bounded by 1: each logit collects both outputs
        let (n, _, h, w) = bound.dims4()?;
        let hw = h * w;
        let mut dz = bound.clone();
        for b in 0..n {
            let base = b * 2 * hw;
            for i in 0..hw {
                let s = bound.data()[base + i] + bound.data()[base + hw + i];
                dz.data_mut()[base + i] = s;
                dz.data_mut()[base + hw + i] = s;
            }
        }
        Ok(vec![Some(dz)])
    }
}

/// Two-class softmax over the channel axis of an `N x 2 x H x W` tensor.
pub fn softmax2<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4()?;
    if c != 2 {
        return Err(Error::Shape {
            op: "softmax2",
            expected: vec![n, 2, h, w],
            actual: xv.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut p = vec![T::zero(); xv.numel()];
    for b in 0..n {
        let base = b * 2 * hw;
        for i in 0..hw {
            let (z0, z1) = (xv.data()[base + i], xv.data()[base + hw + i]);
            let m = z0.max(z1);
            let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
            let s = e0 + e1;
            p[base + i] = e0 / s;
            p[base + hw + i] = e1 / s;
        }
    }
    let value = Tensor::from_vec(xv.shape(), p)?;
    Ok(tape.push(value, Box::new(Softmax2(x))))
}

struct PointDistance<T> {
    x: Var,
    centers: Vec<T>,
}

impl<T: Element> Function<T> for PointDistance<T> {
    fn name(&self) -> &'static str {
        "point_distance"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let x = ctx.value(self.x);
        let d = ctx.output();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let center = self.centers[b * c + ch];
                for i in 0..hw {
                    let dist = d.data()[b * hw + i];
                    if dist > T::zero() {
                        let idx = (b * c + ch) * hw + i;
                        dx.data_mut()[idx] =
                            grad.data()[b * hw + i] * (x.data()[idx] - center) / dist;
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        // |d||f - c|| / df_k| <= 1 for every coordinate
        let (n, c, h, w) = ctx.value(self.x).dims4()?;
        let hw = h * w;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                dx.data_mut()[off..off + hw].copy_from_slice(&bound.data()[b * hw..(b + 1) * hw]);
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Per-pixel Euclidean distance `||x[b, :, i] - centers[b]||` for an
/// `N x C x H x W` input and one constant `C`-vector per batch item.
pub fn point_distance<T: Element>(tape: &mut Tape<T>, x: Var, centers: &[Vec<T>]) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4()?;
    if centers.len() != n || centers.iter().any(|v| v.len() != c) {
        return Err(Error::contract(format!(
            "point_distance needs {n} centers of dimension {c}"
        )));
    }
    let hw = h * w;
    let mut d = vec![T::zero(); n * hw];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let center = centers[b][ch];
            for i in 0..hw {
                let diff = xv.data()[off + i] - center;
                d[b * hw + i] += diff * diff;
            }
        }
    }
    d.iter_mut().for_each(|v| *v = v.sqrt());
    let value = Tensor::from_vec(&[n, 1, h, w], d)?;
    let centers = centers.iter().flatten().copied().collect();
    Ok(tape.push(value, Box::new(PointDistance { x, centers })))
}

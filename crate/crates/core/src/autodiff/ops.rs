use super::{Ctx, Function, InputGrads, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Add(Var, Var, Sign);

#[derive(Clone, Copy)]
enum Sign {
    Add,
    Sub,
}

impl<T: Element> Function<T> for Add {
    fn name(&self) -> &'static str {
        match self.2 {
            Sign::Add => "add",
            Sign::Sub => "sub",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0, self.1]
    }

    fn backward(&self, _: &Ctx<'_, T>, grad: &Tensor<T>, wanted: &[bool]) -> Result<InputGrads<T>> {
        let rhs = match self.2 {
            Sign::Add => grad.clone(),
            Sign::Sub => grad.scale(-T::one()),
        };
        Ok(vec![
            wanted[0].then(|| grad.clone()),
            wanted[1].then_some(rhs),
        ])
    }

    fn bound_backward(
        &self,
        _: &Ctx<'_, T>,
        bound: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<InputGrads<T>> {
        Ok(vec![
            wanted[0].then(|| bound.clone()),
            wanted[1].then(|| bound.clone()),
        ])
    }
}

pub fn add<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let value = tape.value(a).zip_map(tape.value(b), |x, y| x + y)?;
    Ok(tape.push(value, Box::new(Add(a, b, Sign::Add))))
}

pub fn sub<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let value = tape.value(a).zip_map(tape.value(b), |x, y| x - y)?;
    Ok(tape.push(value, Box::new(Add(a, b, Sign::Sub))))
}

struct Mul(Var, Var);

impl<T: Element> Function<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0, self.1]
    }

    fn backward(
        &self,
        ctx: &Ctx<'_, T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<InputGrads<T>> {
        let da = if wanted[0] {
            Some(grad.zip_map(ctx.value(self.1), |g, b| g * b)?)
        } else {
            None
        };
        let db = if wanted[1] {
            Some(grad.zip_map(ctx.value(self.0), |g, a| g * a)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

/// Element-wise product. Bilinear, so it has no constant Jacobian bound.
pub fn mul<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let value = tape.value(a).zip_map(tape.value(b), |x, y| x * y)?;
    Ok(tape.push(value, Box::new(Mul(a, b))))
}

struct Scale<T>(Var, T);

impl<T: Element> Function<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, _: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        Ok(vec![Some(grad.scale(self.1))])
    }

    fn bound_backward(
        &self,
        _: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        Ok(vec![Some(bound.scale(self.1.abs()))])
    }
}

pub fn scale<T: Element>(tape: &mut Tape<T>, x: Var, s: f64) -> Result<Var> {
    let s = T::of(s);
    let value = tape.value(x).scale(s);
    Ok(tape.push(value, Box::new(Scale(x, s))))
}

struct Sum(Var);

impl<T: Element> Function<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        Ok(vec![Some(Tensor::full(
            ctx.value(self.0).shape(),
            grad.item(),
        ))])
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        w: &[bool],
    ) -> Result<InputGrads<T>> {
        self.backward(ctx, bound, w)
    }
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = Tensor::scalar(tape.value(x).sum());
    Ok(tape.push(value, Box::new(Sum(x))))
}

struct WeightedSum<T>(Var, Tensor<T>);

impl<T: Element> Function<T> for WeightedSum<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, _: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        Ok(vec![Some(self.1.scale(grad.item()))])
    }

    fn bound_backward(
        &self,
        _: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        Ok(vec![Some(self.1.map(|w| w.abs() * bound.item()))])
    }
}

/// `sum(x * weights)` with constant weights: projects any tensor to a scalar.
pub fn weighted_sum<T: Element>(tape: &mut Tape<T>, x: Var, weights: Tensor<T>) -> Result<Var> {
    let value = Tensor::scalar(tape.value(x).dot(&weights)?);
    Ok(tape.push(value, Box::new(WeightedSum(x, weights))))
}

struct Linear {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl<T: Element> Function<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(
        &self,
        ctx: &Ctx<'_, T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<InputGrads<T>> {
        let x = ctx.value(self.x);
        let w = ctx.value(self.w);
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let batch = grad.shape()[0];
        let mut out = vec![None, None];
        if wanted[0] {
            // dx[b, :] = dy[b, :] W
            let mut dx = vec![T::zero(); batch * n];
            T::gemm(
                batch,
                m,
                n,
                T::one(),
                grad.data(),
                m as isize,
                1,
                w.data(),
                n as isize,
                1,
                T::zero(),
                &mut dx,
            );
            out[0] = Some(Tensor::from_vec(x.shape(), dx)?);
        }
        if wanted[1] {
            // dW = dy^T x
            let mut dw = vec![T::zero(); m * n];
            T::gemm(
                m,
                batch,
                n,
                T::one(),
                grad.data(),
                1,
                m as isize,
                x.data(),
                n as isize,
                1,
                T::zero(),
                &mut dw,
            );
            out[1] = Some(Tensor::from_vec(&[m, n], dw)?);
        }
        if self.b.is_some() {
            out.push(wanted[2].then(|| {
                let mut db = vec![T::zero(); m];
                for row in grad.data().chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
                Tensor::from_vec(&[m], db).unwrap()
            }));
        }
        Ok(out)
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<InputGrads<T>> {
        let x = ctx.value(self.x);
        let w = ctx.value(self.w).map(|v| v.abs());
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let batch = bound.shape()[0];
        let mut out: InputGrads<T> = vec![None; 2 + self.b.is_some() as usize];
        if wanted[0] {
            let mut dx = vec![T::zero(); batch * n];
            T::gemm(
                batch,
                m,
                n,
                T::one(),
                bound.data(),
                m as isize,
                1,
                w.data(),
                n as isize,
                1,
                T::zero(),
                &mut dx,
            );
            out[0] = Some(Tensor::from_vec(x.shape(), dx)?);
        }
        Ok(out)
    }
}

/// Fully connected layer: each batch item of `x` is flattened to `n`
/// features, `w` is `m x n`, result is `batch x m`.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let [m, n] = wv.shape()[..] else {
        return Err(Error::contract("linear weight must be rank 2"));
    };
    let batch = xv.shape().first().copied().unwrap_or(1);
    if xv.numel() != batch * n {
        return Err(Error::Shape {
            op: "linear",
            expected: vec![batch, n],
            actual: xv.shape().to_vec(),
        });
    }
    let mut y = vec![T::zero(); batch * m];
    T::gemm(
        batch,
        n,
        m,
        T::one(),
        xv.data(),
        n as isize,
        1,
        wv.data(),
        1,
        n as isize,
        T::zero(),
        &mut y,
    );
    if let Some(b) = b {
        let bv = tape.value(b);
        bv.expect_shape(&[m], "linear bias")?;
        for row in y.chunks_mut(m) {
            row.iter_mut().zip(bv.data()).for_each(|(y, &b)| *y += b);
        }
    }
    let value = Tensor::from_vec(&[batch, m], y)?;
    Ok(tape.push(value, Box::new(Linear { x, w, b })))
}

struct SelectChannel(Var, usize);

impl<T: Element> Function<T> for SelectChannel {
    fn name(&self) -> &'static str {
        "select_channel"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let (n, c, h, w) = ctx.value(self.0).dims4()?;
        let hw = h * w;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            let dst = (b * c + self.1) * hw;
            dx.data_mut()[dst..dst + hw].copy_from_slice(&grad.data()[b * hw..(b + 1) * hw]);
        }
        Ok(vec![Some(dx)])
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        w: &[bool],
    ) -> Result<InputGrads<T>> {
        self.backward(ctx, bound, w)
    }
}

/// Channel `channel` of an `N x C x H x W` tensor, kept as `N x 1 x H x W`.
pub fn select_channel<T: Element>(tape: &mut Tape<T>, x: Var, channel: usize) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4()?;
    if channel >= c {
        return Err(Error::contract(format!(
            "channel {channel} out of range for {c} channels"
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let src = (b * c + channel) * hw;
        out.extend_from_slice(&xv.data()[src..src + hw]);
    }
    let value = Tensor::from_vec(&[n, 1, h, w], out)?;
    Ok(tape.push(value, Box::new(SelectChannel(x, channel))))
}

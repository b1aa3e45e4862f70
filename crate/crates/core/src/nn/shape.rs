use crate::autodiff::{Ctx, Function, InputGrads, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Upsample(Var, usize);

impl Upsample {
    fn reduce<T: Element>(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = ctx.value(self.0);
        let (n, c, h, w) = x.dims4()?;
        let f = self.1;
        let ow = w * f;
        let mut dx = Tensor::zeros(x.shape());
        for plane in 0..n * c {
            let src = &grad.data()[plane * h * f * ow..(plane + 1) * h * f * ow];
            let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..h * f {
                for ox in 0..ow {
                    dst[(oy / f) * w + ox / f] += src[oy * ow + ox];
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Element> Function<T> for Upsample {
    fn name(&self) -> &'static str {
        "replicate_upsample"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        Ok(vec![Some(self.reduce(ctx, grad)?)])
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        Ok(vec![Some(self.reduce(ctx, bound)?)])
    }
}

/// Nearest-neighbour block replication: input pixel `(y, x)` fills the
/// output block `[n*y, n*y + n) x [n*x, n*x + n)`.
pub fn replicate_upsample<T: Element>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::contract("upsampling factor must be >= 1"));
    }
    let xv = tape.value(x);
    let (b, c, h, w) = xv.dims4()?;
    let (oh, ow) = (h * n, w * n);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for plane in 0..b * c {
        let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / n) * w..(oy / n + 1) * w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = row[ox / n];
            }
        }
    }
    let value = Tensor::from_vec(&[b, c, oh, ow], out)?;
    Ok(tape.push(value, Box::new(Upsample(x, n))))
}

struct Concat {
    parts: Vec<Var>,
    channels: Vec<usize>,
}

impl Concat {
    fn split<T: Element>(&self, grad: &Tensor<T>) -> Result<InputGrads<T>> {
        let (n, total, h, w) = grad.dims4()?;
        let hw = h * w;
        let mut out = Vec::with_capacity(self.parts.len());
        let mut start = 0;
        for &c in &self.channels {
            let mut part = Vec::with_capacity(n * c * hw);
            for b in 0..n {
                let off = (b * total + start) * hw;
                part.extend_from_slice(&grad.data()[off..off + c * hw]);
            }
            out.push(Some(Tensor::from_vec(&[n, c, h, w], part)?));
            start += c;
        }
        Ok(out)
    }
}

impl<T: Element> Function<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        self.parts.clone()
    }

    fn backward(&self, _: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        self.split(grad)
    }

    fn bound_backward(
        &self,
        _: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        self.split(bound)
    }
}

/// Concatenate `N x C_i x H x W` tensors along the channel axis, in order.
pub fn concat_channels<T: Element>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let Some(&first) = parts.first() else {
        return Err(Error::contract("concat_channels needs at least one input"));
    };
    let (n, _, h, w) = tape.value(first).dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for &p in parts {
        let (pn, pc, ph, pw) = tape.value(p).dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape {
                op: "concat_channels",
                expected: vec![n, pc, h, w],
                actual: vec![pn, pc, ph, pw],
            });
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (&p, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&tape.value(p).data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    let value = Tensor::from_vec(&[n, total, h, w], out)?;
    Ok(tape.push(
        value,
        Box::new(Concat {
            parts: parts.to_vec(),
            channels,
        }),
    ))
}

struct MaxPool2 {
    x: Var,
    argmax: Vec<usize>,
}

impl<T: Element> Function<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>, _: &[bool]) -> Result<InputGrads<T>> {
        let mut dx = Tensor::zeros(ctx.value(self.x).shape());
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx.data_mut()[src] += g;
        }
        Ok(vec![Some(dx)])
    }

    fn bound_backward(
        &self,
        ctx: &Ctx<'_, T>,
        bound: &Tensor<T>,
        _: &[bool],
    ) -> Result<InputGrads<T>> {
        // any element of the window may become the max
        let x = ctx.value(self.x);
        let (_, _, _, w) = x.dims4()?;
        let mut dx = Tensor::zeros(x.shape());
        for (&src, &b) in self.argmax.iter().zip(bound.data()) {
            let corner = src - (src % w) % 2 - ((src / w) % 2) * w;
            for off in [0, 1, w, w + 1] {
                dx.data_mut()[corner + off] += b;
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// 2x2 max pooling with stride 2 (only used as a bound-analysis fixture).
pub fn max_pool2<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "max_pool2 needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let corner = base + 2 * oy * w + 2 * ox;
                let best = [corner, corner + 1, corner + w, corner + w + 1]
                    .into_iter()
                    .fold(
                        corner,
                        |a, i| if xv.data()[i] > xv.data()[a] { i } else { a },
                    );
                out.push(xv.data()[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    Ok(tape.push(value, Box::new(MaxPool2 { x, argmax })))
}

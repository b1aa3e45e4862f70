//! Strided 2-D convolution and its adjoint (transposed convolution).
//!
//! Both are lowered to im2col + GEMM. A convolution with geometry `g` maps
//! `ci x H x W` to `co x Ho x Wo`; the transposed convolution with the same
//! kernel is exactly the backward-data map of that convolution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Function, InputGrads, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Convolution weights plus the stride/padding they are applied with.
///
/// `weight` is `out x in x k x k` for [`conv2d`]. For [`deconv2d`] the same
/// tensor layout is read as the kernel of the convolution it is the adjoint
/// of, i.e. `in x out x k x k` from the transposed layer's point of view.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Shape bookkeeping for one convolution direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Geometry {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub ho: usize,
    pub wo: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn new(
        ci: usize,
        h: usize,
        w: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::contract(format!(
                "stride must be 1 or 2, got {stride}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::contract(format!(
                "{h}x{w} input too small for a {k}x{k} kernel"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let (eh, ew) = if stride == 1 { (h, w) } else { (h / 2, w / 2) };
        if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) || ho != eh || wo != ew {
            return Err(Error::contract(format!(
                "{h}x{w} input with kernel {k}, stride {stride}, padding {pad} does not give a {eh}x{ew} output"
            )));
        }
        Ok(Self {
            ci,
            h,
            w,
            co,
            ho,
            wo,
            k,
            stride,
            pad,
        })
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn identity_cols(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Small output planes are processed as one GEMM over the whole batch
    /// (columns `b * out_len + j`); large ones image by image in parallel.
    fn batched(&self) -> bool {
        self.out_len() <= 64
    }

    /// Write the patch matrix of one image into `cols` (row stride `ld`,
    /// starting at column `off`).
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T], ld: usize, off: usize) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for ci in 0..self.ci {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * ld + off..][..self.out_len()];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the patch matrix back onto one image (overwrites `x`).
    fn col2im<T: Element>(&self, cols: &[T], ld: usize, off: usize, x: &mut [T]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        x.fill(T::zero());
        for ci in 0..self.ci {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * ld + off..][..self.out_len()];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in row[oy * self.wo..(oy + 1) * self.wo].iter().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn batch_cols<T: Element>(&self, x: &[T], n: usize) -> Vec<T> {
        let ld = n * self.out_len();
        let mut cols = vec![T::zero(); self.col_rows() * ld];
        for b in 0..n {
            self.im2col(
                &x[b * self.in_len()..(b + 1) * self.in_len()],
                &mut cols,
                ld,
                b * self.out_len(),
            );
        }
        cols
    }

    /// `[N][co][ow]` <-> `[co][N * ow]`.
    fn channel_major<T: Element>(&self, y: &[T], n: usize) -> Vec<T> {
        let ow = self.out_len();
        let mut out = vec![T::zero(); y.len()];
        for b in 0..n {
            for c in 0..self.co {
                out[c * n * ow + b * ow..][..ow]
                    .copy_from_slice(&y[(b * self.co + c) * ow..][..ow]);
            }
        }
        out
    }

    fn unpack_channel_major<T: Element>(&self, m: &[T], n: usize, y: &mut [T]) {
        let ow = self.out_len();
        for b in 0..n {
            for c in 0..self.co {
                y[(b * self.co + c) * ow..][..ow].copy_from_slice(&m[c * n * ow + b * ow..][..ow]);
            }
        }
    }

    /// `y = W * im2col(x)` for `n` images; `w` is `co x (ci k k)`.
    pub fn forward<T: Element>(&self, w: &[T], x: &[T], y: &mut [T], n: usize) {
        let (rows, ow) = (self.col_rows(), self.out_len());
        if self.batched() {
            let cols = self.batch_cols(x, n);
            let mut m = vec![T::zero(); self.co * n * ow];
            T::gemm(
                self.co,
                rows,
                n * ow,
                T::one(),
                w,
                rows as isize,
                1,
                &cols,
                (n * ow) as isize,
                1,
                T::zero(),
                &mut m,
            );
            self.unpack_channel_major(&m, n, y);
            return;
        }
        exec::for_each_chunk_mut(y, self.co * ow, |b, y| {
            let x = &x[b * self.in_len()..(b + 1) * self.in_len()];
            if self.identity_cols() {
                T::gemm(
                    self.co,
                    rows,
                    ow,
                    T::one(),
                    w,
                    rows as isize,
                    1,
                    x,
                    ow as isize,
                    1,
                    T::zero(),
                    y,
                );
            } else {
                let mut cols = vec![T::zero(); rows * ow];
                self.im2col(x, &mut cols, ow, 0);
                T::gemm(
                    self.co,
                    rows,
                    ow,
                    T::one(),
                    w,
                    rows as isize,
                    1,
                    &cols,
                    ow as isize,
                    1,
                    T::zero(),
                    y,
                );
            }
        });
    }

    /// `dx = col2im(W^T dy)` for `n` images.
    pub fn backward_data<T: Element>(&self, w: &[T], dy: &[T], dx: &mut [T], n: usize) {
        let (rows, ow) = (self.col_rows(), self.out_len());
        if self.batched() {
            let m = self.channel_major(dy, n);
            let ld = n * ow;
            let mut cols = vec![T::zero(); rows * ld];
            T::gemm(
                rows,
                self.co,
                ld,
                T::one(),
                w,
                1,
                rows as isize,
                &m,
                ld as isize,
                1,
                T::zero(),
                &mut cols,
            );
            for b in 0..n {
                self.col2im(
                    &cols,
                    ld,
                    b * ow,
                    &mut dx[b * self.in_len()..(b + 1) * self.in_len()],
                );
            }
            return;
        }
        exec::for_each_chunk_mut(dx, self.in_len(), |b, dx| {
            let dy = &dy[b * self.co * ow..(b + 1) * self.co * ow];
            if self.identity_cols() {
                T::gemm(
                    rows,
                    self.co,
                    ow,
                    T::one(),
                    w,
                    1,
                    rows as isize,
                    dy,
                    ow as isize,
                    1,
                    T::zero(),
                    dx,
                );
            } else {
                let mut cols = vec![T::zero(); rows * ow];
                T::gemm(
                    rows,
                    self.co,
                    ow,
                    T::one(),
                    w,
                    1,
                    rows as isize,
                    dy,
                    ow as isize,
                    1,
                    T::zero(),
                    &mut cols,
                );
                self.col2im(&cols, ow, 0, dx);
            }
        });
    }

    /// `dW = sum_b dy_b * im2col(x_b)^T`, summed over images in index order.
    pub fn backward_weight<T: Element>(&self, dy: &[T], x: &[T], n: usize) -> Vec<T> {
        let (rows, ow) = (self.col_rows(), self.out_len());
        let len = self.co * rows;
        if self.batched() {
            let m = self.channel_major(dy, n);
            let cols = self.batch_cols(x, n);
            let ld = n * ow;
            let mut dw = vec![T::zero(); len];
            T::gemm(
                self.co,
                ld,
                rows,
                T::one(),
                &m,
                ld as isize,
                1,
                &cols,
                1,
                ld as isize,
                T::zero(),
                &mut dw,
            );
            return dw;
        }
        let parts = exec::map_indexed(n, |b| {
            let dy = &dy[b * self.co * ow..(b + 1) * self.co * ow];
            let x = &x[b * self.in_len()..(b + 1) * self.in_len()];
            let mut dw = vec![T::zero(); len];
            if self.identity_cols() {
                T::gemm(
                    self.co,
                    ow,
                    rows,
                    T::one(),
                    dy,
                    ow as isize,
                    1,
                    x,
                    1,
                    ow as isize,
                    T::zero(),
                    &mut dw,
                );
            } else {
                let mut cols = vec![T::zero(); rows * ow];
                self.im2col(x, &mut cols, ow, 0);
                T::gemm(
                    self.co,
                    ow,
                    rows,
                    T::one(),
                    dy,
                    ow as isize,
                    1,
                    &cols,
                    1,
                    ow as isize,
                    T::zero(),
                    &mut dw,
                );
            }
            dw
        });
        sum_in_order(parts, len)
    }
}

fn add_bias<T: Element>(y: &mut [T], bias: &[T], plane: usize) {
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Element>(dy: &Tensor<T>, channels: usize) -> Tensor<T> {
    let plane = dy.numel() / (dy.shape()[0] * channels);
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in dy.data().chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[channels], db).unwrap()
}

fn sum_in_order<T: Element>(parts: impl IntoIterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(&p).for_each(|(a, &v)| *a += v);
    }
    acc
}

#[derive(Clone, Copy)]
enum Direction {
    Conv,
    Deconv,
}

struct ConvNode {
    x: Var,
    w: Var,
    b: Option<Var>,
    geo: Geometry,
    dir: Direction,
}

impl ConvNode {
    /// (input channels, input plane, output channels, output plane) as seen by the layer.
    fn io(&self) -> (usize, usize, usize, usize) {
        let g = &self.geo;
        match self.dir {
            Direction::Conv => (g.ci, g.h * g.w, g.co, g.ho * g.wo),
            Direction::Deconv => (g.co, g.ho * g.wo, g.ci, g.h * g.w),
        }
    }

    fn data_grad<T: Element>(&self, w: &[T], dy: &Tensor<T>, n: usize) -> Vec<T> {
        let (cin, pin, _, _) = self.io();
        let mut dx = vec![T::zero(); n * cin * pin];
        match self.dir {
            Direction::Conv => self.geo.backward_data(w, dy.data(), &mut dx, n),
            Direction::Deconv => self.geo.forward(w, dy.data(), &mut dx, n),
        }
        dx
    }
}

impl<T: Element> Function<T> for ConvNode {
    fn name(&self) -> &'static str {
        match self.dir {
            Direction::Conv => "conv2d",
            Direction::Deconv => "deconv2d",
        }
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
        let n = x.shape()[0];
        let (_, _, cout, _) = self.io();
        let mut out: InputGrads<T> = vec![None; 2 + self.b.is_some() as usize];
        if wanted[0] {
            out[0] = Some(Tensor::from_vec(
                x.shape(),
                self.data_grad(w.data(), grad, n),
            )?);
        }
        if wanted[1] {
            let dw = match self.dir {
                Direction::Conv => self.geo.backward_weight(grad.data(), x.data(), n),
                Direction::Deconv => self.geo.backward_weight(x.data(), grad.data(), n),
            };
            out[1] = Some(Tensor::from_vec(w.shape(), dw)?);
        }
        if self.b.is_some() && wanted[2] {
            out[2] = Some(bias_grad(grad, cout));
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
        let w_abs = ctx.value(self.w).map(|v| v.abs());
        let mut out: InputGrads<T> = vec![None; 2 + self.b.is_some() as usize];
        if wanted[0] {
            out[0] = Some(Tensor::from_vec(
                x.shape(),
                self.data_grad(w_abs.data(), bound, x.shape()[0]),
            )?);
        }
        Ok(out)
    }
}

fn check_bias<T: Element>(tape: &Tape<T>, b: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        tape.value(b).expect_shape(&[channels], "conv bias")?;
    }
    Ok(())
}

/// Cross-correlation of `x` (`N x Cin x H x W`) with `w` (`Cout x Cin x k x k`).
/// Stride 1 preserves the spatial size, stride 2 halves it exactly.
pub fn conv2d<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let (n, c, h, wd) = xv.dims4()?;
    let [co, wc, k, k2] = wv.shape()[..] else {
        return Err(Error::contract("conv weight must be rank 4"));
    };
    if wc != c || k != k2 {
        return Err(Error::Shape {
            op: "conv2d",
            expected: vec![co, c, k, k],
            actual: wv.shape().to_vec(),
        });
    }
    check_bias(tape, b, co)?;
    let geo = Geometry::new(c, h, wd, co, k, stride, padding)?;
    let out_len = co * geo.out_len();
    let mut y = vec![T::zero(); n * out_len];
    geo.forward(wv.data(), xv.data(), &mut y, n);
    if let Some(b) = b {
        add_bias(&mut y, tape.value(b).data(), geo.out_len());
    }
    let value = Tensor::from_vec(&[n, co, geo.ho, geo.wo], y)?;
    Ok(tape.push(
        value,
        Box::new(ConvNode {
            x,
            w,
            b,
            geo,
            dir: Direction::Conv,
        }),
    ))
}

/// Stride-2 transposed convolution: `x` is `N x A x h x w`, `w` is
/// `A x B x k x k`, result is `N x B x 2h x 2w`.
pub fn deconv2d<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    if stride != 2 {
        return Err(Error::contract(format!(
            "deconv2d upsamples with stride 2, got {stride}"
        )));
    }
    let xv = tape.value(x);
    let wv = tape.value(w);
    let (n, a, h, wd) = xv.dims4()?;
    let [wa, bch, k, k2] = wv.shape()[..] else {
        return Err(Error::contract("deconv weight must be rank 4"));
    };
    if wa != a || k != k2 {
        return Err(Error::Shape {
            op: "deconv2d",
            expected: vec![a, bch, k, k],
            actual: wv.shape().to_vec(),
        });
    }
    check_bias(tape, b, bch)?;
    // geometry of the forward convolution this layer is the adjoint of
    let geo = Geometry::new(bch, 2 * h, 2 * wd, a, k, stride, padding)?;
    debug_assert_eq!((geo.ho, geo.wo), (h, wd));
    let out_len = bch * geo.h * geo.w;
    let mut y = vec![T::zero(); n * out_len];
    geo.backward_data(wv.data(), xv.data(), &mut y, n);
    if let Some(b) = b {
        add_bias(&mut y, tape.value(b).data(), geo.h * geo.w);
    }
    let value = Tensor::from_vec(&[n, bch, 2 * h, 2 * wd], y)?;
    Ok(tape.push(
        value,
        Box::new(ConvNode {
            x,
            w,
            b,
            geo,
            dir: Direction::Deconv,
        }),
    ))
}

/// Record a convolution layer whose parameters are already on the tape.
pub fn conv_layer<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    params: &ConvParams<T>,
) -> Result<Var> {
    conv2d(tape, x, w, Some(b), params.stride, params.padding)
}

//! Forward/backward kernels on plain tensors. The tape in `graph` wires these
//! together; tests and oracles may call them directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial axis of an NHWC tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Border handling of a padded convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around both spatial axes (torus topology).
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, in_h, in_w, cin], &[kh, kw, wcin, cout]) = (x, w) else {
            return Err(Error::shape("conv2d", x, w));
        };
        if cin != wcin {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d", "stride and kernel dims must be >= 1"));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {in_h}x{in_w} (pad {pad})"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
            padding: Padding::Zero,
        })
    }

    pub fn with_padding(mut self, padding: Padding) -> Result<Self> {
        if padding == Padding::Circular && (self.pad > self.in_h || self.pad > self.in_w) {
            return Err(Error::invalid("conv2d", "circular padding wider than the input"));
        }
        self.padding = padding;
        Ok(self)
    }

    /// Source coordinate for padded position `i` on an axis of length `n`.
    #[inline]
    fn source(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && i < n as isize {
            Some(i as usize)
        } else if self.padding == Padding::Circular {
            Some(i.rem_euclid(n as isize) as usize)
        } else {
            None
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.cout]
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> usize {
        self.rows() * self.patch_len() * self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Rows `(b, oy, ox)`, columns `(ky, kx, ci)`, zero outside the input.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * k];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let Some(iy) = g.source((oy * g.stride + ky) as isize - g.pad as isize, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source((ox * g.stride + kx) as isize - g.pad as isize, g.in_w) else {
                            continue;
                        };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let mut dx = vec![T::zero(); g.batch * g.in_h * g.in_w * g.cin];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src_row = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let Some(iy) = g.source((oy * g.stride + ky) as isize - g.pad as isize, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source((ox * g.stride + kx) as isize - g.pad as isize, g.in_w) else {
                            continue;
                        };
                        let dst = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += src_row[off + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums<T: Scalar>(m: &[T], n: usize) -> Vec<T> {
    let mut s = vec![T::zero(); n];
    for row in m.chunks_exact(n) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    conv2d_padded(x, w, b, stride, pad, Padding::Zero)
}

pub fn conv2d_padded<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?.with_padding(padding)?;
    if b.shape() != [g.cout] {
        return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
    }
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.rows() * g.cout];
    if g.is_pointwise() {
        T::gemm(
            g.rows(),
            k,
            g.cout,
            x.data(),
            (k as isize, 1),
            w.data(),
            (g.cout as isize, 1),
            T::zero(),
            &mut out,
        );
    } else {
        let cols = im2col(x.data(), &g);
        T::gemm(
            g.rows(),
            k,
            g.cout,
            &cols,
            (k as isize, 1),
            w.data(),
            (g.cout as isize, 1),
            T::zero(),
            &mut out,
        );
    }
    add_row_bias(&mut out, b.data());
    Tensor::new(&g.output_shape(), out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?.with_padding(padding)?;
    let (m, k, n) = (g.rows(), g.patch_len(), g.cout);
    let owned_cols;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        owned_cols = im2col(x.data(), &g);
        &owned_cols
    };
    let mut dw = vec![T::zero(); k * n];
    T::gemm(k, m, n, cols, (1, k as isize), dy.data(), (n as isize, 1), T::zero(), &mut dw);
    let db = column_sums(dy.data(), n);
    let mut dcols = vec![T::zero(); m * k];
    T::gemm(
        m,
        n,
        k,
        dy.data(),
        (n as isize, 1),
        w.data(),
        (1, n as isize),
        T::zero(),
        &mut dcols,
    );
    let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?, Tensor::new(&[n], db)?))
}

/// `out[.., j, ..] = x[.., (j + s) mod L, ..]` along `axis`.
pub fn circular_shift<T: Scalar>(x: &Tensor<T>, axis: Axis, s: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.nhwc()?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    match axis {
        Axis::Width => {
            let s = s % w;
            for row in 0..b * h {
                let base = row * w * c;
                for j in 0..w {
                    let from = base + ((j + s) % w) * c;
                    out[base + j * c..base + (j + 1) * c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
        Axis::Height => {
            let s = s % h;
            let plane = w * c;
            for bi in 0..b {
                let base = bi * h * plane;
                for i in 0..h {
                    let from = base + ((i + s) % h) * plane;
                    out[base + i * plane..base + (i + 1) * plane].copy_from_slice(&src[from..from + plane]);
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Length of `axis` in an NHWC shape.
pub fn axis_len(shape: &[usize], axis: Axis) -> usize {
    match axis {
        Axis::Height => shape[1],
        Axis::Width => shape[2],
    }
}

/// `[m,k]·[k,n]`, or batched `[p,m,k]·[p,k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); p * m * n];
    for i in 0..p {
        T::gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            (k as isize, 1),
            &b.data()[i * k * n..(i + 1) * k * n],
            (n as isize, 1),
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let shape: Vec<usize> = if a.rank() == 2 { vec![m, n] } else { vec![p, m, n] };
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[p, m, k], &[p2, k2, n]) if k == k2 && p == p2 => Ok((p, m, k, n)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (p, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut da = vec![T::zero(); p * m * k];
    let mut db = vec![T::zero(); p * k * n];
    for i in 0..p {
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let bi = &b.data()[i * k * n..(i + 1) * k * n];
        let ci = &dc.data()[i * m * n..(i + 1) * m * n];
        // dA = dC · Bᵀ
        T::gemm(
            m,
            n,
            k,
            ci,
            (n as isize, 1),
            bi,
            (1, n as isize),
            T::zero(),
            &mut da[i * m * k..(i + 1) * m * k],
        );
        // dB = Aᵀ · dC
        T::gemm(
            k,
            m,
            n,
            ai,
            (1, k as isize),
            ci,
            (n as isize, 1),
            T::zero(),
            &mut db[i * k * n..(i + 1) * k * n],
        );
    }
    Ok((Tensor::new(a.shape(), da)?, Tensor::new(b.shape(), db)?))
}

/// Affine map over the last axis: `x[.., cin] · w[cin, cout] + bias`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, cout) = match w.shape() {
        &[ci, co] if ci == x.last_dim() && bias.shape() == [co] => (ci, co),
        _ => return Err(Error::shape("linear", x.shape(), w.shape())),
    };
    let rows = x.len() / cin;
    let mut out = vec![T::zero(); rows * cout];
    T::gemm(
        rows,
        cin,
        cout,
        x.data(),
        (cin as isize, 1),
        w.data(),
        (cout as isize, 1),
        T::zero(),
        &mut out,
    );
    add_row_bias(&mut out, bias.data());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cout;
    Tensor::new(&shape, out)
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / cin;
    let mut dx = vec![T::zero(); rows * cin];
    T::gemm(
        rows,
        cout,
        cin,
        dy.data(),
        (cout as isize, 1),
        w.data(),
        (1, cout as isize),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); cin * cout];
    T::gemm(
        cin,
        rows,
        cout,
        x.data(),
        (1, cin as isize),
        dy.data(),
        (cout as isize, 1),
        T::zero(),
        &mut dw,
    );
    let db = column_sums(dy.data(), cout);
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?, Tensor::new(&[cout], db)?))
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = y.last_dim();
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.data().chunks_exact(n).zip(dy.data().chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &g)| a + p * g);
        for ((d, &p), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = p * (g - dot);
        }
    }
    Tensor::new(y.shape(), dx).expect("same shape")
}

/// Normalized rows and per-row reciprocal std, reused by the backward pass.
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let n = x.last_dim();
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let nf = T::from_count(n);
    let rows = x.len() / n;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let h = (row[i] - mean) * rs;
            xhat[r * n + i] = h;
            out[r * n + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward<T: Scalar>(cache: &LayerNormCache<T>, gamma: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = gamma.len();
    let nf = T::from_count(n);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); n];
    let mut db = vec![T::zero(); n];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let g = &dy.data()[r * n..(r + 1) * n];
        let h = &cache.xhat[r * n..(r + 1) * n];
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for i in 0..n {
            let dh = g[i] * gamma.data()[i];
            sum_dh += dh;
            sum_dh_h += dh * h[i];
            dg[i] += g[i] * h[i];
            db[i] += g[i];
        }
        for i in 0..n {
            let dh = g[i] * gamma.data()[i];
            dx[r * n + i] = rs / nf * (nf * dh - sum_dh - h[i] * sum_dh_h);
        }
    }
    (
        Tensor::new(dy.shape(), dx).expect("same shape"),
        Tensor::new(&[n], dg).expect("n"),
        Tensor::new(&[n], db).expect("n"),
    )
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Gelu,
    Exp,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::from_f64c((2.0 / std::f64::consts::PI).sqrt()), T::from_f64c(0.044715))
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        let half = T::from_f64c(0.5);
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => {
                let (k, a) = gelu_consts::<T>();
                half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
            }
            Unary::Exp => x.exp(),
        }
    }

    /// d/dx, given input `x` and output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let half = T::from_f64c(0.5);
        match self {
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Gelu => {
                let (k, a) = gelu_consts::<T>();
                let three = T::from_f64c(3.0);
                let t = (k * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
            }
            Unary::Exp => y,
        }
    }
}

pub fn concat_lastdim<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::shape("concat", first.shape(), x.shape()));
        }
    }
    let total: usize = xs.iter().map(|x| x.last_dim()).sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for x in xs {
            let c = x.last_dim();
            out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(&shape, out)
}

/// Channels `[start, start+len)` of the last axis.
pub fn slice_lastdim<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if start + len > c || len == 0 {
        return Err(Error::invalid(
            "slice_lastdim",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let out: Vec<T> = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = len;
    Tensor::new(&shape, out)
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.nhwc()?;
    let mut out = vec![T::zero(); b * 4 * h * w * c];
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((bi * h + y / 2) * w + xx / 2) * c;
                let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Tensor::new(&[b, 2 * h, 2 * w, c], out)
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h2, w2, c) = dy.nhwc()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((bi * h2 + y) * w2 + xx) * c;
                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                for k in 0..c {
                    dx[dst + k] += dy.data()[src + k];
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], dx)
}

/// Copies the top-left `min` region between two NHWC tensors of different
/// spatial size (zero-padding when growing, cropping when shrinking).
pub fn resize_canvas<T: Scalar>(x: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.nhwc()?;
    let mut out = vec![T::zero(); b * new_h * new_w * c];
    let (ch, cw) = (h.min(new_h), w.min(new_w));
    for bi in 0..b {
        for y in 0..ch {
            let src = ((bi * h + y) * w) * c;
            let dst = ((bi * new_h + y) * new_w) * c;
            out[dst..dst + cw * c].copy_from_slice(&x.data()[src..src + cw * c]);
        }
    }
    Tensor::new(&[b, new_h, new_w, c], out)
}

/// Row index maps between `[B,h,w,c]` and `[B·nWin, ws·ws, c]`: entry `i`
/// is the source pixel row of window-token row `i`.
fn window_rows(b: usize, h: usize, w: usize, ws: usize) -> Vec<usize> {
    let (nh, nw) = (h / ws, w / ws);
    let mut map = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..ws {
                    for tx in 0..ws {
                        map.push((bi * h + wy * ws + ty) * w + wx * ws + tx);
                    }
                }
            }
        }
    }
    map
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, ws: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.nhwc()?;
    if ws == 0 || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
        return Err(Error::invalid("window_partition", format!("window {ws} does not tile {h}x{w}")));
    }
    let map = window_rows(b, h, w, ws);
    let mut out = vec![T::zero(); x.len()];
    for (dst, &src) in map.iter().enumerate() {
        out[dst * c..(dst + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
    }
    Tensor::new(&[b * (h / ws) * (w / ws), ws * ws, c], out)
}

/// Inverse of [`window_partition`] for an image batch of shape `[b,h,w,c]`.
pub fn window_merge<T: Scalar>(x: &Tensor<T>, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if x.len() != b * h * w * c || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
        return Err(Error::shape("window_merge", x.shape(), &[b, h, w, c]));
    }
    let map = window_rows(b, h, w, ws);
    let mut out = vec![T::zero(); x.len()];
    for (srow, &drow) in map.iter().enumerate() {
        out[drow * c..(drow + 1) * c].copy_from_slice(&x.data()[srow * c..(srow + 1) * c]);
    }
    Tensor::new(&[b, h, w, c], out)
}

/// Axis permutation of a rank-≤4 tensor: `out.shape[i] = x.shape[perm[i]]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if perm.len() != r || r > 4 || sorted != (0..r).collect::<Vec<_>>() {
        return Err(Error::invalid("permute", format!("bad permutation {perm:?} for rank {r}")));
    }
    // Pad to rank 4 with leading unit axes.
    let pad = 4 - r;
    let mut shape = [1usize; 4];
    shape[pad..].copy_from_slice(x.shape());
    let mut p = [0usize, 1, 2, 3];
    for i in 0..r {
        p[pad + i] = pad + perm[i];
    }
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    let os = [shape[p[0]], shape[p[1]], shape[p[2]], shape[p[3]]];
    let st = [strides[p[0]], strides[p[1]], strides[p[2]], strides[p[3]]];
    let mut out = Vec::with_capacity(x.len());
    for a in 0..os[0] {
        for b in 0..os[1] {
            for c in 0..os[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..os[3] {
                    out.push(x.data()[base + d * st[3]]);
                }
            }
        }
    }
    let out_shape: Vec<usize> = perm.iter().map(|&i| x.shape()[i]).collect();
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `Σ w·BCE(x, t)` with logits `x`, numerically stable.
pub fn bce_with_logits_sum<T: Scalar>(x: &Tensor<T>, target: &Tensor<T>, weight: &Tensor<T>) -> T {
    let mut s = T::zero();
    for ((&xi, &ti), &wi) in x.data().iter().zip(target.data()).zip(weight.data()) {
        if wi != T::zero() {
            s += wi * (xi.max(T::zero()) - xi * ti + (-xi.abs()).exp().ln_1p());
        }
    }
    s
}

/// Decoded box `(x1,y1,x2,y2)` for raw regression `(dx,dy,dw,dh)` at cell
/// `(row, col)` of a map with the given stride. `dw`,`dh` are clamped to
/// `[-10, 10]` before exponentiation.
pub fn decode_cell<T: Scalar>(raw: [T; 4], row: usize, col: usize, stride: T) -> [T; 4] {
    let half = T::from_f64c(0.5);
    let lim = T::from_f64c(10.0);
    let cx = (T::from_count(col) + half + raw[0]) * stride;
    let cy = (T::from_count(row) + half + raw[1]) * stride;
    let w = raw[2].max(-lim).min(lim).exp() * stride;
    let h = raw[3].max(-lim).min(lim).exp() * stride;
    [cx - half * w, cy - half * h, cx + half * w, cy + half * h]
}

/// IoU of a decoded prediction with `target`, and d IoU / d raw.
pub fn iou_and_grad<T: Scalar>(raw: [T; 4], row: usize, col: usize, stride: T, target: [T; 4]) -> (T, [T; 4]) {
    let zero = T::zero();
    let half = T::from_f64c(0.5);
    let lim = T::from_f64c(10.0);
    let p = decode_cell(raw, row, col, stride);
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let tw = target[2] - target[0];
    let th = target[3] - target[1];

    let ix1 = p[0].max(target[0]);
    let ix2 = p[2].min(target[2]);
    let iy1 = p[1].max(target[1]);
    let iy2 = p[3].min(target[3]);
    let iw = (ix2 - ix1).max(zero);
    let ih = (iy2 - iy1).max(zero);
    let inter = iw * ih;
    let union = pw * ph + tw * th - inter;
    let iou = inter / union;

    // Gradients w.r.t. predicted corners.
    let d_inter = T::one() / union + inter / (union * union);
    let d_union = -inter / (union * union);
    let mut dp = [zero; 4];
    if iw > zero && ih > zero {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if p[0] >= target[0] {
            dp[0] -= d_iw;
        }
        if p[2] <= target[2] {
            dp[2] += d_iw;
        }
        if p[1] >= target[1] {
            dp[1] -= d_ih;
        }
        if p[3] <= target[3] {
            dp[3] += d_ih;
        }
    }
    // area = (x2-x1)(y2-y1)
    dp[0] -= d_union * ph;
    dp[2] += d_union * ph;
    dp[1] -= d_union * pw;
    dp[3] += d_union * pw;

    // corners -> (cx, cy, w, h) -> raw
    let d_cx = dp[0] + dp[2];
    let d_cy = dp[1] + dp[3];
    let d_w = half * (dp[2] - dp[0]);
    let d_h = half * (dp[3] - dp[1]);
    let gw = if raw[2].abs() < lim { d_w * pw } else { zero };
    let gh = if raw[3].abs() < lim { d_h * ph } else { zero };
    (iou, [d_cx * stride, d_cy * stride, gw, gh])
}

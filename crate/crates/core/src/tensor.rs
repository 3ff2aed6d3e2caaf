//! Dense row-major arrays and the numeric kernels the networks are built from.
//!
//! Training runs in `f32`. Every kernel is generic over [`Scalar`] so the same
//! code can be evaluated in `f64` for finite-difference gradient checks.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` views; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar type")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Whether a gemm operand is read as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored row-major as `m x k` (or `k x m` when transposed), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    op_a: Op,
    b: &[S],
    op_b: Op,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths are asserted above and `c` is a distinct &mut borrow.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense array with an explicit shape, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!(
            "shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = check_shape(shape).expect("zeros: invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Row-major 2-D constructor, mostly for tests.
    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension (batch size for batched tensors).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(T::nan))
                .collect(),
        }
    }

    /// Gathers the given leading-dimension rows into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: S) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }
}

/// Matrix product of `[m x k]` and `[k x n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, Op::N, &b.data, Op::N, S::zero(), &mut out.data);
    Ok(out)
}

/// Geometry of a 2-D convolution over one `[C x H x W]` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if self.height + 2 * self.padding < self.kernel_h
            || self.width + 2 * self.padding < self.kernel_w
        {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {}x{} (padding {})",
                self.kernel_h, self.kernel_w, self.height, self.width, self.padding
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn source(&self, out: usize, k: usize) -> Option<usize> {
        let pos = out * self.stride + k;
        pos.checked_sub(self.padding)
    }
}

/// Unfolds one `[C x H x W]` sample into a `[C*kh*kw x H'*W']` patch matrix.
pub fn im2col<S: Scalar>(input: &[S], g: &ConvGeometry, cols: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(cols.len(), g.patch_len() * oh * ow);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = g.source(oy, ki).filter(|&y| y < g.height);
                    for ox in 0..ow {
                        let ix = g.source(ox, kj).filter(|&x| x < g.width);
                        dst[oy * ow + ox] = match (iy, ix) {
                            (Some(y), Some(x)) => plane[y * g.width + x],
                            _ => S::zero(),
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into an input gradient.
pub fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry, input_grad: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let Some(y) = g.source(oy, ki).filter(|&y| y < g.height) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(x) = g.source(ox, kj).filter(|&x| x < g.width) {
                            plane[y * g.width + x] = plane[y * g.width + x] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of one `[C_in x H x W]` input with `[C_out x C_in x kh x kw]` kernels.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    if input.rank() != 3 || kernels.rank() != 4 || kernels.shape[1] != input.shape[0] {
        return Err(Error::dim(format!(
            "conv2d of input {:?} with kernels {:?}",
            input.shape, kernels.shape
        )));
    }
    let g = ConvGeometry {
        in_channels: input.shape[0],
        height: input.shape[1],
        width: input.shape[2],
        kernel_h: kernels.shape[2],
        kernel_w: kernels.shape[3],
        stride,
        padding,
    };
    g.validate()?;
    let c_out = kernels.shape[0];
    let mut cols = vec![S::zero(); g.patch_len() * g.out_pixels()];
    im2col(&input.data, &g, &mut cols);
    let mut out = Tensor::zeros(&[c_out, g.out_h(), g.out_w()]);
    gemm(
        c_out,
        g.patch_len(),
        g.out_pixels(),
        &kernels.data,
        Op::N,
        &cols,
        Op::N,
        S::zero(),
        &mut out.data,
    );
    Ok(out)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

/// Passes `grad` through where the forward input was positive.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    let data = input
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor {
        shape: grad.shape.clone(),
        data,
    }
}

/// 2x2 stride-2 max pooling over the last two axes.
///
/// Returns the pooled tensor and, per output element, the flat input index of
/// the selected maximum (first in window order on ties).
pub fn maxpool2d<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::dim(format!("maxpool2d needs rank >= 2, got {:?}", x.shape)));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "maxpool2d needs even spatial dims, got {h}x{w}"
        )));
    }
    let planes = x.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.push(x.data[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor { shape, data: out }, argmax))
}

/// Routes pooled gradients back to the recorded argmax positions.
pub fn maxpool2d_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<S>,
) -> Tensor<S> {
    let mut out = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad.data) {
        out.data[idx] = out.data[idx] + g;
    }
    out
}

/// Mean softmax cross-entropy of `[B x k]` logits and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Tensor<S>)> {
    if logits.rank() != 2 || logits.shape[0] != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} against {} labels",
            logits.shape,
            labels.len()
        )));
    }
    let (b, k) = (logits.shape[0], logits.shape[1]);
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::validation(format!(
            "label {label} at row {row} out of range for {k} classes"
        )));
    }
    let inv_b = S::one() / S::of(b as f64);
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = S::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let g = &mut grad.data[i * k..(i + 1) * k];
        let mut sum = S::zero();
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = (l - max).exp();
            sum = sum + *gj;
        }
        total = total + (sum.ln() + max - row[label]);
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_b;
        }
        g[label] = g[label] - inv_b;
    }
    Ok((total * inv_b, grad))
}

/// Index of the largest logit in each row.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Largest relative error between an analytic gradient and central differences.
///
/// `f` returns the value and analytic gradient at a point. Each coordinate is
/// compared as `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> f64
where
    F: FnMut(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// [`grad_check`] restricted to the given coordinates.
pub fn grad_check_coords<F>(mut f: F, point: &Tensor<f64>, eps: f64, coords: &[usize]) -> f64
where
    F: FnMut(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let (_, analytic) = f(point);
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let x = point.data[i];
        probe.data[i] = x + eps;
        let (up, _) = f(&probe);
        probe.data[i] = x - eps;
        let (down, _) = f(&probe);
        probe.data[i] = x;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

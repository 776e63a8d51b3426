// Slice-level forward/backward kernels used by the tape.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<S: Scalar>(d: &ConvDims, image: &[S], cols: &mut [S]) {
    let (oh, ow, hw) = (d.out_h(), d.out_w(), d.out_hw());
    let plane = d.height * d.width;
    for c in 0..d.in_ch {
        for u in 0..d.kh {
            for v in 0..d.kw {
                let row = (c * d.kh + u) * d.kw + v;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..oh {
                    let src = c * plane + (i + u) * d.width + v;
                    dst[i * ow..(i + 1) * ow].copy_from_slice(&image[src..src + ow]);
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(d: &ConvDims, cols: &[S], image: &mut [S]) {
    let (oh, ow, hw) = (d.out_h(), d.out_w(), d.out_hw());
    let plane = d.height * d.width;
    for c in 0..d.in_ch {
        for u in 0..d.kh {
            for v in 0..d.kw {
                let row = (c * d.kh + u) * d.kw + v;
                let src = &cols[row * hw..(row + 1) * hw];
                for i in 0..oh {
                    let dst = c * plane + (i + u) * d.width + v;
                    for (x, y) in image[dst..dst + ow].iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                        *x += *y;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(d: &ConvDims, input: &[S], kernel: &[S], bias: &[S]) -> Vec<S> {
    let (hw, patch) = (d.out_hw(), d.patch());
    let in_size = d.in_ch * d.height * d.width;
    let out_size = d.out_ch * hw;
    let mut out = vec![S::zero(); d.batch * out_size];
    let mut cols = vec![S::zero(); patch * hw];
    for b in 0..d.batch {
        im2col(d, &input[b * in_size..(b + 1) * in_size], &mut cols);
        let out_b = &mut out[b * out_size..(b + 1) * out_size];
        for (o, row) in out_b.chunks_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        S::gemm(
            d.out_ch,
            patch,
            hw,
            S::one(),
            kernel,
            (patch as isize, 1),
            &cols,
            (hw as isize, 1),
            S::one(),
            out_b,
            (hw as isize, 1),
        );
    }
    out
}

/// Accumulates gradients of a conv2d into the provided buffers (any may be skipped).
pub(crate) fn conv2d_backward<S: Scalar>(
    d: &ConvDims,
    input: &[S],
    kernel: &[S],
    upstream: &[S],
    mut d_input: Option<&mut [S]>,
    mut d_kernel: Option<&mut [S]>,
    mut d_bias: Option<&mut [S]>,
) {
    let (hw, patch) = (d.out_hw(), d.patch());
    let in_size = d.in_ch * d.height * d.width;
    let out_size = d.out_ch * hw;
    let mut cols = vec![S::zero(); patch * hw];
    for b in 0..d.batch {
        let g = &upstream[b * out_size..(b + 1) * out_size];
        if let Some(db) = d_bias.as_deref_mut() {
            for (o, row) in g.chunks(hw).enumerate() {
                db[o] += row.iter().copied().sum::<S>();
            }
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            im2col(d, &input[b * in_size..(b + 1) * in_size], &mut cols);
            S::gemm(
                d.out_ch,
                hw,
                patch,
                S::one(),
                g,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                S::one(),
                dk,
                (patch as isize, 1),
            );
        }
        if let Some(di) = d_input.as_deref_mut() {
            S::gemm(
                patch,
                d.out_ch,
                hw,
                S::one(),
                kernel,
                (1, patch as isize),
                g,
                (hw as isize, 1),
                S::zero(),
                &mut cols,
                (hw as isize, 1),
            );
            col2im_add(d, &cols, &mut di[b * in_size..(b + 1) * in_size]);
        }
    }
}

/// `x[B,F] * w[K,F]^T + bias[K]`.
pub(crate) fn linear_forward<S: Scalar>(batch: usize, feat: usize, classes: usize, x: &[S], w: &[S], bias: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * classes);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    S::gemm(
        batch,
        feat,
        classes,
        S::one(),
        x,
        (feat as isize, 1),
        w,
        (1, feat as isize),
        S::one(),
        &mut out,
        (classes as isize, 1),
    );
    out
}

/// Numerically stable row-wise softmax of a `[rows, cols]` matrix.
pub(crate) fn softmax_rows<S: Scalar>(logits: &[S], cols: usize) -> Vec<S> {
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = probs.len();
        let mut total = S::zero();
        for &z in row {
            let e = (z - max).exp();
            total += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= total;
        }
    }
    probs
}

/// Mean negative log-likelihood; uses log-sum-exp so huge margins give exactly 0 loss.
pub(crate) fn cross_entropy<S: Scalar>(logits: &[S], cols: usize, labels: &[usize]) -> S {
    let mut total = S::zero();
    for (row, &label) in logits.chunks(cols).zip(labels) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
        total += lse - row[label];
    }
    total / S::of(labels.len() as f64)
}

/// Unbiased covariance of the columns of an `[n, d]` matrix.
pub(crate) fn covariance<S: Scalar>(x: &[S], n: usize, d: usize) -> (Vec<S>, Vec<S>) {
    let centered = center_columns(x, n, d);
    let mut cov = vec![S::zero(); d * d];
    S::gemm(
        d,
        n,
        d,
        S::one() / S::of((n - 1) as f64),
        &centered,
        (1, d as isize),
        &centered,
        (d as isize, 1),
        S::zero(),
        &mut cov,
        (d as isize, 1),
    );
    (cov, centered)
}

fn center_columns<S: Scalar>(x: &[S], n: usize, d: usize) -> Vec<S> {
    let mut mean = vec![S::zero(); d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    let inv = S::one() / S::of(n as f64);
    for m in &mut mean {
        *m *= inv;
    }
    let mut centered = x.to_vec();
    for row in centered.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= *m;
        }
    }
    centered
}

/// `d x = centered (G + G^T) / (n - 1)` for `C = centered^T centered / (n - 1)`.
pub(crate) fn covariance_backward<S: Scalar>(centered: &[S], n: usize, d: usize, upstream: &[S], dx: &mut [S]) {
    let mut sym = vec![S::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = upstream[i * d + j] + upstream[j * d + i];
        }
    }
    S::gemm(
        n,
        d,
        d,
        S::one() / S::of((n - 1) as f64),
        centered,
        (d as isize, 1),
        &sym,
        (d as isize, 1),
        S::one(),
        dx,
        (d as isize, 1),
    );
}

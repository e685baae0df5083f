//! Forward kernels and their reverse-mode rules, operating on plain tensors.
//!
//! The tape in [`crate::tape`] records calls into these; they are also usable
//! directly when no gradient is needed.

use crate::error::{shape_err, GksError, Result};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` for row-major operands.
///
/// `op(a)` is `m×k`; when `trans_a` is set, `a` is stored as `k×m`. Same for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Dense product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(false, false, m, k, n, a.data(), b.data(), 0.0, out.data_mut());
    Ok(out)
}

pub(crate) fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape_err!("{what}: expected a matrix, got shape {s:?}")),
    }
}

pub(crate) fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_err!("{what}: expected rank 3, got shape {s:?}")),
    }
}

pub(crate) fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(shape_err!("{what}: expected rank 4, got shape {s:?}")),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

// ---------------------------------------------------------------------------
// conv2d

/// Geometry of a same-padded stride-1 convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let (batch, height, width, cin) = dims4(input, "conv2d input")?;
        let (k, k2, kcin, cout) = dims4(kernel, "conv2d kernel")?;
        if k != k2 || k % 2 == 0 {
            return Err(shape_err!("conv2d kernel must be square and odd, got {k}x{k2}"));
        }
        if kcin != cin {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if bias.shape() != [cout] {
            return Err(shape_err!(
                "conv2d bias shape {:?}, expected [{cout}]",
                bias.shape()
            ));
        }
        if height == 0 || width == 0 {
            return Err(shape_err!("conv2d input has empty spatial extent"));
        }
        Ok(ConvGeom {
            batch,
            height,
            width,
            cin,
            cout,
            k,
        })
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Unfold zero-padded `k×k` neighbourhoods into rows of length `k·k·cin`.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let pl = g.patch_len();
    let p = (g.k / 2) as isize;
    let mut col = vec![0.0; g.pixels() * pl];
    let (h, w, cin) = (g.height as isize, g.width as isize, g.cin);
    let mut row = 0;
    for b in 0..g.batch {
        let img = &input[b * g.height * g.width * cin..(b + 1) * g.height * g.width * cin];
        for y in 0..h {
            for x in 0..w {
                let dst = &mut col[row * pl..(row + 1) * pl];
                for ky in 0..g.k as isize {
                    let sy = y + ky - p;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..g.k as isize {
                        let sx = x + kx - p;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let src = ((sy * w + sx) as usize) * cin;
                        let o = ((ky as usize) * g.k + kx as usize) * cin;
                        dst[o..o + cin].copy_from_slice(&img[src..src + cin]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add rows back onto the image.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], out: &mut [f64]) {
    let pl = g.patch_len();
    let p = (g.k / 2) as isize;
    let (h, w, cin) = (g.height as isize, g.width as isize, g.cin);
    let mut row = 0;
    for b in 0..g.batch {
        let img = &mut out[b * g.height * g.width * cin..(b + 1) * g.height * g.width * cin];
        for y in 0..h {
            for x in 0..w {
                let src = &col[row * pl..(row + 1) * pl];
                for ky in 0..g.k as isize {
                    let sy = y + ky - p;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..g.k as isize {
                        let sx = x + kx - p;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let dst = ((sy * w + sx) as usize) * cin;
                        let o = ((ky as usize) * g.k + kx as usize) * cin;
                        for c in 0..cin {
                            img[dst + c] += src[o + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. Returns the output and, for `k > 1`, the unfolded
/// input needed by the backward pass.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> (Tensor, Option<Vec<f64>>) {
    let rows = g.pixels();
    let mut out = Tensor::zeros(&[g.batch, g.height, g.width, g.cout]);
    {
        let o = out.data_mut();
        for r in 0..rows {
            o[r * g.cout..(r + 1) * g.cout].copy_from_slice(bias.data());
        }
    }
    let col = if g.k == 1 { None } else { Some(im2col(g, input.data())) };
    let lhs = col.as_deref().unwrap_or(input.data());
    gemm(
        false,
        false,
        rows,
        g.patch_len(),
        g.cout,
        lhs,
        kernel.data(),
        1.0,
        out.data_mut(),
    );
    (out, col)
}

/// Same-padded, stride-1 2-D convolution over `B×h×w×Cin` input with a
/// `k×k×Cin×Cout` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, bias)?;
    Ok(conv2d_forward(&g, input, kernel, bias).0)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &Tensor,
    col: Option<&[f64]>,
    kernel: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> ConvGrads {
    let rows = g.pixels();
    let pl = g.patch_len();
    let lhs = col.unwrap_or(input.data());
    let mut dk = Tensor::zeros(&[g.k, g.k, g.cin, g.cout]);
    gemm(true, false, pl, rows, g.cout, lhs, grad_out.data(), 0.0, dk.data_mut());
    let mut db = Tensor::zeros(&[g.cout]);
    {
        let dbd = db.data_mut();
        for r in grad_out.data().chunks_exact(g.cout) {
            for (a, b) in dbd.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    let dx = need_input.then(|| {
        let mut dcol = vec![0.0; rows * pl];
        gemm(false, true, rows, g.cout, pl, grad_out.data(), kernel.data(), 0.0, &mut dcol);
        if g.k == 1 {
            Tensor::new(input.shape(), dcol).expect("1x1 conv gradient shape")
        } else {
            let mut dx = Tensor::zeros(input.shape());
            col2im(g, &dcol, dx.data_mut());
            dx
        }
    });
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

// ---------------------------------------------------------------------------
// batch norm

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Values cached by a batch-norm forward pass for its backward rule.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

/// Normalizes the last axis of `input`. `running` is `(mean, var)`; train mode
/// updates it in place.
pub(crate) fn batch_norm_forward(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    epsilon: f64,
    momentum: f64,
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| shape_err!("batch_norm on a scalar"))?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(shape_err!(
            "batch_norm: input has {c} channels, state has {}",
            gamma.len()
        ));
    }
    let count = input.len() / c.max(1);
    let (mean, inv_std) = match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(GksError::InvalidInput(
                    "batch_norm in train mode needs at least 2 values per channel".into(),
                ));
            }
            let mut mean = vec![0.0; c];
            for row in input.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let nf = count as f64;
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![0.0; c];
            for row in input.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= nf);
            let unbias = nf / (nf - 1.0);
            for ch in 0..c {
                running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
                running_var[ch] =
                    (1.0 - momentum) * running_var[ch] + momentum * var[ch] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
            (mean, inv_std)
        }
        BnMode::Infer => (
            running_mean.to_vec(),
            running_var
                .iter()
                .map(|v| 1.0 / (v + epsilon).sqrt())
                .collect(),
        ),
    };
    let mut xhat = vec![0.0; input.len()];
    let mut out = Tensor::zeros(input.shape());
    for ((xr, hr), or) in input
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv_std[ch];
            hr[ch] = h;
            or[ch] = gamma[ch] * h + beta[ch];
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        },
    ))
}

/// Batch normalization over the last axis using (and in train mode updating) `state`.
pub fn batch_norm(input: &Tensor, state: &mut BatchNormState, mode: BnMode) -> Result<Tensor> {
    let (out, _) = batch_norm_forward(
        input,
        &state.gamma,
        &state.beta,
        &mut state.running_mean,
        &mut state.running_var,
        state.epsilon,
        state.momentum,
        mode,
    )?;
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward(
    cache: &BnCache,
    gamma: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let count = grad_out.len() / c;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gr, hr) in grad_out.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += gr[ch];
            dgamma[ch] += gr[ch] * hr[ch];
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    let nf = count as f64;
    for ((dxr, gr), hr) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(cache.xhat.chunks_exact(c))
    {
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch];
            dxr[ch] = if cache.train {
                scale * (gr[ch] - dbeta[ch] / nf - hr[ch] * dgamma[ch] / nf)
            } else {
                scale * gr[ch]
            };
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// softmax / loss

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let n = *m
        .shape()
        .last()
        .ok_or_else(|| shape_err!("softmax_rows on a scalar"))?;
    if n == 0 {
        return Err(shape_err!("softmax_rows needs at least one column"));
    }
    let mut out = m.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn softmax_rows_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut dx = Tensor::zeros(y.shape());
    for ((dr, yr), gr) in dx
        .data_mut()
        .chunks_exact_mut(n)
        .zip(y.data().chunks_exact(n))
        .zip(grad_out.data().chunks_exact(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

fn check_ce(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = dims2(logits, "cross_entropy logits")?;
    if labels.len() != b {
        return Err(shape_err!(
            "cross_entropy: {b} logit rows but {} labels",
            labels.len()
        ));
    }
    if b == 0 {
        return Err(shape_err!("cross_entropy on an empty batch"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(GksError::InvalidInput(format!(
            "label {l} out of range for {k} classes"
        )));
    }
    Ok((b, k))
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
/// Also returns the softmax probabilities.
pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = check_ce(logits, labels)?;
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (row, &l) in probs.data_mut().chunks_exact_mut(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[l];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok((loss / b as f64, probs))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_forward(logits, labels).map(|(l, _)| l)
}

pub(crate) fn cross_entropy_backward(probs: &Tensor, labels: &[usize], grad: f64) -> Tensor {
    let k = probs.shape()[1];
    let scale = grad / labels.len() as f64;
    let mut d = probs.clone();
    for (row, &l) in d.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_scaled() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_zero_kernel() {
        let x = Tensor::from_fn(&[2, 4, 5, 3], |i| (i as f64).sin());
        let k = Tensor::zeros(&[3, 3, 3, 2]);
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 3, 2]);
        let k = Tensor::zeros(&[3, 3, 4, 1]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("channel mismatch"), "{err}");
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        assert_eq!(matmul(&a, &Tensor::eye(4)).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matmul(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn relu_cases() {
        let neg = Tensor::full(&[2, 3], -1.5);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::from_fn(&[5], |i| i as f64 + 0.5);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn softmax_known_values() {
        let t = Tensor::new(&[2, 2], vec![1.0, 0.0, 3.0, 3.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert_eq!(&s.data()[2..], &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let t = Tensor::new(&[1, 3], vec![0.2, -1.0, 4.0]).unwrap();
        let s1 = softmax_rows(&t).unwrap();
        let s2 = softmax_rows(&t.map(|v| v + 1000.0)).unwrap();
        assert!(s1.max_abs_diff(&s2) < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[3, 2]);
        let l = cross_entropy(&uniform, &[0, 1, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let sat = Tensor::new(&[1, 2], vec![20.0, -20.0]).unwrap();
        assert!(cross_entropy(&sat, &[0]).unwrap() < 1e-8);
        assert!(cross_entropy(&sat, &[2]).is_err());
    }

    #[test]
    fn batch_norm_fixed_point_and_annihilator() {
        // two values per channel at ±1: zero mean, unit (biased) variance
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let mut st = BatchNormState::new(2);
        let y = batch_norm(&x, &mut st, BnMode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);

        let mut st = BatchNormState::new(2);
        st.gamma = vec![0.0, 0.0];
        st.beta = vec![0.3, -0.7];
        let y = batch_norm(&x, &mut st, BnMode::Train).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.3, -0.7]);
        }
    }

    #[test]
    fn batch_norm_single_element_rejected() {
        let x = Tensor::zeros(&[1, 1, 1, 3]);
        let mut st = BatchNormState::new(3);
        assert!(batch_norm(&x, &mut st, BnMode::Train).is_err());
        assert!(batch_norm(&x, &mut st, BnMode::Infer).is_ok());
    }

    #[test]
    fn batch_norm_infer_ignores_batch_composition() {
        let mut st = BatchNormState::new(1);
        st.running_mean = vec![0.5];
        st.running_var = vec![4.0];
        let a = Tensor::new(&[2, 1], vec![1.0, 9.0]).unwrap();
        let b = Tensor::new(&[3, 1], vec![1.0, -3.0, 2.0]).unwrap();
        let ya = batch_norm(&a, &mut st, BnMode::Infer).unwrap();
        let yb = batch_norm(&b, &mut st, BnMode::Infer).unwrap();
        assert_eq!(ya.data()[0], yb.data()[0]);
        assert_eq!(st.running_var, vec![4.0]);
    }
}

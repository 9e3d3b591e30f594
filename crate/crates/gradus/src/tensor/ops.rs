//! Forward primitives and their reverse-mode rules.
//!
//! Every op validates shapes, computes the output buffer, and records a
//! graph node on the result when at least one input requires gradients.
//! Matrix-shaped inner loops go through gemm; the rest are plain loops.

use std::sync::Arc;

use super::{GradMap, Node, Scalar, Tensor, TensorError};

pub(crate) enum Op<T: Scalar> {
    Matmul,
    Add,
    AddBias,
    Scale(T),
    SoftmaxLastDim,
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Gelu,
    Embedding { ids: Vec<usize> },
    Conv1dCausal,
    CausalAttention { n_heads: usize, probs: Vec<T> },
    ContextAttention { n_heads: usize, ctx_k: Arc<Vec<T>>, ctx_v: Arc<Vec<T>>, ctx_len: usize, probs: Vec<T> },
    SliceCols { start: usize },
    SliceRows { start: usize },
    DropoutMask { mask: Vec<T> },
    SumAll,
    SoftmaxXentMean { targets: Vec<usize>, probs: Vec<T> },
    SigmoidBceMean { targets: Vec<T> },
}

/// C = alpha * A(m×k) * B(k×n) + beta * C(m×n) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[T],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (c_off as isize + i as isize * rsc + j as isize * csc) as usize;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        )
    }
}

fn with_node<T: Scalar>(
    shape: Vec<usize>,
    data: Vec<T>,
    inputs: Vec<Tensor<T>>,
    make_op: impl FnOnce() -> Op<T>,
) -> Tensor<T> {
    let requires_grad = inputs.iter().any(|t| t.requires_grad());
    let node = if requires_grad {
        Some(Node {
            op: make_op(),
            inputs,
        })
    } else {
        None
    };
    Tensor::build(shape, data, requires_grad, node)
}

fn last_dim_rows<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::Dimension("tensor has no extents".into()))?;
    if d == 0 {
        return Err(TensorError::Dimension("last extent must be >= 1".into()));
    }
    Ok((x.len() / d, d))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (r, ka) = a.dims2()?;
    let (kb, c) = b.dims2()?;
    if ka != kb {
        return Err(TensorError::Dimension(format!(
            "matmul inner extents differ: {r}x{ka} vs {kb}x{c}"
        )));
    }
    let mut out = vec![T::ZERO; r * c];
    gemm(
        r, ka, c,
        T::ONE,
        a.data(), 0, ka as isize, 1,
        b.data(), 0, c as isize, 1,
        T::ZERO,
        &mut out, 0, c as isize, 1,
    );
    Ok(with_node(vec![r, c], out, vec![a.clone(), b.clone()], || Op::Matmul))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(with_node(a.shape().to_vec(), out, vec![a.clone(), b.clone()], || Op::Add))
}

/// Broadcasts `bias` (length d) over every length-d row of `a`.
pub fn add_bias<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (rows, d) = last_dim_rows(a)?;
    if bias.shape() != [d] {
        return Err(TensorError::Dimension(format!(
            "bias shape {:?} does not match last extent {d}",
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.len());
    for r in 0..rows {
        let row = &a.data()[r * d..(r + 1) * d];
        out.extend(row.iter().zip(bias.data()).map(|(&x, &b)| x + b));
    }
    Ok(with_node(a.shape().to_vec(), out, vec![a.clone(), bias.clone()], || Op::AddBias))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    let out: Vec<T> = a.data().iter().map(|&x| x * factor).collect();
    with_node(a.shape().to_vec(), out, vec![a.clone()], || Op::Scale(factor))
}

/// Numerically stabilized softmax over the last dimension.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (rows, d) = last_dim_rows(x)?;
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut m = row[0];
        for &v in row {
            m = m.max(v);
        }
        let mut denom = T::ZERO;
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            denom += e;
        }
        let inv = T::ONE / denom;
        for o in &mut out[r * d..(r + 1) * d] {
            *o *= inv;
        }
    }
    Ok(with_node(x.shape().to_vec(), out, vec![x.clone()], || Op::SoftmaxLastDim))
}

/// Per-row standardization over the last dimension followed by an affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (rows, d) = last_dim_rows(x)?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::Dimension(format!(
            "layer_norm gain/bias must have shape [{d}], got {:?}/{:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let inv_d = T::ONE / T::from_usize(d);
    let mut out = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv = T::ONE / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    Ok(with_node(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        move || Op::LayerNorm { xhat, inv_std },
    ))
}

fn gauss_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// GELU with the exact Gaussian-CDF formula.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| v * gauss_cdf(v)).collect();
    with_node(x.shape().to_vec(), out, vec![x.clone()], || Op::Gelu)
}

/// Gathers rows of `table` by id; gradients scatter back additively.
pub fn embedding_lookup<T: Scalar>(
    table: &Tensor<T>,
    ids: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let (vocab, d) = table.dims2()?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(TensorError::IndexOutOfRange {
                index: id,
                extent: vocab,
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let ids = ids.to_vec();
    Ok(with_node(
        vec![ids.len(), d],
        out,
        vec![table.clone()],
        move || Op::Embedding { ids },
    ))
}

/// 1-D convolution over time with left zero-padding of k-1 frames, so the
/// output at position t reads only x[t-k+1 ..= t].
pub fn conv1d_causal<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (t_len, c_in) = x.dims2()?;
    let kshape = kernel.shape();
    if kshape.len() != 3 || kshape[1] != c_in {
        return Err(TensorError::Dimension(format!(
            "conv kernel must be [k, {c_in}, c_out], got {kshape:?}"
        )));
    }
    let (k, c_out) = (kshape[0], kshape[2]);
    if bias.shape() != [c_out] {
        return Err(TensorError::Dimension(format!(
            "conv bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(t_len * c_out);
    for _ in 0..t_len {
        out.extend_from_slice(bias.data());
    }
    for j in 0..k {
        let shift = k - 1 - j;
        if shift >= t_len {
            continue;
        }
        let m = t_len - shift;
        gemm(
            m, c_in, c_out,
            T::ONE,
            x.data(), 0, c_in as isize, 1,
            kernel.data(), j * c_in * c_out, c_out as isize, 1,
            T::ONE,
            &mut out, shift * c_out, c_out as isize, 1,
        );
    }
    Ok(with_node(
        vec![t_len, c_out],
        out,
        vec![x.clone(), kernel.clone(), bias.clone()],
        || Op::Conv1dCausal,
    ))
}

/// Multi-head scaled dot-product attention where position t attends only to
/// positions <= t. Masked pairs are never touched: their probabilities are
/// structurally zero, not exp of a large negative.
pub fn causal_self_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
) -> Result<Tensor<T>, TensorError> {
    let (l, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(TensorError::Dimension(
            "attention q/k/v shapes must agree".into(),
        ));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Dimension(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let alpha = T::ONE / T::from_usize(dh).sqrt();
    let mut probs = vec![T::ZERO; n_heads * l * l];
    let mut out = vec![T::ZERO; l * d];
    let mut scores = vec![T::ZERO; l * l];
    for h in 0..n_heads {
        let off = h * dh;
        gemm(
            l, dh, l,
            alpha,
            q.data(), off, d as isize, 1,
            k.data(), off, 1, d as isize,
            T::ZERO,
            &mut scores, 0, l as isize, 1,
        );
        let p = &mut probs[h * l * l..(h + 1) * l * l];
        for t in 0..l {
            let row = &scores[t * l..t * l + t + 1];
            let mut m = row[0];
            for &s in row {
                m = m.max(s);
            }
            let mut denom = T::ZERO;
            for (j, &s) in row.iter().enumerate() {
                let e = (s - m).exp();
                p[t * l + j] = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for j in 0..=t {
                p[t * l + j] *= inv;
            }
        }
        gemm(
            l, l, dh,
            T::ONE,
            p, 0, l as isize, 1,
            v.data(), off, d as isize, 1,
            T::ZERO,
            &mut out, off, d as isize, 1,
        );
    }
    Ok(with_node(
        vec![l, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        move || Op::CausalAttention { n_heads, probs },
    ))
}

/// Attention of a single query row over a fixed (non-differentiated) context
/// of cached keys/values plus the row's own key/value appended at the end.
pub fn context_attention<T: Scalar>(
    q: &Tensor<T>,
    k_self: &Tensor<T>,
    v_self: &Tensor<T>,
    ctx_k: Arc<Vec<T>>,
    ctx_v: Arc<Vec<T>>,
    ctx_len: usize,
    n_heads: usize,
) -> Result<Tensor<T>, TensorError> {
    let (rows, d) = q.dims2()?;
    if rows != 1 || k_self.shape() != q.shape() || v_self.shape() != q.shape() {
        return Err(TensorError::Dimension(
            "context attention expects single-row q/k/v of equal shape".into(),
        ));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Dimension(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    if ctx_k.len() != ctx_len * d || ctx_v.len() != ctx_len * d {
        return Err(TensorError::Dimension(
            "context buffers do not match ctx_len x d".into(),
        ));
    }
    let dh = d / n_heads;
    let alpha = T::ONE / T::from_usize(dh).sqrt();
    let n = ctx_len + 1;
    let mut probs = vec![T::ZERO; n_heads * n];
    let mut out = vec![T::ZERO; d];
    let mut scores = vec![T::ZERO; n];
    for h in 0..n_heads {
        let off = h * dh;
        let qh = &q.data()[off..off + dh];
        for (j, s) in scores.iter_mut().enumerate().take(ctx_len) {
            let key = &ctx_k[j * d + off..j * d + off + dh];
            let mut dot = T::ZERO;
            for c in 0..dh {
                dot += qh[c] * key[c];
            }
            *s = dot * alpha;
        }
        let mut dot = T::ZERO;
        for c in 0..dh {
            dot += qh[c] * k_self.data()[off + c];
        }
        scores[ctx_len] = dot * alpha;

        let mut m = scores[0];
        for &s in &scores {
            m = m.max(s);
        }
        let mut denom = T::ZERO;
        for (j, &s) in scores.iter().enumerate() {
            let e = (s - m).exp();
            probs[h * n + j] = e;
            denom += e;
        }
        let inv = T::ONE / denom;
        for j in 0..n {
            probs[h * n + j] *= inv;
        }

        let p = &probs[h * n..(h + 1) * n];
        for (j, &pj) in p.iter().enumerate().take(ctx_len) {
            let val = &ctx_v[j * d + off..j * d + off + dh];
            for c in 0..dh {
                out[off + c] += pj * val[c];
            }
        }
        for c in 0..dh {
            out[off + c] += p[ctx_len] * v_self.data()[off + c];
        }
    }
    Ok(with_node(
        vec![1, d],
        out,
        vec![q.clone(), k_self.clone(), v_self.clone()],
        move || Op::ContextAttention {
            n_heads,
            ctx_k,
            ctx_v,
            ctx_len,
            probs,
        },
    ))
}

pub fn slice_cols<T: Scalar>(
    x: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>, TensorError> {
    let (r, c) = x.dims2()?;
    if start + len > c {
        return Err(TensorError::Dimension(format!(
            "column slice {start}..{} exceeds {c}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
    }
    Ok(with_node(vec![r, len], out, vec![x.clone()], move || Op::SliceCols { start }))
}

pub fn slice_rows<T: Scalar>(
    x: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>, TensorError> {
    let (r, c) = x.dims2()?;
    if start + len > r {
        return Err(TensorError::Dimension(format!(
            "row slice {start}..{} exceeds {r}",
            start + len
        )));
    }
    let out = x.data()[start * c..(start + len) * c].to_vec();
    Ok(with_node(vec![len, c], out, vec![x.clone()], move || Op::SliceRows { start }))
}

/// Inverted-dropout mask multiply. The mask holds 0 or 1/(1-p) per element
/// and is drawn by the caller so the op itself stays deterministic.
pub fn dropout_mask<T: Scalar>(x: &Tensor<T>, mask: Vec<T>) -> Tensor<T> {
    assert_eq!(mask.len(), x.len(), "dropout mask length mismatch");
    let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    with_node(x.shape().to_vec(), out, vec![x.clone()], move || Op::DropoutMask { mask })
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = T::ZERO;
    for &v in x.data() {
        s += v;
    }
    with_node(vec![1], vec![s], vec![x.clone()], || Op::SumAll)
}

/// Mean negative log-likelihood of integer targets under row-wise softmax.
pub fn softmax_xent_mean<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n {
        return Err(TensorError::Dimension(format!(
            "{} targets for {n} rows",
            targets.len()
        )));
    }
    if n == 0 {
        return Err(TensorError::Contract("loss over zero rows".into()));
    }
    let mut probs = vec![T::ZERO; n * v];
    let mut total = T::ZERO;
    for r in 0..n {
        let t = targets[r];
        if t >= v {
            return Err(TensorError::IndexOutOfRange { index: t, extent: v });
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let mut m = row[0];
        for &z in row {
            m = m.max(z);
        }
        let mut denom = T::ZERO;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - m).exp();
            probs[r * v + j] = e;
            denom += e;
        }
        let inv = T::ONE / denom;
        for j in 0..v {
            probs[r * v + j] *= inv;
        }
        total += denom.ln() + m - row[t];
    }
    let loss = total / T::from_usize(n);
    let targets = targets.to_vec();
    Ok(with_node(vec![1], vec![loss], vec![logits.clone()], move || {
        Op::SoftmaxXentMean { targets, probs }
    }))
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

/// Mean element-wise binary cross-entropy between sigmoid(logits) and 0/1
/// targets, computed in the standard overflow-safe form.
pub fn sigmoid_bce_mean<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[T],
) -> Result<Tensor<T>, TensorError> {
    if targets.len() != logits.len() {
        return Err(TensorError::Dimension(format!(
            "{} targets for {} logits",
            targets.len(),
            logits.len()
        )));
    }
    if logits.is_empty() {
        return Err(TensorError::Contract("loss over zero elements".into()));
    }
    let mut total = T::ZERO;
    for (&z, &t) in logits.data().iter().zip(targets) {
        total += z.max(T::ZERO) - z * t + (-z.abs()).exp().ln_1p();
    }
    let loss = total / T::from_usize(logits.len());
    let targets = targets.to_vec();
    Ok(with_node(vec![1], vec![loss], vec![logits.clone()], move || {
        Op::SigmoidBceMean { targets }
    }))
}

/// Routes `grad_out` through the node that produced `out`, accumulating
/// gradients for every input that participates in differentiation.
pub(crate) fn accumulate_input_grads<T: Scalar>(
    out: &Tensor<T>,
    grad_out: &[T],
    sink: &mut GradMap<T>,
) {
    let node = out.node().expect("accumulate_input_grads on a leaf");
    let inputs = &node.inputs;
    match &node.op {
        Op::Matmul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (r, k) = (a.shape()[0], a.shape()[1]);
            let c = b.shape()[1];
            if a.requires_grad() {
                let da = sink.buf(a);
                gemm(
                    r, c, k,
                    T::ONE,
                    grad_out, 0, c as isize, 1,
                    b.data(), 0, 1, c as isize,
                    T::ONE,
                    da, 0, k as isize, 1,
                );
            }
            if b.requires_grad() {
                let db = sink.buf(b);
                gemm(
                    k, r, c,
                    T::ONE,
                    a.data(), 0, 1, k as isize,
                    grad_out, 0, c as isize, 1,
                    T::ONE,
                    db, 0, c as isize, 1,
                );
            }
        }
        Op::Add => {
            for t in inputs {
                if t.requires_grad() {
                    let g = sink.buf(t);
                    for (gi, &go) in g.iter_mut().zip(grad_out) {
                        *gi += go;
                    }
                }
            }
        }
        Op::AddBias => {
            let (a, bias) = (&inputs[0], &inputs[1]);
            let d = bias.len();
            if a.requires_grad() {
                let g = sink.buf(a);
                for (gi, &go) in g.iter_mut().zip(grad_out) {
                    *gi += go;
                }
            }
            if bias.requires_grad() {
                let g = sink.buf(bias);
                for (i, &go) in grad_out.iter().enumerate() {
                    g[i % d] += go;
                }
            }
        }
        Op::Scale(factor) => {
            let a = &inputs[0];
            if a.requires_grad() {
                let g = sink.buf(a);
                for (gi, &go) in g.iter_mut().zip(grad_out) {
                    *gi += go * *factor;
                }
            }
        }
        Op::SoftmaxLastDim => {
            let x = &inputs[0];
            if x.requires_grad() {
                let d = *out.shape().last().unwrap();
                let rows = out.len() / d;
                let y = out.data();
                let g = sink.buf(x);
                for r in 0..rows {
                    let mut dot = T::ZERO;
                    for j in 0..d {
                        dot += y[r * d + j] * grad_out[r * d + j];
                    }
                    for j in 0..d {
                        g[r * d + j] += y[r * d + j] * (grad_out[r * d + j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { xhat, inv_std } => {
            let (x, gain, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            let d = gain.len();
            let rows = out.len() / d;
            let inv_d = T::ONE / T::from_usize(d);
            if x.requires_grad() {
                let g = sink.buf(x);
                for r in 0..rows {
                    let mut mean_gy = T::ZERO;
                    let mut mean_gy_xhat = T::ZERO;
                    for j in 0..d {
                        let gy = grad_out[r * d + j] * gain.data()[j];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[r * d + j];
                    }
                    mean_gy *= inv_d;
                    mean_gy_xhat *= inv_d;
                    for j in 0..d {
                        let gy = grad_out[r * d + j] * gain.data()[j];
                        g[r * d + j] +=
                            inv_std[r] * (gy - mean_gy - xhat[r * d + j] * mean_gy_xhat);
                    }
                }
            }
            if gain.requires_grad() {
                let g = sink.buf(gain);
                for r in 0..rows {
                    for j in 0..d {
                        g[j] += grad_out[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if bias.requires_grad() {
                let g = sink.buf(bias);
                for r in 0..rows {
                    for j in 0..d {
                        g[j] += grad_out[r * d + j];
                    }
                }
            }
        }
        Op::Gelu => {
            let x = &inputs[0];
            if x.requires_grad() {
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                let g = sink.buf(x);
                for (i, &v) in x.data().iter().enumerate() {
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    g[i] += grad_out[i] * (gauss_cdf(v) + v * pdf);
                }
            }
        }
        Op::Embedding { ids } => {
            let table = &inputs[0];
            if table.requires_grad() {
                let d = table.shape()[1];
                let g = sink.buf(table);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += grad_out[row * d + j];
                    }
                }
            }
        }
        Op::Conv1dCausal => {
            let (x, kernel, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            let (t_len, c_in) = (x.shape()[0], x.shape()[1]);
            let (k, c_out) = (kernel.shape()[0], kernel.shape()[2]);
            if bias.requires_grad() {
                let g = sink.buf(bias);
                for t in 0..t_len {
                    for o in 0..c_out {
                        g[o] += grad_out[t * c_out + o];
                    }
                }
            }
            for j in 0..k {
                let shift = k - 1 - j;
                if shift >= t_len {
                    continue;
                }
                let m = t_len - shift;
                if x.requires_grad() {
                    let dx = sink.buf(x);
                    gemm(
                        m, c_out, c_in,
                        T::ONE,
                        grad_out, shift * c_out, c_out as isize, 1,
                        kernel.data(), j * c_in * c_out, 1, c_out as isize,
                        T::ONE,
                        dx, 0, c_in as isize, 1,
                    );
                }
                if kernel.requires_grad() {
                    let dk = sink.buf(kernel);
                    gemm(
                        c_in, m, c_out,
                        T::ONE,
                        x.data(), 0, 1, c_in as isize,
                        grad_out, shift * c_out, c_out as isize, 1,
                        T::ONE,
                        dk, j * c_in * c_out, c_out as isize, 1,
                    );
                }
            }
        }
        Op::CausalAttention { n_heads, probs } => {
            let (q, k, v) = (&inputs[0], &inputs[1], &inputs[2]);
            let (l, d) = (q.shape()[0], q.shape()[1]);
            let dh = d / n_heads;
            let alpha = T::ONE / T::from_usize(dh).sqrt();
            let mut dp = vec![T::ZERO; l * l];
            let mut ds = vec![T::ZERO; l * l];
            for h in 0..*n_heads {
                let off = h * dh;
                let p = &probs[h * l * l..(h + 1) * l * l];
                if v.requires_grad() {
                    let dv = sink.buf(v);
                    gemm(
                        l, l, dh,
                        T::ONE,
                        p, 0, 1, l as isize,
                        grad_out, off, d as isize, 1,
                        T::ONE,
                        dv, off, d as isize, 1,
                    );
                }
                if q.requires_grad() || k.requires_grad() {
                    gemm(
                        l, dh, l,
                        T::ONE,
                        grad_out, off, d as isize, 1,
                        v.data(), off, 1, d as isize,
                        T::ZERO,
                        &mut dp, 0, l as isize, 1,
                    );
                    for t in 0..l {
                        let mut dot = T::ZERO;
                        for j in 0..=t {
                            dot += p[t * l + j] * dp[t * l + j];
                        }
                        for j in 0..=t {
                            ds[t * l + j] = p[t * l + j] * (dp[t * l + j] - dot);
                        }
                        for j in t + 1..l {
                            ds[t * l + j] = T::ZERO;
                        }
                    }
                    if q.requires_grad() {
                        let dq = sink.buf(q);
                        gemm(
                            l, l, dh,
                            alpha,
                            &ds, 0, l as isize, 1,
                            k.data(), off, d as isize, 1,
                            T::ONE,
                            dq, off, d as isize, 1,
                        );
                    }
                    if k.requires_grad() {
                        let dk = sink.buf(k);
                        gemm(
                            l, l, dh,
                            alpha,
                            &ds, 0, 1, l as isize,
                            q.data(), off, d as isize, 1,
                            T::ONE,
                            dk, off, d as isize, 1,
                        );
                    }
                }
            }
        }
        Op::ContextAttention {
            n_heads,
            ctx_k,
            ctx_v,
            ctx_len,
            probs,
        } => {
            let (q, k_self, v_self) = (&inputs[0], &inputs[1], &inputs[2]);
            let d = q.shape()[1];
            let dh = d / n_heads;
            let alpha = T::ONE / T::from_usize(dh).sqrt();
            let n = ctx_len + 1;
            let mut dp = vec![T::ZERO; n];
            let mut ds = vec![T::ZERO; n];
            for h in 0..*n_heads {
                let off = h * dh;
                let p = &probs[h * n..(h + 1) * n];
                let go = &grad_out[off..off + dh];
                if v_self.requires_grad() {
                    let dv = sink.buf(v_self);
                    for c in 0..dh {
                        dv[off + c] += p[*ctx_len] * go[c];
                    }
                }
                if q.requires_grad() || k_self.requires_grad() {
                    for (j, dpj) in dp.iter_mut().enumerate().take(*ctx_len) {
                        let val = &ctx_v[j * d + off..j * d + off + dh];
                        let mut dot = T::ZERO;
                        for c in 0..dh {
                            dot += go[c] * val[c];
                        }
                        *dpj = dot;
                    }
                    let mut dot = T::ZERO;
                    for c in 0..dh {
                        dot += go[c] * v_self.data()[off + c];
                    }
                    dp[*ctx_len] = dot;

                    let mut pdot = T::ZERO;
                    for j in 0..n {
                        pdot += p[j] * dp[j];
                    }
                    for j in 0..n {
                        ds[j] = p[j] * (dp[j] - pdot);
                    }
                    if q.requires_grad() {
                        let dq = sink.buf(q);
                        for (j, &dsj) in ds.iter().enumerate().take(*ctx_len) {
                            let key = &ctx_k[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                dq[off + c] += alpha * dsj * key[c];
                            }
                        }
                        for c in 0..dh {
                            dq[off + c] += alpha * ds[*ctx_len] * k_self.data()[off + c];
                        }
                    }
                    if k_self.requires_grad() {
                        let dk = sink.buf(k_self);
                        for c in 0..dh {
                            dk[off + c] += alpha * ds[*ctx_len] * q.data()[off + c];
                        }
                    }
                }
            }
        }
        Op::SliceCols { start } => {
            let x = &inputs[0];
            if x.requires_grad() {
                let c = x.shape()[1];
                let len = out.shape()[1];
                let g = sink.buf(x);
                for (i, row) in grad_out.chunks_exact(len).enumerate() {
                    for (j, &go) in row.iter().enumerate() {
                        g[i * c + start + j] += go;
                    }
                }
            }
        }
        Op::SliceRows { start } => {
            let x = &inputs[0];
            if x.requires_grad() {
                let c = x.shape()[1];
                let g = sink.buf(x);
                for (i, &go) in grad_out.iter().enumerate() {
                    g[start * c + i] += go;
                }
            }
        }
        Op::DropoutMask { mask } => {
            let x = &inputs[0];
            if x.requires_grad() {
                let g = sink.buf(x);
                for i in 0..mask.len() {
                    g[i] += grad_out[i] * mask[i];
                }
            }
        }
        Op::SumAll => {
            let x = &inputs[0];
            if x.requires_grad() {
                let go = grad_out[0];
                let g = sink.buf(x);
                for gi in g.iter_mut() {
                    *gi += go;
                }
            }
        }
        Op::SoftmaxXentMean { targets, probs } => {
            let logits = &inputs[0];
            if logits.requires_grad() {
                let v = logits.shape()[1];
                let n = targets.len();
                let w = grad_out[0] / T::from_usize(n);
                let g = sink.buf(logits);
                for r in 0..n {
                    for j in 0..v {
                        let indicator = if j == targets[r] { T::ONE } else { T::ZERO };
                        g[r * v + j] += w * (probs[r * v + j] - indicator);
                    }
                }
            }
        }
        Op::SigmoidBceMean { targets } => {
            let logits = &inputs[0];
            if logits.requires_grad() {
                let w = grad_out[0] / T::from_usize(targets.len());
                let g = sink.buf(logits);
                for (i, (&z, &t)) in logits.data().iter().zip(targets).enumerate() {
                    g[i] += w * (sigmoid(z) - t);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data)
    }

    #[test]
    fn matmul_identity_preserves_operand() {
        let eye = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let m = t2(2, 2, vec![3.0, -1.5, 2.0, 7.25]);
        let out = matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_hand_sum() {
        let a = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, vec![1.0, 1.0]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 2, vec![0.0; 4]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_rows() {
        let x = Tensor::new(vec![3], vec![0.0f64, 0.0, 0.0]);
        let y = softmax_lastdim(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::new(vec![2], vec![1000.0f64, 0.0]);
        let y = softmax_lastdim(&x).unwrap();
        assert!(y.data()[0] > 0.999999);
        assert!(y.data()[1] < 1e-6);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t2(
            4,
            6,
            (0..24).map(|i| ((i * 37 % 11) as f64) - 5.0).collect(),
        );
        let y = softmax_lastdim(&x).unwrap();
        for r in 0..4 {
            let s: f64 = y.data()[r * 6..(r + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(y.data()[r * 6..(r + 1) * 6].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_vector_maps_to_zero() {
        let x = Tensor::new(vec![4], vec![5.0f64; 4]);
        let gain = Tensor::new(vec![4], vec![1.0; 4]);
        let bias = Tensor::new(vec![4], vec![0.0; 4]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = Tensor::new(vec![2], vec![1.0f64, 3.0]);
        let gain = Tensor::new(vec![2], vec![1.0; 2]);
        let bias = Tensor::new(vec![2], vec![0.0; 2]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn conv_k1_equals_matmul_plus_bias_exactly() {
        let x = t2(5, 3, (0..15).map(|i| (i as f64 * 0.7).sin()).collect());
        let w = t2(3, 4, (0..12).map(|i| (i as f64 * 0.3).cos()).collect());
        let kernel = Tensor::new(vec![1, 3, 4], w.data().to_vec());
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]);
        let conv = conv1d_causal(&x, &kernel, &bias).unwrap();
        let mm = add_bias(&matmul(&x, &w).unwrap(), &bias).unwrap();
        assert_eq!(conv.data(), mm.data());
    }

    #[test]
    fn conv_impulse_support_is_causal() {
        let mut xin = vec![0.0f64; 6 * 2];
        xin[0] = 1.0;
        xin[1] = -1.0;
        let x = t2(6, 2, xin);
        let kernel = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 + 1.0).collect());
        let bias = Tensor::new(vec![2], vec![0.0; 2]);
        let y = conv1d_causal(&x, &kernel, &bias).unwrap();
        for t in 0..6 {
            let nonzero = y.data()[t * 2..(t + 1) * 2].iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, t <= 2, "impulse response leaked to t={t}");
        }
    }

    #[test]
    fn conv_future_perturbation_is_invisible() {
        let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin()).collect();
        let mut bumped = base.clone();
        bumped[4 * 2] += 3.0;
        bumped[4 * 2 + 1] -= 1.0;
        let kernel = Tensor::new(vec![3, 2, 2], (0..12).map(|i| (i as f64 * 0.21).cos()).collect());
        let bias = Tensor::new(vec![2], vec![0.5, -0.5]);
        let ya = conv1d_causal(&t2(6, 2, base), &kernel, &bias).unwrap();
        let yb = conv1d_causal(&t2(6, 2, bumped), &kernel, &bias).unwrap();
        assert_eq!(&ya.data()[..4 * 2], &yb.data()[..4 * 2]);
        assert_ne!(&ya.data()[4 * 2..], &yb.data()[4 * 2..]);
    }

    #[test]
    fn embedding_gathers_rows_and_checks_bounds() {
        let table = t2(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = embedding_lookup(&table, &[0, 2]).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert!(matches!(
            embedding_lookup(&table, &[3]),
            Err(TensorError::IndexOutOfRange { index: 3, extent: 3 })
        ));
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let z = Tensor::new(vec![2, 3], vec![0.0f64; 6]);
        let loss = sigmoid_bce_mean(&z, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn xent_uniform_logits_is_ln_vocab() {
        let z = Tensor::new(vec![2, 256], vec![0.0f64; 512]);
        let loss = softmax_xent_mean(&z, &[7, 200]).unwrap();
        assert!((loss.item() - 256.0f64.ln()).abs() < 1e-12);
    }
}

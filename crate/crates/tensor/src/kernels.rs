//! Plain-slice numeric kernels shared by the tape operations.
//!
//! Every kernel reduces each output element in a fixed order that does not
//! depend on how many rows are processed together, so batched and one-at-a-time
//! evaluation agree bit for bit.

use crate::error::{Result, TensorError};

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorise while keeping
    // a fixed reduction order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn dot3(a: &[f64], m: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), z) in a.iter().zip(m).zip(b) {
        s += x * y * z;
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer normalisation with population variance. Returns
/// `(output, normalised input, reciprocal std per row)`.
pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut rstd = vec![0.0; rows];
    let inv_n = 1.0 / cols as f64;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() * inv_n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (xr[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, rstd)
}

/// Gradients of [`layer_norm_forward`] with respect to input, gain and bias.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    rows: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * cols];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let inv_n = 1.0 / cols as f64;
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        let xr = &xhat[r * cols..(r + 1) * cols];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..cols {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xr[c];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        for c in 0..cols {
            dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

/// Row-wise softmax with max subtraction. `mask[i] == false` removes a position.
pub fn softmax_rows(x: &[f64], mask: Option<&[bool]>, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let keep = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
        let mut mx = f64::NEG_INFINITY;
        for (c, &v) in xr.iter().enumerate() {
            if keep(c) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(TensorError::AllMasked { row: r });
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for c in 0..cols {
            if keep(c) {
                let e = (xr[c] - mx).exp();
                orow[c] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Backward of a row softmax given its output `y`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let s = dot(yr, dyr);
        for c in 0..cols {
            dx[r * cols + c] = yr[c] * (dyr[c] - s);
        }
    }
    dx
}

/// One attention block: a contiguous run of rows attending among themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGroup {
    pub start: usize,
    pub len: usize,
    /// `false` marks a key position that may not be attended to (padding).
    pub key_mask: Option<Vec<bool>>,
    /// For each `(query, key)` pair in row-major `len × len` order, the row of
    /// the modulation matrix to use, or `None` for identity modulation.
    pub modulation: Option<Vec<Option<u32>>>,
}

impl AttentionGroup {
    pub fn dense(start: usize, len: usize) -> Self {
        AttentionGroup { start, len, key_mask: None, modulation: None }
    }

    #[inline]
    fn key_ok(&self, j: usize) -> bool {
        self.key_mask.as_ref().map_or(true, |m| m[j])
    }

    #[inline]
    fn mod_row(&self, i: usize, j: usize) -> Option<usize> {
        self.modulation.as_ref().and_then(|m| m[i * self.len + j]).map(|p| p as usize)
    }
}

/// Block-diagonal multi-head attention layout over a stacked row matrix.
///
/// The modulation vectors are `d` wide and are sliced per head exactly like
/// the query and key projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub groups: Vec<AttentionGroup>,
}

impl AttentionLayout {
    pub fn total_rows(&self) -> usize {
        self.groups.last().map_or(0, |g| g.start + g.len)
    }

    pub fn validate(&self, rows: usize, d: usize, mod_rows: Option<usize>) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(TensorError::shape(
                "attention",
                format!("width {d} not divisible by {} heads", self.heads),
            ));
        }
        let mut next = 0;
        for (gi, g) in self.groups.iter().enumerate() {
            if g.start != next || g.len == 0 {
                return Err(TensorError::shape(
                    "attention",
                    format!("group {gi} does not continue at row {next}"),
                ));
            }
            next += g.len;
            if let Some(m) = &g.key_mask {
                if m.len() != g.len {
                    return Err(TensorError::shape("attention", format!("group {gi} key mask length")));
                }
            }
            if let Some(m) = &g.modulation {
                if m.len() != g.len * g.len {
                    return Err(TensorError::shape("attention", format!("group {gi} modulation map size")));
                }
                match mod_rows {
                    None if m.iter().any(Option::is_some) => {
                        return Err(TensorError::shape(
                            "attention",
                            "modulation rows referenced without a modulation matrix",
                        ))
                    }
                    Some(n) if m.iter().flatten().any(|&p| p as usize >= n) => {
                        return Err(TensorError::shape("attention", "modulation row out of range"))
                    }
                    _ => {}
                }
            }
        }
        if next != rows {
            return Err(TensorError::shape(
                "attention",
                format!("groups cover {next} rows, input has {rows}"),
            ));
        }
        Ok(())
    }

    fn prob_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.groups.len() + 1);
        let mut acc = 0;
        for g in &self.groups {
            off.push(acc);
            acc += self.heads * g.len * g.len;
        }
        off.push(acc);
        off
    }
}

/// Pre-softmax scores `q_i · diag(m_ij) · k_jᵀ / sqrt(d_head)` for every group
/// and head, laid out as `[group][head][i][j]`. Masked keys hold `-inf`.
pub fn attention_scores(
    q: &[f64],
    k: &[f64],
    modulation: Option<&[f64]>,
    d: usize,
    layout: &AttentionLayout,
) -> Vec<f64> {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let off = layout.prob_offsets();
    let mut scores = vec![0.0; off[layout.groups.len()]];
    for (gi, g) in layout.groups.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            let base = off[gi] + h * g.len * g.len;
            for i in 0..g.len {
                let qi = &q[(g.start + i) * d + c0..(g.start + i) * d + c0 + dh];
                for j in 0..g.len {
                    let slot = base + i * g.len + j;
                    if !g.key_ok(j) {
                        scores[slot] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &k[(g.start + j) * d + c0..(g.start + j) * d + c0 + dh];
                    let s = match (g.mod_row(i, j), modulation) {
                        (Some(p), Some(m)) => dot3(qi, &m[p * d + c0..p * d + c0 + dh], kj),
                        _ => dot(qi, kj),
                    };
                    scores[slot] = s * scale;
                }
            }
        }
    }
    scores
}

/// Attention forward pass. Returns `(output, probabilities)`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    modulation: Option<&[f64]>,
    d: usize,
    layout: &AttentionLayout,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let heads = layout.heads;
    let dh = d / heads;
    let off = layout.prob_offsets();
    let mut probs = attention_scores(q, k, modulation, d, layout);
    let rows = layout.total_rows();
    let mut out = vec![0.0; rows * d];
    for (gi, g) in layout.groups.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            let base = off[gi] + h * g.len * g.len;
            for i in 0..g.len {
                let row = &mut probs[base + i * g.len..base + (i + 1) * g.len];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(TensorError::AllMasked { row: g.start + i });
                }
                let mut sum = 0.0;
                for p in row.iter_mut() {
                    *p = if *p == f64::NEG_INFINITY { 0.0 } else { (*p - mx).exp() };
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
                let orow = &mut out[(g.start + i) * d + c0..(g.start + i) * d + c0 + dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[(g.start + j) * d + c0..(g.start + j) * d + c0 + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv, dmodulation)` of [`attention_forward`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    modulation: Option<&[f64]>,
    probs: &[f64],
    dout: &[f64],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let off = layout.prob_offsets();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dm = modulation.map(|m| vec![0.0; m.len()]);
    let mut dp = Vec::new();
    for (gi, g) in layout.groups.iter().enumerate() {
        dp.resize(g.len, 0.0);
        for h in 0..heads {
            let c0 = h * dh;
            let base = off[gi] + h * g.len * g.len;
            for i in 0..g.len {
                let ri = (g.start + i) * d + c0;
                let prow = &probs[base + i * g.len..base + (i + 1) * g.len];
                let doi = &dout[ri..ri + dh];
                let mut s = 0.0;
                for j in 0..g.len {
                    let p = prow[j];
                    if p == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let rj = (g.start + j) * d + c0;
                    dp[j] = dot(doi, &v[rj..rj + dh]);
                    s += p * dp[j];
                    for (dvx, x) in dv[rj..rj + dh].iter_mut().zip(doi) {
                        *dvx += p * x;
                    }
                }
                for j in 0..g.len {
                    let p = prow[j];
                    if p == 0.0 {
                        continue;
                    }
                    let ds = p * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (g.start + j) * d + c0;
                    match (g.mod_row(i, j), modulation) {
                        (Some(pr), Some(m)) => {
                            let mo = pr * d + c0;
                            let dmv = dm.as_mut().expect("modulation gradient buffer");
                            for c in 0..dh {
                                let mc = m[mo + c];
                                let qc = q[ri + c];
                                let kc = k[rj + c];
                                dq[ri + c] += ds * mc * kc;
                                dk[rj + c] += ds * mc * qc;
                                dmv[mo + c] += ds * qc * kc;
                            }
                        }
                        _ => {
                            for c in 0..dh {
                                dq[ri + c] += ds * k[rj + c];
                                dk[rj + c] += ds * q[ri + c];
                            }
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv, dm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn transposed_products_agree_with_plain_product() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored row-major is 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ stored row-major is 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        matmul_at_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn attention_rows_are_batch_invariant() {
        let d = 4;
        let q: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let k: Vec<f64> = (0..24).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
        let v: Vec<f64> = (0..24).map(|i| ((i * 3 % 7) as f64 - 3.0) / 2.0).collect();
        let both = AttentionLayout {
            heads: 2,
            groups: vec![AttentionGroup::dense(0, 3), AttentionGroup::dense(3, 3)],
        };
        let (out, _) = attention_forward(&q, &k, &v, None, d, &both).unwrap();
        let second = AttentionLayout { heads: 2, groups: vec![AttentionGroup::dense(0, 3)] };
        let (out2, _) = attention_forward(&q[12..], &k[12..], &v[12..], None, d, &second).unwrap();
        assert_eq!(&out[12..], &out2[..]);
    }
}

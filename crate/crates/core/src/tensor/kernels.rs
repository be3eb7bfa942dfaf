//! Raw numeric kernels over flat row-major buffers.

use super::{broadcast_shape, strides};

/// Batch layout for a broadcast matmul `[.., m, k] x [.., k, n]`.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a batch offset, b batch offset) for every output batch, in elements.
    pub offsets: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        if a.len() < 2 || b.len() < 2 {
            return None;
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return None;
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let batch = broadcast_shape(a_batch, b_batch)?;
        let mut offsets = batch_offsets(a_batch, b_batch, &batch, m * k, k * n);
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        // A shared right operand over a contiguous left batch is one tall matmul.
        let tall = offsets
            .iter()
            .enumerate()
            .all(|(i, &(oa, ob))| ob == 0 && oa == i * m * k);
        let rows = if tall && offsets.len() > 1 {
            let rows = offsets.len() * m;
            offsets = vec![(0, 0)];
            rows
        } else {
            m
        };
        Some(Self {
            m: rows,
            k,
            n,
            out_shape,
            offsets,
        })
    }
}

fn batch_offsets(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    a_block: usize,
    b_block: usize,
) -> Vec<(usize, usize)> {
    let count: usize = out.iter().product();
    let rank = out.len();
    let eff = |shape: &[usize]| {
        let lead = rank - shape.len();
        let st = strides(shape);
        let mut e = vec![0usize; rank];
        for (i, &d) in shape.iter().enumerate() {
            if d != 1 {
                e[lead + i] = st[i];
            }
        }
        e
    };
    let (ea, eb) = (eff(a), eff(b));
    let mut idx = vec![0usize; rank];
    let mut result = Vec::with_capacity(count);
    for _ in 0..count {
        let oa: usize = idx.iter().zip(&ea).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&eb).map(|(i, s)| i * s).sum();
        result.push((oa * a_block, ob * b_block));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    result
}

pub(crate) fn matmul(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.offsets.len() * m * n];
    for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        let a = &a[oa..oa + m * k];
        let b = &b[ob..ob + k * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    out
}

/// Accumulates `dA += dC · Bᵀ`.
pub(crate) fn matmul_grad_a(plan: &MatmulPlan, dc: &[f64], b: &[f64], da: &mut [f64]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut bt = vec![0.0; k * n];
    let mut last_b = usize::MAX;
    for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
        if ob != last_b {
            let b = &b[ob..ob + k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            last_b = ob;
        }
        let dc = &dc[bi * m * n..(bi + 1) * m * n];
        let da = &mut da[oa..oa + m * k];
        for (darow, dcrow) in da.chunks_exact_mut(k).zip(dc.chunks_exact(n)) {
            for (&g, btrow) in dcrow.iter().zip(bt.chunks_exact(k)) {
                if g == 0.0 {
                    continue;
                }
                for (d, &bv) in darow.iter_mut().zip(btrow) {
                    *d += g * bv;
                }
            }
        }
    }
}

/// Accumulates `dB += Aᵀ · dC`.
pub(crate) fn matmul_grad_b(plan: &MatmulPlan, dc: &[f64], a: &[f64], db: &mut [f64]) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
        let dc = &dc[bi * m * n..(bi + 1) * m * n];
        let a = &a[oa..oa + m * k];
        let db = &mut db[ob..ob + k * n];
        for i in 0..m {
            let dcrow = &dc[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                    *d += av * g;
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` per row.
pub(crate) fn softmax_rows_grad(y: &[f64], dy: &[f64], width: usize, dx: &mut [f64]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let width = gain.len();
    let rows = x.len() / width;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std[r] = rstd;
        for j in 0..width {
            let xh = (row[j] - mean) * rstd;
            normalized[r * width + j] = xh;
            out[r * width + j] = xh * gain[j] + bias[j];
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

pub(crate) fn layer_norm_grad(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let width = gain.len();
    let rows = dy.len() / width;
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..width {
                dg[j] += dy[r * width + j] * cache.normalized[r * width + j];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for j in 0..width {
                db[j] += dy[r * width + j];
            }
        }
    }
    if let Some(dx) = dx {
        let w = width as f64;
        for r in 0..rows {
            let xh = &cache.normalized[r * width..(r + 1) * width];
            let g = &dy[r * width..(r + 1) * width];
            let mut sum_gy = 0.0;
            let mut sum_gy_xh = 0.0;
            for j in 0..width {
                let gy = g[j] * gain[j];
                sum_gy += gy;
                sum_gy_xh += gy * xh[j];
            }
            let rstd = cache.inv_std[r];
            for j in 0..width {
                let gy = g[j] * gain[j];
                dx[r * width + j] += rstd * (gy - sum_gy / w - xh[j] * sum_gy_xh / w);
            }
        }
    }
}

/// Index of each output element in the input buffer for an axis permutation.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            offset += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// Splits a shape around `axis` into (outer count, axis length, inner block).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

//! Batched matrix-multiply kernels. Each output row is produced by exactly
//! one thread with a fixed left-to-right accumulation order, so the parallel
//! and sequential paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Shapes and layout for one batched multiply `C = op(A) * op(B)`.
///
/// Logical shapes are `A: p x q`, `B: q x r`, `C: p x r` per batch; the
/// transpose flags describe the storage layout of the operands. A non-batched
/// operand (2-D weight) is shared across all batches.
#[derive(Debug, Clone, Copy)]
pub struct MatmulSpec {
    pub batch: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub trans_a: bool,
    pub trans_b: bool,
}

fn compute_row(spec: &MatmulSpec, a: &[f64], b: &[f64], g: usize, out_row: &mut [f64]) {
    let MatmulSpec { p, q, r, .. } = *spec;
    let batch = g / p;
    let i = g % p;
    let a_off = if spec.a_batched { batch * p * q } else { 0 };
    let b_off = if spec.b_batched { batch * q * r } else { 0 };
    out_row.fill(0.0);
    match (spec.trans_a, spec.trans_b) {
        (false, false) => {
            for k in 0..q {
                let av = a[a_off + i * q + k];
                if av != 0.0 {
                    let b_row = &b[b_off + k * r..b_off + (k + 1) * r];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            let a_row = &a[a_off + i * q..a_off + (i + 1) * q];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[b_off + j * q..b_off + (j + 1) * q];
                *o = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            }
        }
        (true, false) => {
            for k in 0..q {
                let av = a[a_off + k * p + i];
                if av != 0.0 {
                    let b_row = &b[b_off + k * r..b_off + (k + 1) * r];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = (0..q).map(|k| a[a_off + k * p + i] * b[b_off + j * q + k]).sum();
            }
        }
    }
}

pub fn matmul_seq(spec: &MatmulSpec, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), spec.batch * spec.p * spec.r);
    for (g, out_row) in out.chunks_mut(spec.r).enumerate() {
        compute_row(spec, a, b, g, out_row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(spec: &MatmulSpec, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), spec.batch * spec.p * spec.r);
    out.par_chunks_mut(spec.r).enumerate().for_each(|(g, out_row)| {
        compute_row(spec, a, b, g, out_row);
    });
}

/// Dispatch used by the autodiff graph: parallel when the feature is on and
/// the problem is large enough to amortize the fork.
pub fn matmul(spec: &MatmulSpec, a: &[f64], b: &[f64], out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        if spec.batch * spec.p * spec.q * spec.r >= 1 << 14 {
            matmul_par(spec, a, b, out);
            return;
        }
    }
    matmul_seq(spec, a, b, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(spec: &MatmulSpec, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; spec.batch * spec.p * spec.r];
        for batch in 0..spec.batch {
            let a_off = if spec.a_batched { batch * spec.p * spec.q } else { 0 };
            let b_off = if spec.b_batched { batch * spec.q * spec.r } else { 0 };
            for i in 0..spec.p {
                for j in 0..spec.r {
                    let mut acc = 0.0;
                    for k in 0..spec.q {
                        let av = if spec.trans_a {
                            a[a_off + k * spec.p + i]
                        } else {
                            a[a_off + i * spec.q + k]
                        };
                        let bv = if spec.trans_b {
                            b[b_off + j * spec.q + k]
                        } else {
                            b[b_off + k * spec.r + j]
                        };
                        acc += av * bv;
                    }
                    out[batch * spec.p * spec.r + i * spec.r + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn all_transpose_layouts_match_naive() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..2 * 4 * 5).map(|i| i as f64 * 0.11 + 1.0).collect();
        for &trans_a in &[false, true] {
            for &trans_b in &[false, true] {
                let spec = MatmulSpec {
                    batch: 2,
                    p: 3,
                    q: 4,
                    r: 5,
                    a_batched: true,
                    b_batched: true,
                    trans_a,
                    trans_b,
                };
                let mut out = vec![0.0; 2 * 3 * 5];
                matmul_seq(&spec, &a, &b, &mut out);
                let want = naive(&spec, &a, &b);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "layout ({trans_a},{trans_b})");
                }
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let spec = MatmulSpec {
            batch: 3,
            p: 17,
            q: 23,
            r: 13,
            a_batched: true,
            b_batched: false,
            trans_a: false,
            trans_b: false,
        };
        let a: Vec<f64> = (0..3 * 17 * 23).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..23 * 13).map(|i| (i as f64).cos()).collect();
        let mut s = vec![0.0; 3 * 17 * 13];
        let mut p = vec![0.0; 3 * 17 * 13];
        matmul_seq(&spec, &a, &b, &mut s);
        matmul_par(&spec, &a, &b, &mut p);
        assert_eq!(s, p);
    }
}

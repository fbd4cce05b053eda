use super::Scalar;
use crate::exec;

/// Output rows per parallel gemm task.
const GEMM_ROW_BLOCK: usize = 64;

/// `out = op(a)·op(b)` where `op` optionally transposes. `a` is stored as
/// `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
) {
    gemm_rows(m, k, n, a, trans_a, b, trans_b, out, T::zero());
}

/// `out += op(a)·op(b)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
) {
    gemm_rows(m, k, n, a, trans_a, b, trans_b, out, T::one());
}

// Each output element is accumulated over k in the same order no matter how
// the rows are split, so the parallel and sequential paths agree bitwise.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
    beta: T,
) {
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let big = m * n * k >= 1 << 18 && m > GEMM_ROW_BLOCK;
    if !big || !exec::is_parallel() {
        T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
        return;
    }
    exec::rows_mut(out, GEMM_ROW_BLOCK * n, |blk, chunk| {
        let r0 = blk * GEMM_ROW_BLOCK;
        let rows = chunk.len() / n;
        let a_off = if trans_a { r0 } else { r0 * k };
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            &a[a_off..],
            rsa,
            csa,
            b,
            rsb,
            csb,
            beta,
            chunk,
            n as isize,
            1,
        );
    });
}

/// Numerically stabilized softmax over each `n`-sized row, in place.
pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize) {
    exec::rows_mut(x, n, |_, row| softmax_row(row));
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `log(sum(exp(row)))`, stabilized.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_operands_match_naive() {
        let (m, k, n) = (130, 7, 300);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut out = vec![0.0; m * n];
            matmul_into(m, k, n, aa, ta, bb, tb, &mut out);
            assert_eq!(out, want, "trans_a={ta} trans_b={tb}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (m, k, n) = (257, 33, 129);
        let a: Vec<f32> = (0..m * k).map(|i| ((i as f32) * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i as f32) * 0.11).cos()).collect();
        let mut par = vec![0.0; m * n];
        matmul_into(m, k, n, &a, false, &b, false, &mut par);
        let mut seq = vec![0.0; m * n];
        run_sequential(|| matmul_into(m, k, n, &a, false, &b, false, &mut seq));
        assert_eq!(par, seq);
    }

    fn run_sequential(f: impl FnOnce()) {
        // Only this test flips the switch; results are mode-independent, so
        // concurrently running tests are unaffected either way.
        exec::set_sequential(true);
        f();
        exec::set_sequential(false);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let mut x = vec![1.0f64, 2.0, 3.0];
        softmax_rows(&mut x, 3);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in x.iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }
}

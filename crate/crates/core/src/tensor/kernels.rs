//! Dense matrix product. Every output element is accumulated over the inner
//! index in ascending order, independent of its row or column position, so
//! permuting rows of an input permutes the output bit-exactly.

/// Row-major view of a matrix stored in a flat slice, possibly transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after transposition.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn materialize(&self) -> Vec<f64> {
        let (r, c) = (self.rows, self.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `c` dense row-major.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let at;
    let av = if a.transposed {
        at = a.materialize();
        &at[..]
    } else {
        &a.data[..m * k]
    };
    let bt;
    let bv = if b.transposed {
        bt = b.materialize();
        &bt[..]
    } else {
        &b.data[..k * n]
    };
    gemm_nn(av, bv, c, m, k, n);
}

const MR: usize = 4;
const NR: usize = 8;

/// `c += a·b` for row-major `a: [m × k]`, `b: [k × n]`, blocked into
/// `MR × NR` register tiles; the inner index is never split.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let x = a[(i + r) * k + p];
                    for (cv, bv) in row.iter_mut().zip(brow) {
                        *cv += x * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
        if n_main < n {
            edge(a, b, c, i..i + MR, n_main..n, k, n);
        }
    }
    if m_main < m {
        edge(a, b, c, m_main..m, 0..n, k, n);
    }
}

fn edge(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n + cols.start..i * n + cols.end];
        for (p, &x) in arow.iter().enumerate() {
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += x * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn close(x: &[f64], y: &[f64]) -> bool {
        x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-12)
    }

    #[test]
    fn matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let expect = naive(&a, &b, 2, 3, 4);
        let mut c = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut c, false);
        assert!(close(&c, &expect));

        // aᵀ stored as 3x2, bᵀ stored as 4x3
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        for (lhs, rhs) in [
            (MatRef::new(&at, 3, 2).t(), MatRef::new(&b, 3, 4)),
            (MatRef::new(&a, 2, 3), MatRef::new(&bt, 4, 3).t()),
            (MatRef::new(&at, 3, 2).t(), MatRef::new(&bt, 4, 3).t()),
        ] {
            let mut c2 = vec![9.0; 8];
            gemm(lhs, rhs, &mut c2, false);
            assert!(close(&c2, &expect));
            gemm(lhs, rhs, &mut c2, true);
            let doubled: Vec<f64> = expect.iter().map(|v| 2.0 * v).collect();
            assert!(close(&c2, &doubled));
        }
    }
}

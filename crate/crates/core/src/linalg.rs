//! Dense complex linear algebra on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

/// Relative singular-value threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-8;

pub fn det(m: &DMatrix<C64>) -> C64 {
    if m.nrows() == 0 {
        return C64::new(1.0, 0.0);
    }
    m.clone().lu().determinant()
}

pub fn solve(m: &DMatrix<C64>, b: &DVector<C64>) -> Option<DVector<C64>> {
    m.clone().lu().solve(b)
}

pub fn singular_values(m: &DMatrix<C64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn rank(m: &DMatrix<C64>, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|v| **v > rel_tol * top).count(),
        _ => 0,
    }
}

/// Greedy pivoted Gram–Schmidt row selection: returns indices of `rank`
/// linearly independent rows, picking the largest remaining residual first.
pub fn select_rows(m: &DMatrix<C64>, rel_tol: f64) -> Vec<usize> {
    let rows: Vec<DVector<C64>> = (0..m.nrows()).map(|i| m.row(i).transpose()).collect();
    let top = rows.iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mut residual = rows.clone();
    let mut basis: Vec<DVector<C64>> = Vec::new();
    let mut chosen = Vec::new();
    loop {
        let best = (0..residual.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| (i, residual[i].norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((i, nrm)) = best else { break };
        if top == 0.0 || nrm <= rel_tol * top {
            break;
        }
        let q = &residual[i] / C64::new(nrm, 0.0);
        chosen.push(i);
        for r in residual.iter_mut() {
            let proj = q.dotc(r);
            *r -= &q * proj;
        }
        basis.push(q);
    }
    chosen.sort_unstable();
    chosen
}

/// Orthonormal basis (as columns) of the kernel of `m`.
pub fn null_space(m: &DMatrix<C64>, rel_tol: f64) -> DMatrix<C64> {
    let (r, d) = m.shape();
    if d == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut sq = DMatrix::<C64>::zeros(r.max(d), d);
    sq.view_mut((0, 0), (r, d)).copy_from(m);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cols: Vec<DVector<C64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| top == 0.0 || **s <= rel_tol * top)
        .map(|(i, _)| vt.row(i).adjoint())
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(d, 0);
    }
    DMatrix::from_columns(&cols)
}

/// `A(s) = (1-s)·(1/i)·H + s·I`.
pub fn homotopy(h: &DMatrix<C64>, s: f64) -> DMatrix<C64> {
    let k = h.nrows();
    let mi = C64::new(0.0, -1.0) * (1.0 - s);
    h.map(|v| v * mi) + DMatrix::<C64>::identity(k, k) * C64::new(s, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn determinant_and_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        assert!((det(&m) - c(-1.0, 0.0)).norm() < 1e-15);
        let x = solve(&m, &DVector::from_vec(vec![c(2.0, 0.0), c(1.0, 1.0)])).unwrap();
        assert!((x[0] - c(1.0, 1.0)).norm() < 1e-14 && (x[1] - c(1.0, -1.0)).norm() < 1e-14);
        assert_eq!(det(&DMatrix::<C64>::zeros(0, 0)), c(1.0, 0.0));
    }

    #[test]
    fn rank_and_row_selection() {
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(2.0, 0.0), c(0.0, 1.0), c(0.0, 0.0)],
        );
        assert_eq!(rank(&m, RANK_TOL), 2);
        assert_eq!(select_rows(&m, RANK_TOL), vec![0, 2]);
        assert_eq!(rank(&DMatrix::<C64>::zeros(2, 3), RANK_TOL), 0);
        assert!(select_rows(&DMatrix::<C64>::zeros(2, 3), RANK_TOL).is_empty());
    }

    #[test]
    fn kernel_basis() {
        let m = DMatrix::from_row_slice(1, 3, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let k = null_space(&m, RANK_TOL);
        assert_eq!(k.ncols(), 2);
        assert!((&m * &k).norm() < 1e-14);
        assert_eq!(null_space(&DMatrix::<C64>::identity(2, 2), RANK_TOL).ncols(), 0);
    }
}

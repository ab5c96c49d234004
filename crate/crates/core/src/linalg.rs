//! Small dense helpers shared by the dictionary and shrinkage code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD `x = u diag(sigma) vᵀ` with `sigma` sorted nonincreasing.
/// `u` is `rows x c`, `v` is `cols x c`, `c = min(rows, cols)`.
pub(crate) fn sorted_svd(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = x.shape();
    let c = rows.min(cols);
    if c == 0 {
        return (DMatrix::zeros(rows, 0), Vec::new(), DMatrix::zeros(cols, 0));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("requested u");
    let v_t = svd.v_t.expect("requested v_t");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let mut uo = DMatrix::zeros(rows, c);
    let mut vo = DMatrix::zeros(cols, c);
    let mut sigma = Vec::with_capacity(c);
    for (dst, &src) in order.iter().enumerate() {
        uo.set_column(dst, &u.column(src));
        vo.set_column(dst, &v_t.row(src).transpose());
        sigma.push(s[src].max(0.0));
    }
    (uo, sigma, vo)
}

/// Singular values only, nonincreasing; about three times cheaper than
/// [`sorted_svd`].
pub(crate) fn sorted_singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    if x.nrows().min(x.ncols()) == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = x.clone().svd(false, false).singular_values.iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// nonincreasing; eigenvectors are the matching columns.
pub(crate) fn sorted_sym_eigen(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = s.nrows();
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
        vals.push(eig.eigenvalues[src]);
    }
    (vals, vecs)
}

/// Keep the first `keep` columns of `basis` (assumed orthonormal) and
/// replace the rest by Gram-Schmidt over the canonical basis.
pub(crate) fn complete_orthonormal(basis: &DMatrix<f64>, keep: usize) -> DMatrix<f64> {
    let (rows, cols) = basis.shape();
    let mut out = DMatrix::zeros(rows, cols);
    for j in 0..keep.min(cols) {
        out.set_column(j, &basis.column(j));
    }
    let mut filled = keep.min(cols);
    let mut e = 0;
    while filled < cols && e < rows {
        let mut cand = DVector::zeros(rows);
        cand[e] = 1.0;
        e += 1;
        // two passes keep the result orthogonal to machine precision
        for _ in 0..2 {
            for j in 0..filled {
                let col = out.column(j);
                let proj = col.dot(&cand);
                cand.axpy(-proj, &col, 1.0);
            }
        }
        let norm = cand.norm();
        if norm > 1e-6 {
            out.set_column(filled, &(cand / norm));
            filled += 1;
        }
    }
    out
}

/// Rows of `m` made orthonormal (modified Gram-Schmidt). Requires full row rank.
pub(crate) fn orthonormalize_rows(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    // work on columns of the transpose, which are contiguous
    let mut t = m.transpose();
    for i in 0..t.ncols() {
        for _ in 0..2 {
            for j in 0..i {
                let proj = t.column(i).dot(&t.column(j));
                let cj = t.column(j).clone_owned();
                t.column_mut(i).axpy(-proj, &cj, 1.0);
            }
        }
        let norm = t.column(i).norm();
        if norm < 1e-12 {
            return None;
        }
        t.column_mut(i).scale_mut(1.0 / norm);
    }
    Some(t.transpose())
}

#[cfg(test)]
pub(crate) fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

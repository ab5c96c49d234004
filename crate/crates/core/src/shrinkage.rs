//! Scalar and spectral proximal kernels.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{sorted_singular_values, sorted_svd};

/// Singular values below this fraction of the largest one are treated as 0.
pub const SVD_REL_TOL: f64 = 1e-10;

/// Thin SVD with nonincreasing singular values.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// `rows x c`
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    /// `cols x c`
    pub v: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn of(x: &DMatrix<f64>) -> Self {
        let (u, mut sigma, v) = sorted_svd(x);
        floor_small(&mut sigma);
        Self { u, sigma, v }
    }

    /// `c = min(rows, cols)`
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Number of nonzero singular values.
    pub fn rank(&self) -> usize {
        self.sigma.iter().filter(|&&s| s > 0.0).count()
    }

    /// `U diag(s) Vᵀ` with this decomposition's singular vectors.
    pub fn compose(&self, s: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(s.len(), self.len());
        let mut scaled = self.u.clone();
        for (j, &sj) in s.iter().enumerate() {
            scaled.column_mut(j).scale_mut(sj);
        }
        scaled * self.v.transpose()
    }
}

fn floor_small(sigma: &mut [f64]) {
    if let Some(&top) = sigma.first() {
        let floor = top * SVD_REL_TOL;
        for s in sigma.iter_mut() {
            if *s < floor {
                *s = 0.0;
            }
        }
    }
}

/// Nonincreasing singular values, without the vectors.
pub fn singular_values(x: &DMatrix<f64>) -> Vec<f64> {
    let mut sigma = sorted_singular_values(x);
    floor_small(&mut sigma);
    sigma
}

#[inline]
pub fn soft(a: f64, t: f64) -> f64 {
    a.signum() * (a.abs() - t).max(0.0)
}

#[inline]
pub fn hard(a: f64, t: f64) -> f64 {
    if a.abs() > t {
        a
    } else {
        0.0
    }
}

/// `sign(a) · max(|a| − t, 0)` per entry.
pub fn soft_threshold(a: &[f64], t: f64) -> Vec<f64> {
    debug_assert!(t >= 0.0);
    a.iter().map(|&v| soft(v, t)).collect()
}

/// Keep entries with `|a| > t`. Exact prox of `½(x − a)² + (t²/2)·[x ≠ 0]`.
pub fn hard_threshold(a: &[f64], t: f64) -> Vec<f64> {
    debug_assert!(t >= 0.0);
    a.iter().map(|&v| hard(v, t)).collect()
}

pub fn soft_threshold_matrix(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    a.map(|v| soft(v, t))
}

/// Singular value thresholding: prox of `t‖·‖_*`.
pub fn svt(x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    svt_parts(x, t).0
}

/// [`svt`] plus the shrunk singular values.
pub(crate) fn svt_parts(x: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, Vec<f64>) {
    let sd = SpectralDecomposition::of(x);
    let s = soft_threshold(&sd.sigma, t);
    (sd.compose(&s), s)
}

/// Weighted nuclear norm shrinkage `U diag(max(σ − w, 0)) Vᵀ`, the exact
/// minimizer when the weights are nondecreasing.
pub fn wnnm_shrink(x: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    Ok(wnnm_shrink_parts(x, weights)?.0)
}

/// [`wnnm_shrink`] plus the shrunk singular values.
pub(crate) fn wnnm_shrink_parts(x: &DMatrix<f64>, weights: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sd = SpectralDecomposition::of(x);
    check_weights(weights, sd.len())?;
    let s = shrink_by(&sd.sigma, weights);
    Ok((sd.compose(&s), s))
}

fn check_weights(weights: &[f64], c: usize) -> Result<()> {
    if weights.len() != c {
        return Err(Error::Contract(format!("{} weights for {c} singular values", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Contract("weights must be nonnegative".into()));
    }
    if weights.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Contract("weights must be sorted ascending".into()));
    }
    Ok(())
}

fn shrink_by(sigma: &[f64], weights: &[f64]) -> Vec<f64> {
    sigma
        .iter()
        .zip(weights)
        .map(|(s, w)| (s - w).max(0.0))
        .collect()
}

/// `w_j = k / (σ_j + ε)`.
pub fn wnnm_weights(sigma: &[f64], k: f64, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps = {eps} must be positive")));
    }
    if !(k >= 0.0) {
        return Err(Error::Contract(format!("k = {k} must be nonnegative")));
    }
    Ok(sigma.iter().map(|s| k / (s + eps)).collect())
}

/// WNNM with weights recomputed from the previous round's shrunk spectrum.
/// The first round weights come from `σ(x)` itself.
pub fn wnnm_reweighted(x: &DMatrix<f64>, k: f64, eps: f64, rounds: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (matrix, weights, _) = wnnm_reweighted_parts(x, k, eps, rounds)?;
    Ok((matrix, weights))
}

/// [`wnnm_reweighted`] plus the final shrunk singular values.
pub(crate) fn wnnm_reweighted_parts(
    x: &DMatrix<f64>,
    k: f64,
    eps: f64,
    rounds: usize,
) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let sd = SpectralDecomposition::of(x);
    let mut est = sd.sigma.clone();
    let mut weights = Vec::new();
    for _ in 0..rounds.max(1) {
        weights = wnnm_weights(&est, k, eps)?;
        check_weights(&weights, sd.len())?;
        est = shrink_by(&sd.sigma, &weights);
    }
    Ok((sd.compose(&est), weights, est))
}

/// Keep the top `r` singular triplets.
pub fn truncate_rank(x: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let sd = SpectralDecomposition::of(x);
    if r > sd.len() {
        return Err(Error::Contract(format!("rank {r} exceeds {}", sd.len())));
    }
    let s: Vec<f64> = sd
        .sigma
        .iter()
        .enumerate()
        .map(|(j, &s)| if j < r { s } else { 0.0 })
        .collect();
    Ok(sd.compose(&s))
}

/// Per singular value: `s* = ψ + soft(σ − ψ, t)`, clamped at 0; `x`'s own
/// singular vectors are kept.
pub fn rank_residual_shrink(x: &DMatrix<f64>, psi: &[f64], t: f64) -> Result<DMatrix<f64>> {
    let sd = SpectralDecomposition::of(x);
    Ok(sd.compose(&rank_residual_values(&sd.sigma, psi, t)?))
}

pub(crate) fn rank_residual_values(sigma: &[f64], psi: &[f64], t: f64) -> Result<Vec<f64>> {
    if psi.len() != sigma.len() {
        return Err(Error::Contract(format!(
            "reference spectrum has {} values, expected {}",
            psi.len(),
            sigma.len()
        )));
    }
    if psi.iter().any(|p| !(*p >= 0.0)) || !(t >= 0.0) {
        return Err(Error::Contract("reference spectrum and threshold must be nonnegative".into()));
    }
    Ok(sigma
        .iter()
        .zip(psi)
        .map(|(&s, &p)| (p + soft(s - p, t)).max(0.0))
        .collect())
}

/// NLM weights of each column against column 0:
/// `w_j ∝ exp(−‖x_0 − x_j‖² / h)`, normalized to sum to one.
pub fn nlm_weights(x: &DMatrix<f64>, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("h = {h} must be positive")));
    }
    let m = x.ncols();
    if m == 0 {
        return Ok(Vec::new());
    }
    let first = x.column(0);
    let raw: Vec<f64> = (0..m)
        .map(|j| (-(x.column(j) - first).norm_squared() / h).exp())
        .collect();
    // column 0 has weight exp(0) = 1, so the sum never underflows
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `Σ_j σ_j`
pub fn nuclear_norm(x: &DMatrix<f64>) -> f64 {
    singular_values(x).iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::argmin_1d;
    use crate::linalg::max_abs_diff;
    use crate::rng::Rng;
    use nalgebra::DVector;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[3.0, -0.5, 1.0], 1.0), vec![2.0, 0.0, 0.0]);
        let a = [1.5, -2.0, 0.0, 4.0];
        assert_eq!(soft_threshold(&a, 0.0), a.to_vec());
    }

    #[test]
    fn soft_threshold_matches_grid_search() {
        let mut rng = Rng::new(1);
        let t = 0.8;
        let a = rng.gaussian_draws(30);
        let out = soft_threshold(&a, t);
        for (ai, oi) in a.iter().zip(&out) {
            let g = argmin_1d(|x| 0.5 * (x - ai).powi(2) + t * x.abs(), -5.0, 5.0);
            assert!((g - oi).abs() < 1e-9, "a={ai} prox={oi} grid={g}");
        }
    }

    #[test]
    fn hard_threshold_examples() {
        assert_eq!(hard_threshold(&[3.0, 0.1, -2.0], 1.0), vec![3.0, 0.0, -2.0]);
        assert_eq!(hard_threshold(&[3.0, 0.1, -2.0], 0.0), vec![3.0, 0.1, -2.0]);
    }

    #[test]
    fn hard_threshold_matches_two_candidate_oracle() {
        let mut rng = Rng::new(2);
        let t = 0.9;
        for a in rng.gaussian_draws(100) {
            let obj = |x: f64| 0.5 * (x - a).powi(2) + if x != 0.0 { t * t / 2.0 } else { 0.0 };
            let oracle = if obj(a) < obj(0.0) { a } else { 0.0 };
            assert_eq!(hard(a, t), oracle);
        }
    }

    #[test]
    fn svt_diagonal_and_zero_threshold() {
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let out = svt(&x, 1.0);
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        assert!(max_abs_diff(&out, &want) < 1e-12);
        let mut rng = Rng::new(3);
        let y = random(5, 4, &mut rng);
        assert!(max_abs_diff(&svt(&y, 0.0), &y) < 1e-12);
    }

    #[test]
    fn svt_beats_random_perturbations() {
        let mut rng = Rng::new(4);
        let x = random(5, 4, &mut rng);
        let t = 0.7;
        let obj = |z: &DMatrix<f64>| 0.5 * (z - &x).norm_squared() + t * nuclear_norm(z);
        let z = svt(&x, t);
        let best = obj(&z);
        for i in 0..200 {
            let scale = if i % 2 == 0 { 1e-3 } else { 1e-1 };
            let p = &z + random(5, 4, &mut rng) * scale;
            assert!(obj(&p) >= best - 1e-12);
        }
    }

    #[test]
    fn svt_rank_equals_count_above_threshold() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let x = random(7, 5, &mut rng);
            let sd = SpectralDecomposition::of(&x);
            let t = sd.sigma[2];
            let expected = sd.sigma.iter().filter(|&&s| s > t).count();
            let out = SpectralDecomposition::of(&svt(&x, t));
            let rank = out.sigma.iter().filter(|&&s| s > 1e-9).count();
            assert_eq!(rank, expected);
        }
    }

    #[test]
    fn wnnm_examples() {
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0]));
        let out = wnnm_shrink(&x, &[1.0, 3.0]).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0]));
        assert!(max_abs_diff(&out, &want) < 1e-12);
        assert!(matches!(wnnm_shrink(&x, &[3.0, 1.0]), Err(Error::Contract(_))));
        assert!(wnnm_shrink(&x, &[1.0]).is_err());
    }

    #[test]
    fn wnnm_constant_weights_is_svt() {
        let mut rng = Rng::new(6);
        let x = random(6, 5, &mut rng);
        let out = wnnm_shrink(&x, &[0.6; 5]).unwrap();
        assert!(max_abs_diff(&out, &svt(&x, 0.6)) < 1e-12);
    }

    #[test]
    fn wnnm_weight_formula() {
        let w = wnnm_weights(&[4.0, 2.0], 1.0, 1e-12).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        assert!(wnnm_weights(&[4.0, 2.0], 1.0, 0.0).is_err());
        assert_eq!(wnnm_weights(&[4.0, 2.0], 0.0, 1e-3).unwrap(), vec![0.0, 0.0]);
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let mut s: Vec<f64> = (0..8).map(|_| rng.uniform() * 10.0).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            let w = wnnm_weights(&s, 1.3, 1e-6).unwrap();
            assert!(w.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn reweighted_wnnm_reaches_a_fixed_point() {
        // after enough re-weighting rounds, weights computed from the shrunk
        // spectrum reproduce the same shrunk matrix
        let mut rng = Rng::new(8);
        let x = random(6, 6, &mut rng) * 10.0;
        let (k, eps) = (2.0, 1e-3);
        let (settled, _) = wnnm_reweighted(&x, k, eps, 60).unwrap();
        let shrunk = SpectralDecomposition::of(&settled).sigma;
        let w = wnnm_weights(&shrunk, k, eps).unwrap();
        let again = wnnm_shrink(&x, &w).unwrap();
        assert!(max_abs_diff(&again, &settled) < 1e-8);
        // a single round equals the plain weighted shrink
        let sd = SpectralDecomposition::of(&x);
        let w1 = wnnm_weights(&sd.sigma, k, eps).unwrap();
        let (one, _) = wnnm_reweighted(&x, k, eps, 1).unwrap();
        assert!(max_abs_diff(&one, &wnnm_shrink(&x, &w1).unwrap()) < 1e-12);
    }

    #[test]
    fn truncate_rank_edges_and_eckart_young() {
        let mut rng = Rng::new(9);
        let x = random(4, 3, &mut rng);
        assert!(max_abs_diff(&truncate_rank(&x, 3).unwrap(), &x) < 1e-12);
        assert_eq!(truncate_rank(&x, 0).unwrap(), DMatrix::zeros(4, 3));
        assert!(truncate_rank(&x, 4).is_err());

        // exhaustive check over rank-1 candidates built from small integer vectors
        let x = DMatrix::from_row_slice(3, 3, &[3.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0]);
        let best = (truncate_rank(&x, 1).unwrap() - &x).norm();
        let sd = SpectralDecomposition::of(&x);
        assert!((best - (sd.sigma[1].powi(2) + sd.sigma[2].powi(2)).sqrt()).abs() < 1e-10);
        let vals = [-2.0, -1.0, 0.0, 1.0, 2.0];
        for a in vals {
            for b in vals {
                for c in vals {
                    let u = DVector::from_vec(vec![a, b, c]);
                    if u.norm() == 0.0 {
                        continue;
                    }
                    let u: DVector<f64> = &u / u.norm();
                    // best rank-1 with left factor u is u uᵀ x
                    let cand = &u * (u.transpose() * &x);
                    assert!((cand - &x).norm() >= best - 1e-10);
                }
            }
        }
    }

    #[test]
    fn rank_residual_fixed_point_and_nnm_reduction() {
        let mut rng = Rng::new(10);
        let x = random(5, 4, &mut rng);
        let sd = SpectralDecomposition::of(&x);
        assert!(max_abs_diff(&rank_residual_shrink(&x, &sd.sigma, 0.9).unwrap(), &x) < 1e-12);
        let zero = vec![0.0; 4];
        assert!(max_abs_diff(&rank_residual_shrink(&x, &zero, 0.9).unwrap(), &svt(&x, 0.9)) < 1e-12);
        assert!(rank_residual_shrink(&x, &[1.0], 0.9).is_err());
    }

    #[test]
    fn rank_residual_matches_grid_search() {
        let mut rng = Rng::new(11);
        let x = random(4, 4, &mut rng);
        let sd = SpectralDecomposition::of(&x);
        let psi: Vec<f64> = (0..4).map(|_| rng.uniform() * 2.0).collect();
        let t = 0.4;
        let out = rank_residual_values(&sd.sigma, &psi, t).unwrap();
        for j in 0..4 {
            let g = argmin_1d(
                |s| 0.5 * (s - sd.sigma[j]).powi(2) + t * (s - psi[j]).abs(),
                0.0,
                10.0,
            );
            assert!((g - out[j]).abs() < 1e-9, "j={j} grid={g} closed={}", out[j]);
        }
    }

    #[test]
    fn nlm_weight_cases() {
        let same = DMatrix::from_fn(4, 5, |i, _| i as f64);
        let w = nlm_weights(&same, 10.0).unwrap();
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(nlm_weights(&DMatrix::from_element(3, 1, 2.0), 1.0).unwrap(), vec![1.0]);
        assert!(nlm_weights(&same, 0.0).is_err());

        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let x = random(9, 7, &mut rng) * 20.0;
            let w = nlm_weights(&x, 500.0).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted = x.add_scalar(37.0);
            let ws = nlm_weights(&shifted, 500.0).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_operators_shrink_nuclear_norm() {
        let mut rng = Rng::new(13);
        for _ in 0..30 {
            let x = random(6, 5, &mut rng) * 5.0;
            let sd = SpectralDecomposition::of(&x);
            let n = nuclear_norm(&x);
            assert!(nuclear_norm(&svt(&x, 1.0)) <= n + 1e-9);
            let w = wnnm_weights(&sd.sigma, 4.0, 1e-6).unwrap();
            assert!(nuclear_norm(&wnnm_shrink(&x, &w).unwrap()) <= n + 1e-9);
            // reference spectrum below σ: the residual shrink moves towards ψ
            let psi: Vec<f64> = sd.sigma.iter().map(|s| s * rng.uniform()).collect();
            assert!(nuclear_norm(&rank_residual_shrink(&x, &psi, 0.5).unwrap()) <= n + 1e-9);
        }
    }

    fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
        random(n, n, rng).qr().q()
    }

    #[test]
    fn spectral_operators_are_unitarily_invariant() {
        let mut rng = Rng::new(14);
        for _ in 0..10 {
            let x = random(6, 4, &mut rng) * 3.0;
            let q = random_orthogonal(6, &mut rng);
            let r = random_orthogonal(4, &mut rng);
            let y = &q * &x * &r;
            let sd = SpectralDecomposition::of(&x);
            let w = wnnm_weights(&sd.sigma, 2.0, 1e-6).unwrap();
            let psi: Vec<f64> = sd.sigma.iter().map(|s| 0.5 * s).collect();
            let pairs = [
                (svt(&x, 0.8), svt(&y, 0.8)),
                (wnnm_shrink(&x, &w).unwrap(), wnnm_shrink(&y, &w).unwrap()),
                (truncate_rank(&x, 2).unwrap(), truncate_rank(&y, 2).unwrap()),
                (
                    rank_residual_shrink(&x, &psi, 0.3).unwrap(),
                    rank_residual_shrink(&y, &psi, 0.3).unwrap(),
                ),
            ];
            for (fx, fy) in pairs {
                assert!(max_abs_diff(&(&q * fx * &r), &fy) < 1e-8);
            }
        }
    }

    use proptest::prelude::{prop_assert, proptest};

    proptest! {
        #[test]
        fn scalar_thresholds_shrink_toward_zero(a in -50.0f64..50.0, t in 0.0f64..20.0) {
            let s = soft(a, t);
            prop_assert!(s.abs() <= a.abs() && s * a >= 0.0);
            prop_assert!((a.abs() - s.abs() - t.min(a.abs())).abs() < 1e-12);
            let h = hard(a, t);
            prop_assert!(h == 0.0 || h == a);
        }

        #[test]
        fn svt_shrinks_spectrum_and_is_nonexpansive(
            rows in 1usize..9, cols in 1usize..9, t in 0.0f64..3.0, seed in 0u64..10_000,
        ) {
            let mut rng = Rng::new(seed);
            let x = random(rows, cols, &mut rng);
            let y = &x + random(rows, cols, &mut rng) * 0.3;
            let (sx, sy) = (svt(&x, t), svt(&y, t));
            let sigma = x.clone().singular_values();
            let expected: f64 = sigma.iter().map(|&v| soft(v, t)).sum();
            prop_assert!((nuclear_norm(&sx) - expected).abs() < 1e-9);
            prop_assert!((&sx - &sy).norm() <= (&x - &y).norm() + 1e-10);
        }

        #[test]
        fn rank_residual_below_reference_shrinks_nuclear_norm(
            rows in 1usize..9, cols in 1usize..9, t in 0.0f64..3.0, frac in 0.0f64..1.0, seed in 0u64..10_000,
        ) {
            let mut rng = Rng::new(seed);
            let x = random(rows, cols, &mut rng);
            let sigma = x.clone().singular_values();
            let mut sorted: Vec<f64> = sigma.iter().copied().collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let psi: Vec<f64> = sorted.iter().map(|v| frac * v).collect();
            let z = rank_residual_shrink(&x, &psi, t).unwrap();
            prop_assert!(nuclear_norm(&z) <= nuclear_norm(&x) + 1e-9);
        }
    }
}

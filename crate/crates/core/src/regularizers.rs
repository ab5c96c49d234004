//! Group-level proximal models.
//!
//! Each `prox_*` maps a noisy group `X` (`b x m`, similar patches as columns)
//! to its estimate under one structured-sparsity prior, and reports the value
//! of that prior at the estimate.
//!
//! Threshold conventions:
//!
//! | model | operator |
//! |-------|----------|
//! | gsr   | hard threshold `√(2λμ)` on rank-one atom codes |
//! | gsrc  | soft threshold `λμ` on the residual to the NLM code estimate |
//! | hsse  | alternating soft thresholds `λμρ/(μ+ρ)` (internal) and `τρ` (external) |
//! | nlr   | WNNM with weights `kλμ / (σ + ε)` |
//! | rrc   | soft threshold `λμ` on `σ − ψ` |
//! | lrgsc | soft threshold `λμρ/(μ+ρ)` on codes, SVT `τρ` on the code matrix |
//! | trunc | top `r` singular values kept, the rest soft-thresholded by `λμ` |

use nalgebra::DMatrix;

use crate::config::{RegularizerKind, SolverConfig};
use crate::dictionaries::{
    pca_dictionary, rank_one_dictionary, select_subdictionary, ExternalGmm, PcaDictionary,
};
use crate::error::{Error, Result};
use crate::shrinkage::{
    hard_threshold, nlm_weights, rank_residual_values, singular_values, soft, soft_threshold,
    soft_threshold_matrix, svt_parts, wnnm_reweighted_parts, wnnm_shrink_parts, SpectralDecomposition,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub mu: f64,
    pub lambda: f64,
    pub rho: f64,
    pub tau: f64,
    pub h: f64,
    pub k_wnnm: f64,
    pub eps_wnnm: f64,
    pub inner_iters: usize,
    pub trunc_rank: usize,
}

impl GroupParams {
    pub fn from_config(cfg: &SolverConfig) -> Self {
        Self {
            mu: cfg.mu,
            lambda: cfg.lambda(),
            rho: cfg.rho,
            tau: cfg.tau(),
            h: cfg.h,
            k_wnnm: cfg.k_wnnm,
            eps_wnnm: cfg.eps_wnnm,
            inner_iters: cfg.inner_iters(),
            trunc_rank: cfg.trunc_rank,
        }
    }

    /// Internal-code threshold of the coupled models.
    fn coupled_threshold(&self) -> f64 {
        self.lambda * self.mu * self.rho / (self.mu + self.rho)
    }

    /// `(ρ·a + μ·b) / (μ + ρ)`
    fn coupled_target(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        (a * self.rho + b * self.mu) / (self.mu + self.rho)
    }
}

/// Parameters plus the optional external model a group prox may need.
#[derive(Debug, Clone, Copy)]
pub struct GroupContext<'a> {
    pub params: GroupParams,
    pub gmm: Option<&'a ExternalGmm>,
}

#[derive(Debug, Clone)]
pub struct GroupEstimate {
    pub matrix: DMatrix<f64>,
    /// Penalty value of the prior at the estimate.
    pub penalty: f64,
}

fn l1(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

/// ℓ0 coding over the group's rank-one SVD atoms.
pub fn prox_gsr(x: &DMatrix<f64>, p: &GroupParams) -> GroupEstimate {
    let dict = rank_one_dictionary(x);
    let kept = hard_threshold(&dict.codes, (2.0 * p.lambda * p.mu).sqrt());
    let nonzero = kept.iter().filter(|&&c| c != 0.0).count();
    GroupEstimate {
        matrix: dict.synthesize(&kept),
        penalty: p.lambda * nonzero as f64,
    }
}

/// Codes pulled towards the NLM-weighted average code vector `β`.
pub fn prox_gsrc(x: &DMatrix<f64>, p: &GroupParams) -> Result<GroupEstimate> {
    let dict = pca_dictionary(x);
    let raw = dict.codes(x);
    let w = nlm_weights(x, p.h)?;
    let beta = raw.column_iter().zip(&w).fold(
        nalgebra::DVector::zeros(raw.nrows()),
        |acc, (col, &wj)| acc + col * wj,
    );
    let t = p.lambda * p.mu;
    let mut codes = raw.clone();
    let mut penalty = 0.0;
    for mut col in codes.column_iter_mut() {
        for (v, b) in col.iter_mut().zip(beta.iter()) {
            let r = soft(*v - b, t);
            penalty += r.abs();
            *v = b + r;
        }
    }
    Ok(GroupEstimate {
        matrix: dict.reconstruct(&codes),
        penalty: p.lambda * penalty,
    })
}

/// Intermediate state of the HSSE alternation, exposed for inspection.
#[derive(Debug, Clone)]
pub struct HsseCodes {
    pub dict: PcaDictionary,
    pub component: usize,
    /// Internal codes `A`.
    pub internal: DMatrix<f64>,
    /// External codes `B` in the selected sub-dictionary.
    pub external: DMatrix<f64>,
}

pub fn hsse_codes(x: &DMatrix<f64>, p: &GroupParams, gmm: &ExternalGmm) -> Result<HsseCodes> {
    if gmm.dim() != x.nrows() {
        return Err(Error::Config(format!(
            "GMM patch dimension {} does not match group dimension {}",
            gmm.dim(),
            x.nrows()
        )));
    }
    let dict = pca_dictionary(x);
    let centered = dict.center(x);
    let alpha = dict.basis.tr_mul(&centered);
    let (u, component) = select_subdictionary(gmm, &centered);

    let t_int = p.coupled_threshold();
    let t_ext = p.tau * p.rho;
    let external_step = |a: &DMatrix<f64>| soft_threshold_matrix(&u.tr_mul(&(&dict.basis * a)), t_ext);

    // warm start from the internal-only solution
    let mut a = soft_threshold_matrix(&alpha, p.lambda * p.mu);
    let mut b = external_step(&a);
    for _ in 0..p.inner_iters {
        let beta = dict.basis.tr_mul(&(u * &b));
        a = soft_threshold_matrix(&p.coupled_target(&alpha, &beta), t_int);
        b = external_step(&a);
    }
    Ok(HsseCodes {
        dict,
        component,
        internal: a,
        external: b,
    })
}

/// Internal PCA codes coupled to codes in an external GMM sub-dictionary.
pub fn prox_hsse(x: &DMatrix<f64>, p: &GroupParams, gmm: &ExternalGmm) -> Result<GroupEstimate> {
    let codes = hsse_codes(x, p, gmm)?;
    let u = &gmm.components[codes.component].basis;
    let gap = (u * &codes.external - &codes.dict.basis * &codes.internal).norm_squared();
    Ok(GroupEstimate {
        matrix: codes.dict.reconstruct(&codes.internal),
        penalty: p.lambda * l1(&codes.internal) + p.tau * l1(&codes.external) + gap / (2.0 * p.rho),
    })
}

/// Weighted nuclear norm shrinkage with weights from the group's own spectrum.
pub fn prox_nlr(x: &DMatrix<f64>, p: &GroupParams) -> Result<GroupEstimate> {
    let k = p.k_wnnm * p.lambda * p.mu;
    let (matrix, weights, sigma) = wnnm_reweighted_parts(x, k, p.eps_wnnm, p.inner_iters)?;
    let penalty = weights.iter().zip(&sigma).map(|(w, s)| w * s).sum();
    Ok(GroupEstimate { matrix, penalty })
}

/// WNNM step with frozen, caller-supplied weights (nondecreasing).
pub fn prox_nlr_with_weights(x: &DMatrix<f64>, weights: &[f64]) -> Result<GroupEstimate> {
    let (matrix, sigma) = wnnm_shrink_parts(x, weights)?;
    let penalty = weights.iter().zip(&sigma).map(|(w, s)| w * s).sum();
    Ok(GroupEstimate { matrix, penalty })
}

/// Reference group for rank-residual shrinkage: column `j` (0-based) is the
/// NLM-weighted average of the first `m − j` columns, weights renormalized.
pub fn rrc_reference(x: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let w = nlm_weights(x, h)?;
    let m = x.ncols();
    let mut out = DMatrix::zeros(x.nrows(), m);
    for j in 0..m {
        let limit = m - j;
        let norm: f64 = w[..limit].iter().sum();
        let mut col = out.column_mut(j);
        for (k, wk) in w[..limit].iter().enumerate() {
            col.axpy(wk / norm, &x.column(k), 1.0);
        }
    }
    Ok(out)
}

/// Rank-residual shrinkage against the spectrum of [`rrc_reference`].
pub fn prox_rrc(x: &DMatrix<f64>, p: &GroupParams) -> Result<GroupEstimate> {
    let reference = rrc_reference(x, p.h)?;
    let psi = singular_values(&reference);
    prox_rrc_with_reference(x, &psi, p)
}

/// Rank-residual shrinkage against a given reference spectrum `ψ`.
pub fn prox_rrc_with_reference(x: &DMatrix<f64>, psi: &[f64], p: &GroupParams) -> Result<GroupEstimate> {
    let sd = SpectralDecomposition::of(x);
    let s = rank_residual_values(&sd.sigma, psi, p.lambda * p.mu)?;
    let penalty = p.lambda * s.iter().zip(psi).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(GroupEstimate {
        matrix: sd.compose(&s),
        penalty,
    })
}

/// Intermediate state of the LR-GSC alternation.
#[derive(Debug, Clone)]
pub struct LrgscCodes {
    pub dict: PcaDictionary,
    /// Unpenalized codes `Dᵀ(X − mean)`.
    pub raw: DMatrix<f64>,
    /// Sparse codes `A`.
    pub sparse: DMatrix<f64>,
    /// Low-rank codes `B`.
    pub low_rank: DMatrix<f64>,
    /// Singular values of `B`, nonincreasing.
    pub low_rank_sigma: Vec<f64>,
}

pub fn lrgsc_codes(x: &DMatrix<f64>, p: &GroupParams) -> LrgscCodes {
    let dict = pca_dictionary(x);
    let raw = dict.codes(x);
    let t_int = p.coupled_threshold();
    let t_lr = p.tau * p.rho;

    // warm start from the sparse-only solution, then A-step before B-step
    let mut a = soft_threshold_matrix(&raw, p.lambda * p.mu);
    let (mut b, mut b_sigma) = svt_parts(&a, t_lr);
    for _ in 0..p.inner_iters {
        a = soft_threshold_matrix(&p.coupled_target(&raw, &b), t_int);
        (b, b_sigma) = svt_parts(&a, t_lr);
    }
    LrgscCodes {
        dict,
        raw,
        sparse: a,
        low_rank: b,
        low_rank_sigma: b_sigma,
    }
}

/// Sparse PCA codes coupled to a low-rank approximation of the code matrix.
pub fn prox_lrgsc(x: &DMatrix<f64>, p: &GroupParams) -> GroupEstimate {
    let codes = lrgsc_codes(x, p);
    let nuclear: f64 = codes.low_rank_sigma.iter().sum();
    let gap = (&codes.sparse - &codes.low_rank).norm_squared();
    GroupEstimate {
        matrix: codes.dict.reconstruct(&codes.sparse),
        penalty: p.lambda * l1(&codes.sparse) + p.tau * nuclear + gap / (2.0 * p.rho),
    }
}

/// Truncated nuclear norm: the leading `trunc_rank` singular values are
/// free, the tail is soft-thresholded.
pub fn prox_trunc(x: &DMatrix<f64>, p: &GroupParams) -> GroupEstimate {
    let sd = SpectralDecomposition::of(x);
    let r = p.trunc_rank.min(sd.len());
    let mut s = sd.sigma.clone();
    let tail = soft_threshold(&s[r..], p.lambda * p.mu);
    s[r..].copy_from_slice(&tail);
    GroupEstimate {
        matrix: sd.compose(&s),
        penalty: p.lambda * tail.iter().sum::<f64>(),
    }
}

/// Dispatch on the configured regularizer.
pub fn prox(kind: RegularizerKind, x: &DMatrix<f64>, ctx: &GroupContext<'_>) -> Result<GroupEstimate> {
    let p = &ctx.params;
    match kind {
        RegularizerKind::Gsr => Ok(prox_gsr(x, p)),
        RegularizerKind::Gsrc => prox_gsrc(x, p),
        RegularizerKind::Hsse => {
            let gmm = ctx
                .gmm
                .ok_or_else(|| Error::Config("hsse needs an external GMM model".into()))?;
            prox_hsse(x, p, gmm)
        }
        RegularizerKind::Nlr => prox_nlr(x, p),
        RegularizerKind::Rrc => prox_rrc(x, p),
        RegularizerKind::Lrgsc => Ok(prox_lrgsc(x, p)),
        RegularizerKind::Trunc => Ok(prox_trunc(x, p)),
    }
}

//! Per-group dictionaries and the external GMM sub-dictionaries.

mod gmm;

pub use gmm::{
    collect_training_groups, select_subdictionary, train_gmm, ExternalGmm, GmmComponent,
    GmmTrainOptions, GmmTraining,
};

use nalgebra::{DMatrix, DVector};

use crate::linalg::complete_orthonormal;
use crate::shrinkage::SpectralDecomposition;

/// Orthonormal PCA basis of a mean-centered group.
#[derive(Debug, Clone)]
pub struct PcaDictionary {
    /// `b x c` with `c = min(b, m)`.
    pub basis: DMatrix<f64>,
    /// Mean patch (row means of the group).
    pub mean: DVector<f64>,
    /// All columns were equal, so the basis is an arbitrary orthonormal set.
    pub degenerate: bool,
}

impl PcaDictionary {
    /// `Dᵀ(X − mean)`
    pub fn codes(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.basis.tr_mul(&self.center(x))
    }

    /// `D A + mean`
    pub fn reconstruct(&self, codes: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.basis * codes;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        out
    }

    pub fn center(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            col -= &self.mean;
        }
        out
    }
}

/// Left singular vectors of the mean-centered group.
pub fn pca_dictionary(x: &DMatrix<f64>) -> PcaDictionary {
    let m = x.ncols().max(1);
    let mean = x.column_sum() / m as f64;
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let sd = SpectralDecomposition::of(&centered);
    let rank = sd.rank();
    let basis = if rank < sd.len() {
        complete_orthonormal(&sd.u, rank)
    } else {
        sd.u
    };
    PcaDictionary {
        basis,
        mean,
        degenerate: rank == 0,
    }
}

/// Rank-one atoms `d_j = u_j v_jᵀ` from the SVD of the group, with the
/// singular values as codes.
#[derive(Debug, Clone)]
pub struct RankOneDictionary {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub codes: Vec<f64>,
}

impl RankOneDictionary {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn atom(&self, j: usize) -> DMatrix<f64> {
        self.u.column(j) * self.v.column(j).transpose()
    }

    /// `Σ_j codes_j d_j`
    pub fn synthesize(&self, codes: &[f64]) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, &c) in codes.iter().enumerate() {
            scaled.column_mut(j).scale_mut(c);
        }
        scaled * self.v.transpose()
    }
}

pub fn rank_one_dictionary(x: &DMatrix<f64>) -> RankOneDictionary {
    let sd = SpectralDecomposition::of(x);
    RankOneDictionary {
        u: sd.u,
        v: sd.v,
        codes: sd.sigma,
    }
}

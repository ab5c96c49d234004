//! Group-level Gaussian mixture whose components act as external PCA
//! sub-dictionaries.
//!
//! Every column of a training group shares the group's component, so the
//! mixture is over groups: `p(X) = Σ_k π_k Π_j N(x_j; μ_k, Σ_k)`. Component
//! covariances are parametrized as `U diag(e) Uᵀ + ε I` with `e ≥ 0`; the
//! M-step maximizes the likelihood exactly under that constraint, so the
//! log-likelihood never decreases between iterations.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::{group_at, GroupingParams};
use crate::image::Image;
use crate::linalg::sorted_sym_eigen;
use crate::rng::Rng;
use crate::sampling::ByteReader;

const GMM_MAGIC: &[u8; 8] = b"NLCSGMM1";

/// Covariance floor added to the eigenvalues in every density evaluation.
pub const EPS_COV: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    /// `b x b` orthonormal eigenvectors (columns), matching `eigenvalues`.
    pub basis: DMatrix<f64>,
    /// Nonincreasing, nonnegative; the density uses `eigenvalues + EPS_COV`.
    pub eigenvalues: Vec<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl GmmComponent {
    pub fn new(weight: f64, mean: DVector<f64>, basis: DMatrix<f64>, eigenvalues: Vec<f64>) -> Self {
        let b = mean.len();
        let mut scaled = basis.clone();
        let mut log_det = 0.0;
        for (j, &e) in eigenvalues.iter().enumerate() {
            let var = e + EPS_COV;
            log_det += var.ln();
            scaled.column_mut(j).scale_mut(1.0 / var);
        }
        let precision = &scaled * basis.transpose();
        debug_assert_eq!(precision.shape(), (b, b));
        Self {
            weight,
            mean,
            basis,
            eigenvalues,
            precision,
            log_det,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log N(x; μ, Σ)` for a single vector.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let quad = d.dot(&(&self.precision * &d));
        -0.5 * (quad + self.log_det + self.dim() as f64 * (2.0 * PI).ln())
    }

    /// `Σ_j log N(x_j; μ, Σ)` from group statistics.
    fn group_log_density(&self, stats: &GroupStats) -> f64 {
        let n = stats.count as f64;
        let trace: f64 = self
            .precision
            .iter()
            .zip(stats.scatter.iter())
            .map(|(p, s)| p * s)
            .sum();
        let d = &stats.mean - &self.mean;
        let quad = trace + n * d.dot(&(&self.precision * &d));
        -0.5 * (quad + n * (self.log_det + self.dim() as f64 * (2.0 * PI).ln()))
    }
}

/// Column count, column mean and centered scatter of one group.
struct GroupStats {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl GroupStats {
    fn of(x: &DMatrix<f64>) -> Self {
        let count = x.ncols();
        let mean = x.column_sum() / count.max(1) as f64;
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let scatter = &centered * centered.transpose();
        Self {
            count,
            mean,
            scatter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalGmm {
    pub components: Vec<GmmComponent>,
}

impl ExternalGmm {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Training("mixture needs at least one component".into()));
        };
        let b = first.dim();
        for (k, c) in components.iter().enumerate() {
            if c.dim() != b || c.basis.shape() != (b, b) || c.eigenvalues.len() != b {
                return Err(Error::Shape(format!("component {k} has inconsistent dimensions")));
            }
            if !(c.weight > 0.0) || c.eigenvalues.iter().any(|e| !(*e >= 0.0)) {
                return Err(Error::Training(format!(
                    "component {k} has a nonpositive weight or negative eigenvalue"
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `Σ_cols log N(col; μ_k, Σ_k) + log π_k` for every component.
    pub fn group_scores(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.scores_from(&GroupStats::of(x))
    }

    fn scores_from(&self, stats: &GroupStats) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.group_log_density(stats) + c.weight.ln())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let b = self.dim();
        let mut out = Vec::with_capacity(16 + self.len() * 8 * (1 + 2 * b + b * b));
        out.extend_from_slice(GMM_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(b as u32).to_le_bytes());
        for c in &self.components {
            out.extend_from_slice(&c.weight.to_le_bytes());
            for v in c.mean.iter().chain(c.eigenvalues.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for r in 0..b {
                for col in 0..b {
                    out.extend_from_slice(&c.basis[(r, col)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != GMM_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "missing NLCSGMM1 magic".into(),
            });
        }
        let count = r.u32()? as usize;
        let b = r.u32()? as usize;
        if count == 0 || b == 0 {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("empty model (M={count}, b={b})"),
            });
        }
        let expected = count * 8 * (1 + 2 * b + b * b);
        if r.remaining() != expected {
            return Err(Error::Parse {
                offset: r.pos,
                msg: format!("expected {expected} payload bytes, found {}", r.remaining()),
            });
        }
        let mut components = Vec::with_capacity(count);
        for _ in 0..count {
            let weight = r.f64()?;
            let mean = DVector::from_iterator(b, (0..b).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            let eigenvalues = (0..b).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let flat = (0..b * b).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let basis = DMatrix::from_row_slice(b, b, &flat);
            components.push(GmmComponent::new(weight, mean, basis, eigenvalues));
        }
        Self::new(components)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Component with the largest group posterior; ties go to the lowest index.
pub fn select_subdictionary<'a>(gmm: &'a ExternalGmm, x: &DMatrix<f64>) -> (&'a DMatrix<f64>, usize) {
    let scores = gmm.group_scores(x);
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    (&gmm.components[best].basis, best)
}

#[derive(Debug, Clone, Copy)]
pub struct GmmTrainOptions {
    pub components: usize,
    pub em_iters: usize,
    /// A component holding fewer groups than this is re-seeded.
    pub min_groups: f64,
    pub max_reseeds: usize,
}

impl Default for GmmTrainOptions {
    fn default() -> Self {
        Self {
            components: 32,
            em_iters: 30,
            min_groups: 1.0,
            max_reseeds: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmTraining {
    pub model: ExternalGmm,
    /// Log-likelihood of the training groups before each M-step.
    pub log_likelihood: Vec<f64>,
    /// Iterations after which some component was re-seeded.
    pub reseeded: Vec<usize>,
    /// Most probable component per training group under the final model.
    pub assignments: Vec<usize>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Responsibilities and total log-likelihood.
fn e_step(model: &ExternalGmm, groups: &[DMatrix<f64>]) -> (Vec<Vec<f64>>, f64) {
    let per_group: Vec<(Vec<f64>, f64)> = groups
        .par_iter()
        .map(|g| {
            let scores = model.scores_from(&GroupStats::of(g));
            let lse = log_sum_exp(&scores);
            (scores.iter().map(|s| (s - lse).exp()).collect(), lse)
        })
        .collect();
    let total = per_group.iter().map(|(_, l)| l).sum();
    (per_group.into_iter().map(|(r, _)| r).collect(), total)
}

/// Constrained covariance fit: eigenvalues of the weighted scatter minus the
/// floor, clipped at zero.
fn fit_component(weight: f64, mean: DVector<f64>, scatter: &DMatrix<f64>) -> GmmComponent {
    let (vals, vecs) = sorted_sym_eigen(scatter);
    let eig = vals.iter().map(|v| (v - EPS_COV).max(0.0)).collect();
    GmmComponent::new(weight, mean, vecs, eig)
}

fn m_step(groups: &[DMatrix<f64>], resp: &[Vec<f64>], k_count: usize, b: usize) -> Vec<Option<GmmComponent>> {
    let g_count = groups.len() as f64;
    let mut mass = vec![0.0; k_count];
    let mut group_mass = vec![0.0; k_count];
    let mut sums = vec![DVector::<f64>::zeros(b); k_count];
    for (g, r) in groups.iter().zip(resp) {
        let col_sum = g.column_sum();
        for k in 0..k_count {
            if r[k] > 0.0 {
                group_mass[k] += r[k];
                mass[k] += r[k] * g.ncols() as f64;
                sums[k].axpy(r[k], &col_sum, 1.0);
            }
        }
    }
    let means: Vec<DVector<f64>> = sums
        .iter()
        .zip(&mass)
        .map(|(s, &m)| if m > 0.0 { s / m } else { s.clone() })
        .collect();
    let mut scatter = vec![DMatrix::<f64>::zeros(b, b); k_count];
    for (g, r) in groups.iter().zip(resp) {
        let active: Vec<usize> = (0..k_count).filter(|&k| r[k] > 0.0).collect();
        for k in active {
            let mut centered = g.clone();
            for mut col in centered.column_iter_mut() {
                col -= &means[k];
            }
            scatter[k].gemm(r[k], &centered, &centered.transpose(), 1.0);
        }
    }
    (0..k_count)
        .map(|k| {
            (mass[k] > 0.0).then(|| {
                fit_component(group_mass[k] / g_count, means[k].clone(), &(&scatter[k] / mass[k]))
            })
        })
        .collect()
}

/// Fit the group-level mixture by EM.
pub fn train_gmm(groups: &[DMatrix<f64>], opts: &GmmTrainOptions, rng: &mut Rng) -> Result<GmmTraining> {
    let k_count = opts.components;
    if k_count == 0 {
        return Err(Error::Training("need at least one component".into()));
    }
    let Some(first) = groups.first() else {
        return Err(Error::Training("no training groups".into()));
    };
    let b = first.nrows();
    if groups.iter().any(|g| g.nrows() != b || g.ncols() == 0) {
        return Err(Error::Shape("training groups must share the patch dimension".into()));
    }
    let columns: usize = groups.iter().map(|g| g.ncols()).sum();
    if columns < k_count * b || groups.len() < k_count {
        return Err(Error::Training(format!(
            "{} groups / {columns} patches cannot support {k_count} components of dimension {b}",
            groups.len()
        )));
    }

    // start: distinct random groups as means, pooled covariance for all
    let pooled = {
        let resp = vec![vec![1.0]; groups.len()];
        m_step(groups, &resp, 1, b).pop().flatten().expect("nonempty data")
    };
    let mut order: Vec<usize> = (0..groups.len()).collect();
    for i in 0..k_count {
        let j = i + rng.index(order.len() - i);
        order.swap(i, j);
    }
    let mut components: Vec<GmmComponent> = order[..k_count]
        .iter()
        .map(|&g| {
            let mean = groups[g].column_sum() / groups[g].ncols() as f64;
            GmmComponent::new(
                1.0 / k_count as f64,
                mean,
                pooled.basis.clone(),
                pooled.eigenvalues.clone(),
            )
        })
        .collect();

    let mut reseeds = vec![0usize; k_count];
    let mut log_likelihood = Vec::with_capacity(opts.em_iters);
    let mut reseeded = Vec::new();
    for iter in 0..opts.em_iters {
        let model = ExternalGmm { components };
        let (resp, ll) = e_step(&model, groups);
        if !ll.is_finite() {
            return Err(Error::Training(format!("log-likelihood not finite at iteration {iter}")));
        }
        log_likelihood.push(ll);
        let fitted = m_step(groups, &resp, k_count, b);
        let group_mass: Vec<f64> = (0..k_count)
            .map(|k| resp.iter().map(|r| r[k]).sum())
            .collect();

        let mut next: Vec<Option<GmmComponent>> = fitted
            .into_iter()
            .zip(&group_mass)
            .map(|(c, &m)| c.filter(|_| m >= opts.min_groups))
            .collect();
        let empty: Vec<usize> = (0..k_count).filter(|&k| next[k].is_none()).collect();
        if !empty.is_empty() {
            reseeded.push(iter);
        }
        for k in empty {
            reseeds[k] += 1;
            if reseeds[k] > opts.max_reseeds {
                return Err(Error::Training(format!(
                    "component {k} stayed empty after {} re-seeds",
                    opts.max_reseeds
                )));
            }
            // split the heaviest surviving component along its main axis
            let largest = (0..k_count)
                .filter(|&j| next[j].is_some())
                .max_by(|&a, &c| {
                    let (wa, wc) = (next[a].as_ref().unwrap().weight, next[c].as_ref().unwrap().weight);
                    wa.total_cmp(&wc).then(c.cmp(&a))
                })
                .ok_or_else(|| Error::Training("every component is empty".into()))?;
            let src = next[largest].take().unwrap();
            let shift = src.basis.column(0) * (0.5 * (src.eigenvalues[0] + EPS_COV).sqrt());
            let half = src.weight / 2.0;
            next[k] = Some(GmmComponent::new(
                half,
                &src.mean + &shift,
                src.basis.clone(),
                src.eigenvalues.clone(),
            ));
            next[largest] = Some(GmmComponent::new(half, &src.mean - &shift, src.basis, src.eigenvalues));
        }
        components = next.into_iter().map(|c| c.unwrap()).collect();
    }

    let model = ExternalGmm::new(components)?;
    let assignments = groups
        .par_iter()
        .map(|g| select_subdictionary(&model, g).1)
        .collect();
    Ok(GmmTraining {
        model,
        log_likelihood,
        reseeded,
        assignments,
    })
}

/// Sample `count` block-matched groups from random exemplars of the corpus,
/// each with its mean patch removed.
pub fn collect_training_groups(
    images: &[Image],
    params: &GroupingParams,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<DMatrix<f64>>> {
    let side = params.patch_side;
    let usable: Vec<&Image> = images
        .iter()
        .filter(|im| im.width() >= side && im.height() >= side)
        .collect();
    if usable.is_empty() {
        return Err(Error::Training(format!("no corpus image fits a {side}-pixel patch")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let img = usable[rng.index(usable.len())];
        let origin = (
            rng.index(img.height() - side + 1),
            rng.index(img.width() - side + 1),
        );
        let mut x = group_at(img, origin, params)?.matrix;
        let mean = x.column_sum() / x.ncols() as f64;
        for mut col in x.column_iter_mut() {
            col -= &mean;
        }
        out.push(x);
    }
    Ok(out)
}

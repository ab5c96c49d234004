//! Outer reconstruction loop: block matching, group prox, aggregation and a
//! per-block least-squares pull towards the measurements.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::config::SolverConfig;
use crate::dictionaries::ExternalGmm;
use crate::error::{Error, Result};
use crate::grouping::{aggregate, extract_groups, GroupPlan};
use crate::image::Image;
use crate::metrics::psnr;
use crate::regularizers::{prox, GroupContext, GroupParams};
use crate::sampling::{blocks_to_image, image_blocks, BlockMeasurementOperator, BlockUpdate, MeasurementSet};

/// Ridge added to `ΦΦᵀ` when it is numerically singular.
const INIT_RIDGE: f64 = 1e-10;

/// Relative size of the automatic `eta` against the mean eigenvalue of `ΦΦᵀ`.
pub const AUTO_ETA_FACTOR: f64 = 1e-3;

/// Minimum-norm least squares per block: `x₀ = Φᵀ(ΦΦᵀ)⁻¹ y_k`.
pub fn initialize(ms: &MeasurementSet, op: &BlockMeasurementOperator) -> Result<Image> {
    op.check(ms)?;
    let phi = op.phi();
    let gram = phi * phi.transpose();
    let chol = match Cholesky::new(gram.clone()) {
        Some(c) => c,
        None => Cholesky::new(gram + DMatrix::identity(op.rows(), op.rows()) * INIT_RIDGE)
            .ok_or_else(|| Error::RankDeficient("ΦΦᵀ is singular even with a ridge".into()))?,
    };
    let blocks: Vec<DVector<f64>> = ms
        .blocks
        .iter()
        .map(|y| phi.tr_mul(&chol.solve(y)))
        .collect();
    Ok(blocks_to_image(&blocks, ms.width, ms.height, op.block_size()))
}

/// `½‖y − Φx‖²` summed over blocks, with `x` zero-padded.
pub fn data_fidelity(img: &Image, ms: &MeasurementSet, op: &BlockMeasurementOperator) -> Result<f64> {
    op.check(ms)?;
    if img.width() != ms.width || img.height() != ms.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs measurements {}x{}",
            img.width(),
            img.height(),
            ms.width,
            ms.height
        )));
    }
    let sum: f64 = image_blocks(img, op.block_size())
        .iter()
        .zip(&ms.blocks)
        .map(|(x, y)| (y - op.forward(x)).norm_squared())
        .sum();
    Ok(0.5 * sum)
}

/// The configured `eta`, or a small multiple of the Gram scale when `auto`.
pub fn resolve_eta(cfg: &SolverConfig, op: &BlockMeasurementOperator) -> f64 {
    cfg.eta.unwrap_or_else(|| {
        let mean_eig = op.phi().norm_squared() / op.rows() as f64;
        AUTO_ETA_FACTOR * mean_eig
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    /// 1-based outer iteration.
    pub iter: usize,
    pub data_fidelity: f64,
    pub reg_surrogate: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub iteration: usize,
    pub x_hat: Image,
    pub data_fidelity: f64,
    pub reg_surrogate: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveReport {
    pub data_fidelity: f64,
    pub reg_surrogate: f64,
}

impl ObjectiveReport {
    pub fn total(&self) -> f64 {
        self.data_fidelity + self.reg_surrogate
    }
}

pub fn objective_report(state: &SolverState) -> ObjectiveReport {
    ObjectiveReport {
        data_fidelity: state.data_fidelity,
        reg_surrogate: state.reg_surrogate,
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iter,data_fidelity,reg_surrogate,psnr\n");
    for r in rows {
        let psnr = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.10e},{:.10e},{}",
            r.iter, r.data_fidelity, r.reg_surrogate, psnr
        );
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    fs::write(path, trace_csv(rows))?;
    Ok(())
}

/// Run the full reconstruction; see [`reconstruct_with`] for progress hooks.
pub fn reconstruct(
    ms: &MeasurementSet,
    op: &BlockMeasurementOperator,
    cfg: &SolverConfig,
    gmm: Option<&ExternalGmm>,
    truth: Option<&Image>,
) -> Result<SolverState> {
    reconstruct_with(ms, op, cfg, gmm, truth, |_| {})
}

/// [`reconstruct`] calling `on_iter` after every outer iteration.
pub fn reconstruct_with(
    ms: &MeasurementSet,
    op: &BlockMeasurementOperator,
    cfg: &SolverConfig,
    gmm: Option<&ExternalGmm>,
    truth: Option<&Image>,
    mut on_iter: impl FnMut(&TraceRow),
) -> Result<SolverState> {
    cfg.validate()?;
    op.check(ms)?;
    let kind = cfg.regularizer;
    if kind.needs_gmm() {
        let g = gmm.ok_or_else(|| Error::Config(format!("{kind} needs an external GMM model (--gmm)")))?;
        let b = cfg.patch_side * cfg.patch_side;
        if g.dim() != b {
            return Err(Error::Config(format!(
                "GMM patch dimension {} does not match patch_side {} (b = {b})",
                g.dim(),
                cfg.patch_side
            )));
        }
    }
    if let Some(t) = truth {
        if t.width() != ms.width || t.height() != ms.height {
            return Err(Error::Shape("ground truth size differs from the measurements".into()));
        }
    }

    let eta = resolve_eta(cfg, op);
    let update = BlockUpdate::new(op, eta)?;
    let base = GroupParams::from_config(cfg);

    let mut x = initialize(ms, op)?;
    let mut plan: Option<GroupPlan> = None;
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut reg_surrogate = 0.0;
    let mut decay = 1.0;

    for t in 0..cfg.outer_iters {
        let iteration = t + 1;
        match plan.as_mut() {
            Some(p) if t % cfg.match_every != 0 => p.refresh(&x)?,
            _ => plan = Some(extract_groups(&x, cfg)?),
        }
        let p = plan.as_ref().expect("plan set above");

        let ctx = GroupContext {
            params: GroupParams {
                lambda: base.lambda * decay,
                tau: base.tau * decay,
                ..base
            },
            gmm,
        };
        let estimates = p
            .groups
            .par_iter()
            .map(|g| prox(kind, &g.matrix, &ctx))
            .collect::<Result<Vec<_>>>()?;
        reg_surrogate = estimates.iter().map(|e| e.penalty).sum();
        let matrices: Vec<DMatrix<f64>> = estimates.into_iter().map(|e| e.matrix).collect();
        let z = aggregate(p, &matrices)?;
        if !z.is_finite() {
            return Err(Error::Divergence { iteration });
        }

        let blocks: Vec<DVector<f64>> = image_blocks(&z, op.block_size())
            .par_iter()
            .zip(ms.blocks.par_iter())
            .map(|(zb, y)| update.apply(zb, y))
            .collect();
        let next = blocks_to_image(&blocks, ms.width, ms.height, op.block_size());
        if !next.is_finite() || !reg_surrogate.is_finite() {
            return Err(Error::Divergence { iteration });
        }

        let change = relative_change(&x, &next);
        x = next;
        let row = TraceRow {
            iter: iteration,
            data_fidelity: data_fidelity(&x, ms, op)?,
            reg_surrogate,
            psnr: match truth {
                Some(t) => Some(psnr(&x, t)?.db),
                None => None,
            },
        };
        on_iter(&row);
        trace.push(row);
        decay *= cfg.lambda_decay();
        if cfg.rel_tol.is_some_and(|tol| change < tol) {
            break;
        }
    }

    Ok(SolverState {
        iteration: trace.len(),
        data_fidelity: data_fidelity(&x, ms, op)?,
        reg_surrogate,
        x_hat: x,
        trace,
    })
}

fn relative_change(old: &Image, new: &Image) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (a, b) in old.data().iter().zip(new.data()) {
        diff += (a - b) * (a - b);
        norm += b * b;
    }
    if norm == 0.0 {
        if diff == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (diff / norm).sqrt()
    }
}

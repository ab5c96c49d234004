//! Block matching and aggregation.
//!
//! Exemplar patches sit on a regular grid (`patch_stride`, at most the patch
//! side, plus the last row/column so the border is covered). For each exemplar the `m` closest
//! patches inside a search window form the columns of its group matrix.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupingParams {
    pub patch_side: usize,
    pub group_size: usize,
    pub search_window: usize,
    pub stride: usize,
}

impl From<&SolverConfig> for GroupingParams {
    fn from(cfg: &SolverConfig) -> Self {
        Self {
            patch_side: cfg.patch_side,
            group_size: cfg.group_size,
            search_window: cfg.search_window,
            stride: cfg.patch_stride,
        }
    }
}

/// One exemplar and its nearest patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub exemplar_index: usize,
    /// Patch origins `(row, col)`; `members[0]` is the exemplar.
    pub members: Vec<(usize, usize)>,
    /// Euclidean distance of each member to the exemplar, nondecreasing.
    pub distances: Vec<f64>,
    /// `b x m`, column `j` is the row-major patch at `members[j]`.
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub width: usize,
    pub height: usize,
    pub patch_side: usize,
    /// Group size actually used; smaller than requested when the search
    /// window holds fewer candidates.
    pub group_size: usize,
    pub requested_group_size: usize,
    pub groups: Vec<PatchGroup>,
}

impl GroupPlan {
    pub fn group_size_shrunk(&self) -> bool {
        self.group_size < self.requested_group_size
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        self.groups.iter().map(|g| g.matrix.clone()).collect()
    }

    /// Reload every group matrix from `img`, keeping the matched positions.
    pub fn refresh(&mut self, img: &Image) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::Shape("refresh with an image of different size".into()));
        }
        let side = self.patch_side;
        self.groups
            .par_iter_mut()
            .for_each(|g| g.matrix = group_matrix(img, &g.members, side));
        Ok(())
    }
}

/// Exemplar coordinates along one axis: `0, stride, 2·stride, …` plus `len − side`.
/// A stride above `side` would leave uncovered gaps, so it is capped there.
fn grid_positions(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let last = len - side;
    let mut out: Vec<usize> = (0..=last).step_by(stride.min(side)).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Inclusive range of candidate origins along one axis for an exemplar at `pos`.
fn window_range(pos: usize, side: usize, window: usize, len: usize) -> (usize, usize) {
    let w = window.min(len);
    let top = pos as isize - ((w - side) / 2) as isize;
    let top = top.clamp(0, (len - w) as isize) as usize;
    (top, top + w - side)
}

fn sq_distance(img: &Image, a: (usize, usize), b: (usize, usize), side: usize) -> f64 {
    let w = img.width();
    let data = img.data();
    let mut acc = 0.0;
    for r in 0..side {
        let pa = &data[(a.0 + r) * w + a.1..][..side];
        let pb = &data[(b.0 + r) * w + b.1..][..side];
        for (x, y) in pa.iter().zip(pb) {
            let d = x - y;
            acc += d * d;
        }
    }
    acc
}

pub(crate) fn group_matrix(img: &Image, members: &[(usize, usize)], side: usize) -> DMatrix<f64> {
    let b = side * side;
    let w = img.width();
    let data = img.data();
    let mut m = DMatrix::zeros(b, members.len());
    for (j, &(r0, c0)) in members.iter().enumerate() {
        let mut col = m.column_mut(j);
        for r in 0..side {
            let row = &data[(r0 + r) * w + c0..][..side];
            for (c, v) in row.iter().enumerate() {
                col[r * side + c] = *v;
            }
        }
    }
    m
}

/// Ordering of candidates: distance, then raster order of the origin.
fn candidate_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

fn match_exemplar(
    img: &Image,
    exemplar: (usize, usize),
    params: &GroupingParams,
    m: usize,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let side = params.patch_side;
    let (r_lo, r_hi) = window_range(exemplar.0, side, params.search_window, img.height());
    let (c_lo, c_hi) = window_range(exemplar.1, side, params.search_window, img.width());

    let mut cands = Vec::with_capacity((r_hi - r_lo + 1) * (c_hi - c_lo + 1));
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            if (r, c) != exemplar {
                cands.push((sq_distance(img, exemplar, (r, c), side), r, c));
            }
        }
    }
    let keep = m - 1;
    if keep > 0 && keep < cands.len() {
        cands.select_nth_unstable_by(keep - 1, candidate_order);
        cands.truncate(keep);
    }
    cands.sort_by(candidate_order);
    cands.truncate(keep);

    let mut members = Vec::with_capacity(m);
    let mut distances = Vec::with_capacity(m);
    members.push(exemplar);
    distances.push(0.0);
    for (d, r, c) in cands {
        members.push((r, c));
        distances.push(d.sqrt());
    }
    (members, distances)
}

/// Group for a single exemplar at `origin`.
pub fn group_at(img: &Image, origin: (usize, usize), params: &GroupingParams) -> Result<PatchGroup> {
    let side = params.patch_side;
    if side == 0
        || origin.0 + side > img.height()
        || origin.1 + side > img.width()
        || params.search_window < side
        || params.group_size == 0
    {
        return Err(Error::Config(format!(
            "cannot match a {side}-pixel patch at {origin:?} in a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let per_axis = |len: usize| params.search_window.min(len) - side + 1;
    let m = params
        .group_size
        .min(per_axis(img.height()) * per_axis(img.width()));
    let (members, distances) = match_exemplar(img, origin, params, m);
    let matrix = group_matrix(img, &members, side);
    Ok(PatchGroup {
        exemplar_index: 0,
        members,
        distances,
        matrix,
    })
}

/// Form one group per exemplar on the stride grid.
pub fn extract_groups(img: &Image, cfg: &SolverConfig) -> Result<GroupPlan> {
    extract_groups_with(img, &GroupingParams::from(cfg))
}

pub fn extract_groups_with(img: &Image, params: &GroupingParams) -> Result<GroupPlan> {
    let side = params.patch_side;
    if side == 0 || side > img.width().min(img.height()) {
        return Err(Error::Config(format!(
            "patch side {side} does not fit a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    if params.search_window < side {
        return Err(Error::Config(format!(
            "search window {} smaller than patch side {side}",
            params.search_window
        )));
    }
    if params.stride == 0 || params.group_size == 0 {
        return Err(Error::Config("stride and group size must be positive".into()));
    }

    let rows = grid_positions(img.height(), side, params.stride);
    let cols = grid_positions(img.width(), side, params.stride);
    let exemplars: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();

    let per_axis = |len: usize| params.search_window.min(len) - side + 1;
    let candidates = per_axis(img.height()) * per_axis(img.width());
    let m = params.group_size.min(candidates);

    let groups = exemplars
        .par_iter()
        .enumerate()
        .map(|(idx, &ex)| {
            let (members, distances) = match_exemplar(img, ex, params, m);
            let matrix = group_matrix(img, &members, side);
            PatchGroup {
                exemplar_index: idx,
                members,
                distances,
                matrix,
            }
        })
        .collect();

    Ok(GroupPlan {
        width: img.width(),
        height: img.height(),
        patch_side: side,
        group_size: m,
        requested_group_size: params.group_size,
        groups,
    })
}

/// Put processed group matrices back: each pixel is the plain average of
/// every patch estimate covering it. Sums are compensated, so averaging
/// hundreds of identical estimates returns the value to within an ulp or two.
pub fn aggregate(plan: &GroupPlan, processed: &[DMatrix<f64>]) -> Result<Image> {
    if processed.len() != plan.groups.len() {
        return Err(Error::Shape(format!(
            "{} processed groups for a plan of {}",
            processed.len(),
            plan.groups.len()
        )));
    }
    let side = plan.patch_side;
    let b = side * side;
    let w = plan.width;
    let mut sum = vec![0.0; plan.width * plan.height];
    let mut comp = vec![0.0; plan.width * plan.height];
    let mut count = vec![0u32; plan.width * plan.height];
    for (g, mat) in plan.groups.iter().zip(processed) {
        if mat.shape() != (b, g.members.len()) {
            return Err(Error::Shape(format!(
                "group {} is {}x{}, expected {}x{}",
                g.exemplar_index,
                mat.nrows(),
                mat.ncols(),
                b,
                g.members.len()
            )));
        }
        for (j, &(r0, c0)) in g.members.iter().enumerate() {
            let col = mat.column(j);
            for r in 0..side {
                let base = (r0 + r) * w + c0;
                for c in 0..side {
                    let (i, v) = (base + c, col[r * side + c]);
                    let t = sum[i] + v;
                    // Neumaier: recover the low-order bits lost in `t`
                    comp[i] += if sum[i].abs() >= v.abs() { (sum[i] - t) + v } else { (v - t) + sum[i] };
                    sum[i] = t;
                    count[base + c] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .zip(&comp)
        .zip(&count)
        .map(|((&s, &e), &n)| {
            debug_assert!(n > 0, "uncovered pixel");
            (s + e) / f64::from(n)
        })
        .collect();
    Image::new(plan.width, plan.height, data)
}

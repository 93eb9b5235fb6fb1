//! Contour-guided patch masking.
//!
//! Patches are scored by their mean contour intensity. The `m` highest
//! scoring patches stay visible and the rest are masked. A contour fraction
//! below one keeps only part of the visible budget by score and draws the
//! remainder uniformly, down to plain random masking at zero.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::imagecore::{check_divisible, ContourMap, PatchGrid};
use crate::{Error, Result};

/// Mean contour intensity per patch, in row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores(pub Vec<f64>);

impl PatchScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn patch_scores(contour: &ContourMap, patch_size: usize) -> Result<PatchScores> {
    check_divisible(contour.height, contour.width, patch_size)?;
    let (rows, cols) = (contour.height / patch_size, contour.width / patch_size);
    let area = (patch_size * patch_size) as f64;
    let mut scores = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut sum = 0.0;
            for dy in 0..patch_size {
                let row = (pr * patch_size + dy) * contour.width + pc * patch_size;
                sum += contour.values[row..row + patch_size].iter().sum::<f64>();
            }
            scores.push(sum / area);
        }
    }
    Ok(PatchScores(scores))
}

/// Visible/masked partition of the patch indices. Both index lists are
/// sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
    pub num_patches: usize,
    pub mask_rate: f64,
    pub contour_fraction: f64,
    pub seed: u64,
}

/// Number of visible patches for `k` patches at mask rate `rho`.
pub fn visible_count(k: usize, rho: f64) -> usize {
    ((1.0 - rho) * k as f64).round() as usize
}

pub fn validate_mask_rate(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::config("mask_rate", format!("must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

/// Patch indices sorted by descending score, ties by lower index.
pub fn sort_by_score(scores: &PatchScores) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
    order
}

pub fn plan_mask(scores: &PatchScores, rho: f64, seed: u64, gamma: f64) -> Result<MaskPlan> {
    validate_mask_rate(rho)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(
            "contour_fraction",
            format!("must lie in [0, 1], got {gamma}"),
        ));
    }
    let k = scores.len();
    let m = visible_count(k, rho);
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask rate {rho} leaves no visible patch out of {k}"
        )));
    }
    if scores.0.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidArgument(
            "patch scores must be finite and non-negative".into(),
        ));
    }
    let by_score = ((gamma * m as f64).ceil() as usize).min(m);
    let order = sort_by_score(scores);
    let mut kept: BTreeSet<usize> = order[..by_score].iter().copied().collect();
    if by_score < m {
        let residual: Vec<usize> = order[by_score..].to_vec();
        let mut rng = crate::seed::rng(seed, "mask-plan", &[]);
        for i in index::sample(&mut rng, residual.len(), m - by_score) {
            kept.insert(residual[i]);
        }
    }
    let masked = (0..k).filter(|i| !kept.contains(i)).collect();
    Ok(MaskPlan {
        kept: kept.into_iter().collect(),
        masked,
        num_patches: k,
        mask_rate: rho,
        contour_fraction: gamma,
        seed,
    })
}

/// Visible patches with their grid positions, plus the masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPatches {
    pub kept: Vec<(usize, Vec<f64>)>,
    pub masked_positions: Vec<usize>,
}

pub fn apply_mask(grid: &PatchGrid, plan: &MaskPlan) -> Result<MaskedPatches> {
    if plan.num_patches != grid.len() {
        return Err(Error::Shape(format!(
            "mask plan covers {} patches, grid has {}",
            plan.num_patches,
            grid.len()
        )));
    }
    let kept = plan
        .kept
        .iter()
        .map(|&i| (i, grid.patches[i].clone()))
        .collect();
    Ok(MaskedPatches {
        kept,
        masked_positions: plan.masked.clone(),
    })
}

//! Budgeted cell selection: transmission gain, byte capacity, top-K ranking,
//! usage accounting and the communication terms of the training objective.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bev::BlindZoneMask;
use crate::error::{Error, Result};
use crate::grid::{CellIndex, GridSpec};

/// Per-link byte budget and the wire cost model of one transmitted cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSpec {
    pub b_bytes: u64,
    pub h_hdr: u64,
    pub b_idx: u64,
    pub b_feat: u64,
    pub channels: u64,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec {
            b_bytes: 1024,
            h_hdr: 24,
            b_idx: 4,
            b_feat: 1,
            channels: 64,
        }
    }
}

impl BudgetSpec {
    pub fn with_bytes(self, b_bytes: u64) -> Self {
        BudgetSpec { b_bytes, ..self }
    }

    /// `b_idx + C·b_feat`.
    pub fn b_cell(&self) -> u64 {
        self.b_idx + self.channels * self.b_feat
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::invalid("budget needs at least one feature channel"));
        }
        if self.b_cell() == 0 {
            return Err(Error::invalid("per-cell byte cost must be positive"));
        }
        Ok(())
    }
}

/// Number of cells that fit in the budget after the header.
pub fn capacity_cells(budget: &BudgetSpec) -> usize {
    let b_cell = budget.b_cell();
    if b_cell == 0 || budget.b_bytes < budget.h_hdr {
        return 0;
    }
    ((budget.b_bytes - budget.h_hdr) / b_cell) as usize
}

/// Which score ranks candidate cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    SpatialOnly,
    RiskOnly,
    Union,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::SpatialOnly => "s",
            GateMode::RiskOnly => "r",
            GateMode::Union => "union",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" | "spatial" | "spatial-only" => Ok(GateMode::SpatialOnly),
            "r" | "risk" | "risk-only" => Ok(GateMode::RiskOnly),
            "union" => Ok(GateMode::Union),
            other => Err(Error::invalid(format!("unknown gate mode '{other}' (expected s, r or union)"))),
        }
    }
}

/// Spatial and risk scores, the blind mask they were combined with, and the
/// combined gain `α·g_sp·g_risk + (1−α)·Ō·g_risk`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMap {
    grid: GridSpec,
    g_sp: Vec<f64>,
    g_risk: Vec<f64>,
    blind: Vec<bool>,
    alpha: f64,
    combined: Vec<f64>,
}

impl GainMap {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spatial(&self) -> &[f64] {
        &self.g_sp
    }

    pub fn risk(&self) -> &[f64] {
        &self.g_risk
    }

    pub fn blind(&self) -> &[bool] {
        &self.blind
    }

    pub fn combined(&self) -> &[f64] {
        &self.combined
    }

    fn scores(&self, gate: GateMode) -> &[f64] {
        match gate {
            GateMode::SpatialOnly => &self.g_sp,
            GateMode::RiskOnly => &self.g_risk,
            GateMode::Union => &self.combined,
        }
    }
}

pub fn compute_gain(
    g_sp: &[f64],
    g_risk: &[f64],
    blind: &BlindZoneMask,
    alpha: f64,
) -> Result<GainMap> {
    let grid = *blind.grid();
    if g_sp.len() != grid.len() || g_risk.len() != grid.len() {
        return Err(Error::invalid(format!(
            "gain inputs have {} / {} cells, blind mask has {}",
            g_sp.len(),
            g_risk.len(),
            grid.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    let blind_cells = blind.occluded().to_vec();
    let combined = g_sp
        .iter()
        .zip(g_risk)
        .zip(&blind_cells)
        .map(|((&sp, &risk), &b)| alpha * sp * risk + (1.0 - alpha) * (b as u8 as f64) * risk)
        .collect();
    Ok(GainMap {
        grid,
        g_sp: g_sp.to_vec(),
        g_risk: g_risk.to_vec(),
        blind: blind_cells,
        alpha,
        combined,
    })
}

/// Spatial mask S, risk mask R and the transmitted cells `S ∨ R`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    grid: GridSpec,
    spatial: Vec<bool>,
    risk: Vec<bool>,
    selected: Vec<CellIndex>,
}

impl SelectionMask {
    pub fn empty(grid: GridSpec) -> Self {
        SelectionMask {
            grid,
            spatial: vec![false; grid.len()],
            risk: vec![false; grid.len()],
            selected: Vec::new(),
        }
    }

    /// Mask with both S and R set on `cells`.
    pub fn from_cells(grid: GridSpec, cells: impl IntoIterator<Item = CellIndex>) -> Result<Self> {
        let mut m = SelectionMask::empty(grid);
        for c in cells {
            if c >= grid.len() {
                return Err(Error::invalid(format!("cell {c} outside grid")));
            }
            m.spatial[c] = true;
            m.risk[c] = true;
        }
        m.rebuild_selected();
        Ok(m)
    }

    fn rebuild_selected(&mut self) {
        self.selected = (0..self.grid.len())
            .filter(|&i| self.spatial[i] || self.risk[i])
            .collect();
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn spatial(&self) -> &[bool] {
        &self.spatial
    }

    pub fn risk(&self) -> &[bool] {
        &self.risk
    }

    /// Selected cells in ascending row-major order.
    pub fn selected(&self) -> &[CellIndex] {
        &self.selected
    }

    pub fn is_selected(&self, idx: CellIndex) -> bool {
        self.spatial[idx] || self.risk[idx]
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Indices of the `k` highest positive scores; ties go to the smaller index.
pub fn top_k_positive(scores: &[f64], k: usize) -> Vec<CellIndex> {
    let mut ranked: Vec<CellIndex> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    let by_rank = |a: &CellIndex, b: &CellIndex| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < ranked.len() {
        if k == 0 {
            return Vec::new();
        }
        ranked.select_nth_unstable_by(k - 1, by_rank);
        ranked.truncate(k);
    }
    ranked.sort_unstable();
    ranked
}

/// Top-`k` cells under the gate's score. Zero-score cells are never chosen.
pub fn select_cells(gain: &GainMap, k: usize, gate: GateMode) -> SelectionMask {
    let chosen = top_k_positive(gain.scores(gate), k);
    let mut mask = SelectionMask::empty(gain.grid);
    for &c in &chosen {
        match gate {
            GateMode::SpatialOnly => mask.spatial[c] = true,
            GateMode::RiskOnly => mask.risk[c] = true,
            GateMode::Union => {
                mask.spatial[c] = true;
                mask.risk[c] = true;
            }
        }
    }
    mask.selected = chosen;
    mask
}

/// Batch byte usage: one header per sample plus every non-ego selected cell.
///
/// `selected_counts[b][l]` is the number of selected cells of agent `l` in
/// sample `b`; agent 0 is the ego and is not counted.
pub fn usage_bytes(selected_counts: &[Vec<usize>], budget: &BudgetSpec, batch_size: usize) -> u64 {
    let cells: u64 = selected_counts
        .iter()
        .map(|agents| agents.iter().skip(1).map(|&c| c as u64).sum::<u64>())
        .sum();
    batch_size as u64 * budget.h_hdr + cells * budget.b_cell()
}

/// Hinge on over-usage: `max(0, U / B_target − 1)`. `b_target` must be positive.
pub fn overuse_penalty(usage: f64, b_target: f64) -> f64 {
    (usage / b_target - 1.0).max(0.0)
}

/// `l_det + λ_risk·risk_mse + λ_comm·φ`.
pub fn total_objective(l_det: f64, risk_mse: f64, phi: f64, lambda_risk: f64, lambda_comm: f64) -> f64 {
    l_det + lambda_risk * risk_mse + lambda_comm * phi
}

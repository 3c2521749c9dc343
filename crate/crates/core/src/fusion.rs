//! Surrogate BEV features, safety-focused re-masking, location-wise
//! attention fusion and surrogate decoding.
//!
//! Feature channels carry per-cell statistics rather than learned
//! embeddings:
//!
//! | channel | content |
//! |---------|---------|
//! | 0       | object evidence (occupancy) |
//! | 1       | cell risk |
//! | 2       | occlusion probability |
//! | 3..C    | `o · (½ + ½·sin(ω_k·s_k + φ_k))`, with `s_k` cycling over channels 0..3 |
//!
//! The expansion channels are gated by channel 0 so that empty cells stay
//! near the zero vector.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellIndex, GridSpec, Vec2};
use crate::payload::FeaturePayload;
use crate::risk::RiskMap;
use crate::selection::SelectionMask;

pub const CH_OCCUPANCY: usize = 0;
pub const CH_RISK: usize = 1;
pub const CH_OCC_PROB: usize = 2;
const BASE_CHANNELS: usize = 3;

/// Read access to a `C × H × W` feature tensor, one cell vector at a time.
pub trait FeatureSource {
    fn grid(&self) -> &GridSpec;
    fn channels(&self) -> usize;
    /// Write the `C` channel values of one cell into `out`.
    fn write_cell(&self, idx: CellIndex, out: &mut [f32]);

    /// A single channel value.
    fn value(&self, idx: CellIndex, channel: usize) -> f64 {
        let mut buf = vec![0.0; self.channels()];
        self.write_cell(idx, &mut buf);
        buf[channel] as f64
    }
}

/// Fill one cell vector from its three base statistics.
pub fn encode_cell(occupancy: f64, risk: f64, occ_prob: f64, out: &mut [f32]) {
    let base = [occupancy, risk, occ_prob];
    for (c, slot) in out.iter_mut().enumerate() {
        *slot = if c < BASE_CHANNELS {
            base.get(c).copied().unwrap_or(0.0) as f32
        } else if occupancy == 0.0 {
            0.0
        } else {
            let k = c - BASE_CHANNELS;
            let omega = 1.0 + (k / BASE_CHANNELS) as f64;
            let phase = 0.37 * k as f64;
            let s = base[k % BASE_CHANNELS];
            (occupancy * (0.5 + 0.5 * (omega * s + phase).sin())) as f32
        };
    }
}

/// Base statistic planes that expand lazily into full feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateFeatures {
    grid: GridSpec,
    channels: usize,
    occupancy: Vec<f64>,
    risk: Vec<f64>,
    occ_prob: Vec<f64>,
}

impl SurrogateFeatures {
    pub fn new(
        grid: GridSpec,
        channels: usize,
        occupancy: Vec<f64>,
        risk: Vec<f64>,
        occ_prob: Vec<f64>,
    ) -> Result<Self> {
        if channels < BASE_CHANNELS {
            return Err(Error::invalid(format!("surrogate features need at least {BASE_CHANNELS} channels")));
        }
        for plane in [&occupancy, &risk, &occ_prob] {
            if plane.len() != grid.len() {
                return Err(Error::invalid("feature plane shape does not match grid"));
            }
            if plane.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("feature statistics must lie in [0, 1]"));
            }
        }
        Ok(SurrogateFeatures {
            grid,
            channels,
            occupancy,
            risk,
            occ_prob,
        })
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    pub fn risk(&self) -> &[f64] {
        &self.risk
    }

    pub fn occ_prob(&self) -> &[f64] {
        &self.occ_prob
    }
}

impl FeatureSource for SurrogateFeatures {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn write_cell(&self, idx: CellIndex, out: &mut [f32]) {
        encode_cell(self.occupancy[idx], self.risk[idx], self.occ_prob[idx], out);
    }

    fn value(&self, idx: CellIndex, channel: usize) -> f64 {
        match channel {
            CH_OCCUPANCY => self.occupancy[idx] as f32 as f64,
            CH_RISK => self.risk[idx] as f32 as f64,
            CH_OCC_PROB => self.occ_prob[idx] as f32 as f64,
            _ => {
                let mut buf = vec![0.0; self.channels];
                self.write_cell(idx, &mut buf);
                buf[channel] as f64
            }
        }
    }
}

/// Dense feature tensor, stored cell-major (`data[idx·C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    grid: GridSpec,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureField {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        FeatureField {
            grid,
            channels,
            data: vec![0.0; grid.len() * channels],
        }
    }

    pub fn materialize<F: FeatureSource + ?Sized>(src: &F) -> Self {
        let mut f = FeatureField::zeros(*src.grid(), src.channels());
        let c = f.channels;
        for (idx, cell) in f.data.chunks_exact_mut(c).enumerate() {
            src.write_cell(idx, cell);
        }
        f
    }

    pub fn get(&self, channel: usize, idx: CellIndex) -> f64 {
        self.data[idx * self.channels + channel] as f64
    }

    pub fn set(&mut self, channel: usize, idx: CellIndex, value: f64) {
        self.data[idx * self.channels + channel] = value as f32;
    }

    pub fn cell(&self, idx: CellIndex) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    fn cell_mut(&mut self, idx: CellIndex) -> &mut [f32] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn channel_plane(&self, channel: usize) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.get(channel, i)).collect()
    }
}

impl FeatureSource for FeatureField {
    fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn write_cell(&self, idx: CellIndex, out: &mut [f32]) {
        out.copy_from_slice(self.cell(idx));
    }

    fn value(&self, idx: CellIndex, channel: usize) -> f64 {
        self.get(channel, idx)
    }
}

/// Zero every cell outside `S ∨ R`.
pub fn apply_masks(features: &FeatureField, spatial: &[bool], risk: &[bool]) -> Result<FeatureField> {
    let n = features.grid.len();
    if spatial.len() != n || risk.len() != n {
        return Err(Error::invalid("mask shape does not match feature grid"));
    }
    let mut out = features.clone();
    for idx in 0..n {
        if !(spatial[idx] || risk[idx]) {
            out.cell_mut(idx).fill(0.0);
        }
    }
    Ok(out)
}

/// Attention weights at one fused cell. Weights over the ego and all
/// contributors sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellWeights {
    pub ego: f64,
    pub partners: Vec<(u32, f64)>,
}

/// Which partners contributed to each fused cell, with their weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedCellProvenance {
    pub cells: BTreeMap<CellIndex, CellWeights>,
}

/// Ego features with fused vectors overlaid on the cells partners filled.
#[derive(Debug, Clone)]
pub struct FusedFeatures<'a, F: FeatureSource + ?Sized> {
    ego: &'a F,
    fused: BTreeMap<CellIndex, Vec<f32>>,
    pub provenance: FusedCellProvenance,
}

impl<F: FeatureSource + ?Sized> FusedFeatures<'_, F> {
    /// Cells whose vector differs from the ego input because of partner data.
    pub fn fused_cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        self.fused.keys().copied()
    }
}

impl<F: FeatureSource + ?Sized> FeatureSource for FusedFeatures<'_, F> {
    fn grid(&self) -> &GridSpec {
        self.ego.grid()
    }

    fn channels(&self) -> usize {
        self.ego.channels()
    }

    fn write_cell(&self, idx: CellIndex, out: &mut [f32]) {
        match self.fused.get(&idx) {
            Some(v) => out.copy_from_slice(v),
            None => self.ego.write_cell(idx, out),
        }
    }

    fn value(&self, idx: CellIndex, channel: usize) -> f64 {
        match self.fused.get(&idx) {
            Some(v) => v[channel] as f64,
            None => self.ego.value(idx, channel),
        }
    }
}

/// Location-wise dot-product attention with the ego feature as query.
///
/// Only cells a partner transmitted and kept under its own `S ∨ R` mask
/// receive keys; every other cell keeps the ego vector.
pub fn fuse<'a, F: FeatureSource + ?Sized>(
    ego: &'a F,
    partners: &[(FeaturePayload, SelectionMask)],
) -> Result<FusedFeatures<'a, F>> {
    let grid = *ego.grid();
    let channels = ego.channels();
    let hash = grid.hash();
    let mut contributions: BTreeMap<CellIndex, Vec<(u32, Vec<f64>)>> = BTreeMap::new();
    for (payload, mask) in partners {
        if payload.header.grid_hash != hash || mask.grid() != &grid {
            return Err(Error::protocol(format!(
                "payload from agent {} was built for a different grid",
                payload.header.sender
            )));
        }
        if payload.channels() != channels {
            return Err(Error::protocol(format!(
                "payload from agent {} has {} channels, ego has {channels}",
                payload.header.sender,
                payload.channels(),
            )));
        }
        for (cell, feats) in payload.cells() {
            if mask.is_selected(cell) {
                contributions
                    .entry(cell)
                    .or_default()
                    .push((payload.header.sender, feats));
            }
        }
    }

    let mut fused = BTreeMap::new();
    let mut provenance = FusedCellProvenance::default();
    let scale = (channels as f64).sqrt();
    let mut buf = vec![0.0f32; channels];
    for (cell, contribs) in contributions {
        ego.write_cell(cell, &mut buf);
        let query: Vec<f64> = buf.iter().map(|&v| v as f64).collect();
        let dot = |k: &[f64]| query.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale;
        let mut logits = Vec::with_capacity(contribs.len() + 1);
        logits.push(dot(&query));
        logits.extend(contribs.iter().map(|(_, f)| dot(f)));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let out: Vec<f32> = (0..channels)
            .map(|c| {
                let mut v = weights[0] * query[c];
                for (w, (_, f)) in weights[1..].iter().zip(&contribs) {
                    v += w * f[c];
                }
                v as f32
            })
            .collect();
        fused.insert(cell, out);
        provenance.cells.insert(
            cell,
            CellWeights {
                ego: weights[0],
                partners: contribs.iter().map(|(id, _)| *id).zip(weights[1..].iter().copied()).collect(),
            },
        );
    }
    Ok(FusedFeatures {
        ego,
        fused,
        provenance,
    })
}

/// Oriented BEV box with detection score and risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub center: Vec2,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub score: f64,
    pub risk: f64,
}

impl DetectionBox {
    pub fn translated(&self, offset: Vec2) -> DetectionBox {
        DetectionBox {
            center: [self.center[0] + offset[0], self.center[1] + offset[1]],
            ..*self
        }
    }
}

/// Axis-aligned boxes around 4-connected components of channel 0 above
/// `occupancy_threshold` with at least `min_cells` cells.
pub fn decode_detections<F: FeatureSource + ?Sized>(
    fused: &F,
    occupancy_threshold: f64,
    min_cells: usize,
) -> Vec<DetectionBox> {
    let g = *fused.grid();
    let (rows, cols) = (g.rows(), g.cols());
    let hot: Vec<bool> = (0..g.len()).map(|i| fused.value(i, CH_OCCUPANCY) > occupancy_threshold).collect();
    let mut seen = vec![false; g.len()];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !hot[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        let (mut n, mut score_sum, mut risk_max) = (0usize, 0.0, 0.0f64);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = g.row_col(idx);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            n += 1;
            score_sum += fused.value(idx, CH_OCCUPANCY);
            risk_max = risk_max.max(fused.value(idx, CH_RISK));
            let neighbours = [
                (r > 0).then(|| idx - cols),
                (r + 1 < rows).then(|| idx + cols),
                (c > 0).then(|| idx - 1),
                (c + 1 < cols).then(|| idx + 1),
            ];
            for nb in neighbours.into_iter().flatten() {
                if hot[nb] && !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        if n < min_cells {
            continue;
        }
        let cs = g.cell_size();
        let lo = g.cell_center(g.index(r0, c0));
        let hi = g.cell_center(g.index(r1, c1));
        boxes.push(DetectionBox {
            center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0],
            length: (c1 - c0 + 1) as f64 * cs,
            width: (r1 - r0 + 1) as f64 * cs,
            yaw: 0.0,
            score: (score_sum / n as f64).clamp(0.0, 1.0),
            risk: risk_max.clamp(0.0, 1.0),
        });
    }
    boxes
}

/// Channel 1 clipped to `[0, 1]`.
pub fn decode_risk<F: FeatureSource + ?Sized>(fused: &F) -> RiskMap {
    let values = (0..fused.grid().len())
        .map(|i| fused.value(i, CH_RISK).clamp(0.0, 1.0))
        .collect();
    RiskMap::from_values(*fused.grid(), values).expect("clipped values are in range")
}

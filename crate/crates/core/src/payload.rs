//! Bit-exact little-endian codec for selected-feature payloads.
//!
//! ```text
//! header (h_hdr bytes)
//!   u32 sender id | u32 frame id | u64 grid hash | u32 cell count | zero padding
//! per cell (b_cell = 4 + C bytes)
//!   u32 row-major cell index | C × u8 features, q = round(255·clamp(f, 0, 1))
//! ```

use crate::error::{Error, Result};
use crate::fusion::FeatureSource;
use crate::grid::{CellIndex, GridSpec};
use crate::selection::{capacity_cells, BudgetSpec, SelectionMask};

/// Bytes occupied by the mandatory header fields.
pub const HEADER_FIELDS_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadHeader {
    pub sender: u32,
    pub frame: u32,
    pub grid_hash: u64,
}

/// A decoded payload: header plus quantized features per transmitted cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePayload {
    pub header: PayloadHeader,
    channels: usize,
    indices: Vec<u32>,
    features: Vec<u8>,
}

impl FeaturePayload {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn quantized(&self, i: usize) -> &[u8] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// `(cell, dequantized features)` in ascending cell order.
    pub fn cells(&self) -> impl Iterator<Item = (CellIndex, Vec<f64>)> + '_ {
        self.indices
            .iter()
            .enumerate()
            .map(|(i, &c)| (c as CellIndex, self.quantized(i).iter().map(|&q| dequantize(q)).collect()))
    }
}

pub fn quantize(f: f64) -> u8 {
    (255.0 * f.clamp(0.0, 1.0)).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0
}

fn check_layout(budget: &BudgetSpec) -> Result<()> {
    if budget.b_idx != 4 || budget.b_feat != 1 {
        return Err(Error::invalid(format!(
            "payload layout requires b_idx = 4 and b_feat = 1 (got {} and {})",
            budget.b_idx, budget.b_feat
        )));
    }
    if (budget.h_hdr as usize) < HEADER_FIELDS_LEN {
        return Err(Error::invalid(format!(
            "h_hdr = {} cannot hold the {HEADER_FIELDS_LEN}-byte header",
            budget.h_hdr
        )));
    }
    budget.validate()
}

/// Serialize without a capacity check. Used only by the unbudgeted policy.
pub fn encode_payload<F: FeatureSource + ?Sized>(
    features: &F,
    mask: &SelectionMask,
    budget: &BudgetSpec,
    header: PayloadHeader,
) -> Result<Vec<u8>> {
    check_layout(budget)?;
    let channels = features.channels();
    if channels as u64 != budget.channels {
        return Err(Error::invalid(format!(
            "feature field has {channels} channels, budget expects {}",
            budget.channels
        )));
    }
    if mask.grid() != features.grid() || header.grid_hash != features.grid().hash() {
        return Err(Error::protocol("selection mask, features and header disagree on the grid"));
    }
    let cells = mask.selected();
    let h_hdr = budget.h_hdr as usize;
    let mut out = Vec::with_capacity(h_hdr + cells.len() * budget.b_cell() as usize);
    out.extend_from_slice(&header.sender.to_le_bytes());
    out.extend_from_slice(&header.frame.to_le_bytes());
    out.extend_from_slice(&header.grid_hash.to_le_bytes());
    out.extend_from_slice(&(cells.len() as u32).to_le_bytes());
    out.resize(h_hdr, 0);
    let mut buf = vec![0.0f32; channels];
    for &c in cells {
        out.extend_from_slice(&(c as u32).to_le_bytes());
        features.write_cell(c, &mut buf);
        out.extend(buf.iter().map(|&f| quantize(f as f64)));
    }
    Ok(out)
}

/// Serialize the selected cells of `features`, refusing to exceed the budget.
pub fn serialize_payload<F: FeatureSource + ?Sized>(
    features: &F,
    mask: &SelectionMask,
    budget: &BudgetSpec,
    header: PayloadHeader,
) -> Result<Vec<u8>> {
    let capacity = capacity_cells(budget);
    if mask.len() > capacity {
        return Err(Error::BudgetViolation {
            cells: mask.len(),
            capacity,
        });
    }
    encode_payload(features, mask, budget, header)
}

/// Parse and validate a payload against the receiver's grid and cost model.
pub fn deserialize_payload(bytes: &[u8], grid: &GridSpec, budget: &BudgetSpec) -> Result<FeaturePayload> {
    check_layout(budget)?;
    let h_hdr = budget.h_hdr as usize;
    let b_cell = budget.b_cell() as usize;
    let channels = budget.channels as usize;
    if bytes.len() < h_hdr {
        return Err(Error::protocol(format!("payload of {} bytes is shorter than its header", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice"));
    let sender = u32_at(0);
    let frame = u32_at(4);
    let grid_hash = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let count = u32_at(16) as usize;
    if grid_hash != grid.hash() {
        return Err(Error::protocol(format!(
            "grid hash {grid_hash:#018x} does not match receiver grid {:#018x}",
            grid.hash()
        )));
    }
    if bytes.len() != h_hdr + count * b_cell {
        return Err(Error::protocol(format!(
            "payload length {} does not match {count} cells",
            bytes.len()
        )));
    }
    let mut indices = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * channels);
    for i in 0..count {
        let o = h_hdr + i * b_cell;
        let idx = u32_at(o);
        if idx as usize >= grid.len() {
            return Err(Error::protocol(format!("cell index {idx} outside grid")));
        }
        if indices.last().is_some_and(|&prev| idx <= prev) {
            return Err(Error::protocol("cell indices are not strictly increasing"));
        }
        indices.push(idx);
        features.extend_from_slice(&bytes[o + 4..o + b_cell]);
    }
    Ok(FeaturePayload {
        header: PayloadHeader {
            sender,
            frame,
            grid_hash,
        },
        channels,
        indices,
        features,
    })
}

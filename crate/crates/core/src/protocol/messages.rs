//! Coverage beacons and cooperation requests on the wire.
//!
//! ```text
//! beacon   u32 sender | u32 frame | 2×f32 position | 2×u16 velocity | RLE(blind)
//! request  u32 requester | u32 target | u32 frame | 2×f32 position | u64 grid hash
//!          | RLE(blind) | u8 risk per blind cell, row-major
//! ```
//!
//! Velocities are stored as `round(100·v) + 32768`, saturating. Responses
//! are bare feature payloads; addressing is left to the link layer.

use crate::error::{Error, Result};
use crate::grid::{CellIndex, GridSpec, Vec2};
use crate::payload::{dequantize, quantize};
use crate::risk::ObjectId;
use crate::rle;

pub const BEACON_HEADER_LEN: usize = 20;
pub const REQUEST_HEADER_LEN: usize = 28;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::protocol("message truncated"))?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

fn quantize_velocity(v: f64) -> u16 {
    ((v * 100.0).round() + 32768.0).clamp(0.0, 65535.0) as u16
}

fn dequantize_velocity(q: u16) -> f64 {
    (f64::from(q) - 32768.0) / 100.0
}

fn push_position(out: &mut Vec<u8>, p: Vec2) {
    out.extend_from_slice(&(p[0] as f32).to_le_bytes());
    out.extend_from_slice(&(p[1] as f32).to_le_bytes());
}

/// Periodic broadcast of an agent's kinematics and blind zone. Coverage is
/// the complement of `blind`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageBeacon {
    pub sender: ObjectId,
    pub frame: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    pub blind: Vec<bool>,
}

impl CoverageBeacon {
    pub fn covers(&self, idx: CellIndex) -> bool {
        !self.blind[idx]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(beacon_bytes(self));
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.frame.to_le_bytes());
        push_position(&mut out, self.position);
        out.extend_from_slice(&quantize_velocity(self.velocity[0]).to_le_bytes());
        out.extend_from_slice(&quantize_velocity(self.velocity[1]).to_le_bytes());
        out.extend(rle::encode(&self.blind));
        out
    }

    pub fn decode(bytes: &[u8], grid: &GridSpec) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let sender = r.u32()?;
        let frame = r.u32()?;
        let position = [f64::from(r.f32()?), f64::from(r.f32()?)];
        let velocity = [dequantize_velocity(r.u16()?), dequantize_velocity(r.u16()?)];
        let blind = rle::decode(r.rest(), grid.len())?;
        Ok(CoverageBeacon {
            sender,
            frame,
            position,
            velocity,
            blind,
        })
    }
}

/// Exact encoded size of a beacon.
pub fn beacon_bytes(beacon: &CoverageBeacon) -> usize {
    BEACON_HEADER_LEN + rle::encoded_len(&beacon.blind)
}

/// Ask one partner for features covering the requester's blind zone.
#[derive(Debug, Clone, PartialEq)]
pub struct CPRequest {
    pub requester: ObjectId,
    pub target: ObjectId,
    pub frame: u32,
    pub position: Vec2,
    pub grid_hash: u64,
    pub blind: Vec<bool>,
    /// Quantized risk of each blind cell, in ascending cell order.
    pub risk: Vec<u8>,
}

impl CPRequest {
    /// Build a request, quantizing `risk` over the blind cells.
    pub fn new(
        requester: ObjectId,
        target: ObjectId,
        frame: u32,
        position: Vec2,
        grid: &GridSpec,
        blind: &[bool],
        risk: &[f64],
    ) -> Result<Self> {
        let req = CPRequest {
            requester,
            target,
            frame,
            position,
            grid_hash: grid.hash(),
            blind: blind.to_vec(),
            risk: blind
                .iter()
                .zip(risk)
                .filter(|(b, _)| **b)
                .map(|(_, r)| quantize(*r))
                .collect(),
        };
        if blind.len() != grid.len() || risk.len() != grid.len() {
            return Err(Error::invalid("request planes do not match the grid"));
        }
        req.validate()?;
        Ok(req)
    }

    fn validate(&self) -> Result<()> {
        if self.target == self.requester {
            return Err(Error::protocol("request target equals requester"));
        }
        let blind = self.blind.iter().filter(|b| **b).count();
        if blind == 0 {
            return Err(Error::protocol("request carries an empty blind zone"));
        }
        if blind != self.risk.len() {
            return Err(Error::protocol("risk entries do not match blind cells"));
        }
        Ok(())
    }

    /// Dequantized risk over the full grid, zero outside the blind zone.
    pub fn risk_plane(&self) -> Vec<f64> {
        let mut it = self.risk.iter();
        self.blind
            .iter()
            .map(|&b| if b { dequantize(*it.next().expect("validated")) } else { 0.0 })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.requester.to_le_bytes());
        out.extend_from_slice(&self.target.to_le_bytes());
        out.extend_from_slice(&self.frame.to_le_bytes());
        push_position(&mut out, self.position);
        out.extend_from_slice(&self.grid_hash.to_le_bytes());
        out.extend(rle::encode(&self.blind));
        out.extend_from_slice(&self.risk);
        out
    }

    pub fn decode(bytes: &[u8], grid: &GridSpec) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let requester = r.u32()?;
        let target = r.u32()?;
        let frame = r.u32()?;
        let position = [f64::from(r.f32()?), f64::from(r.f32()?)];
        let grid_hash = r.u64()?;
        if grid_hash != grid.hash() {
            return Err(Error::protocol(format!("request from {requester} uses a different grid")));
        }
        let (blind, used) = rle::decode_prefix(r.rest(), grid.len())?;
        r.pos += used;
        let risk = r.rest().to_vec();
        let req = CPRequest {
            requester,
            target,
            frame,
            position,
            grid_hash,
            blind,
            risk,
        };
        req.validate()?;
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new((0.0, 6.4), (0.0, 6.4), 0.4, (0.0, 4.0)).unwrap()
    }

    #[test]
    fn all_visible_beacon_is_header_plus_one_run() {
        let g = grid();
        let b = CoverageBeacon {
            sender: 2,
            frame: 5,
            position: [1.0, -2.0],
            velocity: [3.0, 0.0],
            blind: vec![false; g.len()],
        };
        // 256 cells: first-value byte + 2-byte varint
        assert_eq!(beacon_bytes(&b), 20 + 3);
        assert_eq!(b.encode().len(), beacon_bytes(&b));
        assert_eq!(CoverageBeacon::decode(&b.encode(), &g).unwrap(), b);
    }

    #[test]
    fn checkerboard_beacon_matches_run_oracle() {
        let blind: Vec<bool> = (0..256).map(|i| (i / 16 + i % 16) % 2 == 0).collect();
        let runs = 1 + blind.windows(2).filter(|w| w[0] != w[1]).count();
        let b = CoverageBeacon {
            sender: 1,
            frame: 0,
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            blind,
        };
        assert_eq!(beacon_bytes(&b), 20 + 1 + runs);
    }

    #[test]
    fn velocity_quantization_saturates() {
        assert_eq!(quantize_velocity(0.0), 32768);
        assert_eq!(quantize_velocity(-1000.0), 0);
        assert_eq!(quantize_velocity(1000.0), 65535);
        assert!((dequantize_velocity(quantize_velocity(-12.345)) + 12.35).abs() < 1e-9);
    }

    #[test]
    fn request_validation() {
        let g = grid();
        let mut blind = vec![false; g.len()];
        let risk = vec![0.5; g.len()];
        assert!(CPRequest::new(1, 2, 0, [0.0, 0.0], &g, &blind, &risk).is_err());
        blind[3] = true;
        assert!(CPRequest::new(1, 1, 0, [0.0, 0.0], &g, &blind, &risk).is_err());
        let req = CPRequest::new(1, 2, 0, [0.0, 0.0], &g, &blind, &risk).unwrap();
        assert_eq!(req.risk, vec![128]);
        let other = GridSpec::new((0.0, 6.4), (0.0, 6.4), 0.8, (0.0, 4.0)).unwrap();
        assert!(matches!(CPRequest::decode(&req.encode(), &other), Err(Error::Protocol(_))));
        let bytes = req.encode();
        assert!(CPRequest::decode(&bytes[..bytes.len() - 1], &g).is_err());
    }

    proptest! {
        #[test]
        fn request_round_trip(blind in proptest::collection::vec(any::<bool>(), 256),
                              risk in proptest::collection::vec(0.0f64..=1.0, 256),
                              x in -100.0f32..100.0, y in -100.0f32..100.0) {
            prop_assume!(blind.iter().any(|b| *b));
            let g = grid();
            let req = CPRequest::new(4, 9, 3, [x as f64, y as f64], &g, &blind, &risk).unwrap();
            let bytes = req.encode();
            prop_assert_eq!(bytes.len(), REQUEST_HEADER_LEN + rle::encoded_len(&blind) + req.risk.len());
            let back = CPRequest::decode(&bytes, &g).unwrap();
            prop_assert_eq!(&back, &req);
            for (i, r) in back.risk_plane().iter().enumerate() {
                if blind[i] {
                    prop_assert!((r - risk[i]).abs() <= 1.0 / 510.0 + 1e-12);
                } else {
                    prop_assert_eq!(*r, 0.0);
                }
            }
        }

        #[test]
        fn beacon_round_trip(blind in proptest::collection::vec(any::<bool>(), 256),
                             vx in -300.0f64..300.0, vy in -300.0f64..300.0) {
            let g = grid();
            let b = CoverageBeacon { sender: 7, frame: 1, position: [1.5, 2.5], velocity: [vx, vy], blind };
            let bytes = b.encode();
            prop_assert_eq!(bytes.len(), beacon_bytes(&b));
            let back = CoverageBeacon::decode(&bytes, &g).unwrap();
            prop_assert_eq!(&back.blind, &b.blind);
            prop_assert!((back.velocity[0] - vx).abs() <= 0.005 + 1e-9);
            prop_assert!((back.velocity[1] - vy).abs() <= 0.005 + 1e-9);
        }
    }
}

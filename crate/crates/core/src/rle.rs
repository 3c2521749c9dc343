//! Run-length coding of boolean masks.
//!
//! Layout: one byte holding the value of the first run (0 or 1), followed by
//! the run lengths as unsigned LEB128 varints. Runs alternate in value, so
//! only their lengths are stored. The decoder needs the expected cell count.

use crate::error::{Error, Result};

fn push_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *bytes
            .get(*pos)
            .ok_or_else(|| Error::protocol("truncated run length"))?;
        *pos += 1;
        v |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::protocol("run length varint too long"))
}

fn varint_len(v: u64) -> usize {
    let bits = 64 - v.leading_zeros() as usize;
    bits.div_ceil(7).max(1)
}

/// Lengths of maximal runs of equal values.
fn runs(mask: &[bool]) -> impl Iterator<Item = u64> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        let start = i;
        let v = *mask.get(i)?;
        while i < mask.len() && mask[i] == v {
            i += 1;
        }
        Some((i - start) as u64)
    })
}

pub fn encode(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![u8::from(mask.first().copied().unwrap_or(false))];
    for run in runs(mask) {
        push_varint(&mut out, run);
    }
    out
}

/// Size of `encode(mask)` without allocating it.
pub fn encoded_len(mask: &[bool]) -> usize {
    1 + runs(mask).map(varint_len).sum::<usize>()
}

/// Decode exactly `len` cells from the front of `bytes`, returning the mask
/// and the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8], len: usize) -> Result<(Vec<bool>, usize)> {
    let first = match bytes.first() {
        Some(0) => false,
        Some(1) => true,
        Some(b) => return Err(Error::protocol(format!("invalid first run value {b}"))),
        None => return Err(Error::protocol("empty run-length stream")),
    };
    let mut pos = 1;
    let mut out = Vec::with_capacity(len);
    let mut value = first;
    while out.len() < len {
        let run = read_varint(bytes, &mut pos)?;
        if run == 0 || run > (len - out.len()) as u64 {
            return Err(Error::protocol(format!("run of {run} does not fit a {len}-cell mask")));
        }
        out.resize(out.len() + run as usize, value);
        value = !value;
    }
    Ok((out, pos))
}

/// Decode a stream that must contain exactly `len` cells and nothing else.
pub fn decode(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    let (mask, used) = decode_prefix(bytes, len)?;
    if used != bytes.len() {
        return Err(Error::protocol("trailing bytes after run-length stream"));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_mask_is_one_run() {
        let mask = vec![false; 192 * 192];
        let bytes = encode(&mask);
        // first value + 36864 as a 3-byte varint
        assert_eq!(bytes, vec![0, 0x80, 0xa0, 0x02]);
        assert_eq!(decode(&bytes, mask.len()).unwrap(), mask);
    }

    #[test]
    fn checkerboard_matches_run_count() {
        let mask: Vec<bool> = (0..256).map(|i| (i / 16 + i % 16) % 2 == 1).collect();
        // row ends and the next row's start share a colour, so 15 runs have length 2
        let runs = 1 + mask.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(runs, 241);
        assert_eq!(encoded_len(&mask), 1 + runs);
        assert_eq!(encode(&mask).len(), 1 + runs);
    }

    #[test]
    fn rejects_malformed_streams() {
        assert!(decode(&[], 4).is_err());
        assert!(decode(&[2, 4], 4).is_err());
        assert!(decode(&[0, 5], 4).is_err());
        assert!(decode(&[0, 2], 4).is_err());
        assert!(decode(&[0, 0, 4], 4).is_err());
        assert!(decode(&[0, 4, 1], 4).is_err());
        assert!(decode(&[1, 0x80], 4).is_err());
    }

    #[test]
    fn empty_mask() {
        assert_eq!(encode(&[]), vec![0]);
        assert_eq!(decode(&[0], 0).unwrap(), Vec::<bool>::new());
    }

    proptest! {
        #[test]
        fn round_trip(mask in proptest::collection::vec(any::<bool>(), 0..600)) {
            let bytes = encode(&mask);
            prop_assert_eq!(bytes.len(), encoded_len(&mask));
            prop_assert_eq!(decode(&bytes, mask.len()).unwrap(), mask);
        }

        #[test]
        fn long_runs_round_trip(a in 1usize..40_000, b in 1usize..40_000) {
            let mut mask = vec![true; a];
            mask.extend(std::iter::repeat(false).take(b));
            let bytes = encode(&mask);
            prop_assert_eq!(decode(&bytes, a + b).unwrap(), mask);
        }
    }
}

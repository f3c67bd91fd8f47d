//! Binary expert and gate records.
//!
//! Layout of an expert record (all integers little-endian):
//!
//! ```text
//! expert_id: u32 | class: u8 | h: u32 | ff: u32 | r: u32
//! origin_len: u16 | origin_client: UTF-8 bytes
//! weights: f64 LE, in order W1, b1, W2, b2 [, A1, B1, A2, B2 when r > 0]
//! ```
//!
//! The total length is computable from the header alone; the
//! communication ledger depends on that being exact. Gate records follow
//! the same discipline with header `input_dim: u32 | routed: u32 |
//! mode: u8` and payload `W_g, b_g`.

use super::{ExpertBank, ExpertParams, GateInputMode, GateParams, LowRankFactors};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Header bytes of an expert record with the given origin label.
pub fn expert_header_len(origin_client: Option<&str>) -> usize {
    4 + 1 + 4 + 4 + 4 + 2 + origin_client.map_or(0, str::len)
}

/// Weight payload count of an expert with these dims.
pub fn expert_weight_count(h: usize, ff: usize, r: usize) -> usize {
    2 * h * ff + h + ff + 2 * r * (h + ff)
}

/// Exact serialized length of an expert record.
pub fn expert_record_len(h: usize, ff: usize, r: usize, origin_client: Option<&str>) -> usize {
    expert_header_len(origin_client) + 8 * expert_weight_count(h, ff, r)
}

/// Exact serialized length of a gate record.
pub fn gate_record_len(input_dim: usize, routed: usize) -> usize {
    4 + 4 + 1 + 8 * (input_dim * routed + routed)
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn serialize_expert(e: &ExpertParams) -> Vec<u8> {
    let origin = e.origin_client.as_deref().unwrap_or("");
    let mut out = Vec::with_capacity(expert_record_len(
        e.token_dim(),
        e.ff_dim(),
        e.rank(),
        e.origin_client.as_deref(),
    ));
    out.extend_from_slice(&e.expert_id.to_le_bytes());
    out.push(e.bank.code());
    out.extend_from_slice(&(e.token_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(e.ff_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(e.rank() as u32).to_le_bytes());
    out.extend_from_slice(&(origin.len() as u16).to_le_bytes());
    out.extend_from_slice(origin.as_bytes());
    put_matrix(&mut out, &e.w1);
    put_matrix(&mut out, &e.b1);
    put_matrix(&mut out, &e.w2);
    put_matrix(&mut out, &e.b2);
    if let Some(lr) = &e.lowrank {
        put_matrix(&mut out, &lr.a1);
        put_matrix(&mut out, &lr.b1);
        put_matrix(&mut out, &lr.a2);
        put_matrix(&mut out, &lr.b2);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "record truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(8 * rows * cols)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parse one expert record from the front of `buf`; returns the expert and
/// the number of bytes consumed.
pub fn deserialize_expert(buf: &[u8]) -> Result<(ExpertParams, usize)> {
    let mut r = Reader { buf, pos: 0 };
    let expert_id = r.u32()?;
    let bank = ExpertBank::from_code(r.u8()?)?;
    let h = r.u32()? as usize;
    let ff = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let origin_len = r.u16()? as usize;
    let origin = if origin_len == 0 {
        None
    } else {
        let raw = r.take(origin_len)?;
        Some(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::Checkpoint("origin label is not UTF-8".into()))?,
        )
    };
    if h == 0 || ff == 0 {
        return Err(Error::Checkpoint("zero expert dims in record".into()));
    }
    let w1 = r.matrix(h, ff)?;
    let b1 = r.matrix(1, ff)?;
    let w2 = r.matrix(ff, h)?;
    let b2 = r.matrix(1, h)?;
    let lowrank = if rank > 0 {
        Some(LowRankFactors {
            a1: r.matrix(h, rank)?,
            b1: r.matrix(rank, ff)?,
            a2: r.matrix(ff, rank)?,
            b2: r.matrix(rank, h)?,
        })
    } else {
        None
    };
    Ok((
        ExpertParams {
            expert_id,
            bank,
            w1,
            b1,
            w2,
            b2,
            lowrank,
            origin_client: origin,
        },
        r.pos,
    ))
}

pub fn serialize_gate(g: &GateParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(gate_record_len(g.input_dim(), g.routed()));
    out.extend_from_slice(&(g.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(g.routed() as u32).to_le_bytes());
    out.push(match g.input_mode {
        GateInputMode::CovariateOnly => 0,
        GateInputMode::CovariatePlusToken => 1,
    });
    put_matrix(&mut out, &g.w_g);
    put_matrix(&mut out, &g.b_g);
    out
}

pub fn deserialize_gate(buf: &[u8]) -> Result<(GateParams, usize)> {
    let mut r = Reader { buf, pos: 0 };
    let input_dim = r.u32()? as usize;
    let routed = r.u32()? as usize;
    let input_mode = match r.u8()? {
        0 => GateInputMode::CovariateOnly,
        1 => GateInputMode::CovariatePlusToken,
        other => return Err(Error::Checkpoint(format!("unknown gate mode {other}"))),
    };
    if input_dim == 0 || routed == 0 {
        return Err(Error::Checkpoint("zero gate dims in record".into()));
    }
    let w_g = r.matrix(input_dim, routed)?;
    let b_g = r.matrix(1, routed)?;
    Ok((
        GateParams {
            w_g,
            b_g,
            input_mode,
        },
        r.pos,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn expert_record_length_is_exact() {
        let mut rng = Rng::new(1);
        let mut e = ExpertParams::init(7, ExpertBank::Routed, 3, 5, &mut rng);
        e.origin_client = Some("client-2".into());
        e.attach_lowrank(2, &mut rng);
        let bytes = serialize_expert(&e);
        assert_eq!(bytes.len(), expert_record_len(3, 5, 2, Some("client-2")));
        let (back, used) = deserialize_expert(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, e);
    }

    #[test]
    fn gate_round_trip() {
        let mut rng = Rng::new(2);
        let g = GateParams::init(GateInputMode::CovariatePlusToken, 4, 6, 5, &mut rng);
        let bytes = serialize_gate(&g);
        assert_eq!(bytes.len(), gate_record_len(g.input_dim(), g.routed()));
        let (back, used) = deserialize_gate(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, g);
    }

    #[test]
    fn truncated_record_is_a_checkpoint_error() {
        let mut rng = Rng::new(3);
        let e = ExpertParams::init(0, ExpertBank::Shared, 2, 2, &mut rng);
        let bytes = serialize_expert(&e);
        assert!(deserialize_expert(&bytes[..bytes.len() - 3]).is_err());
        assert!(deserialize_expert(&bytes[..4]).is_err());
    }

    proptest! {
        #[test]
        fn expert_round_trip_preserves_bits(
            seed in 0u64..500, h in 1usize..5, ff in 1usize..5,
            rank in 0usize..3, with_origin in proptest::bool::ANY
        ) {
            let mut rng = Rng::new(seed);
            let mut e = ExpertParams::init(seed as u32, ExpertBank::Conditional, h, ff, &mut rng);
            if rank > 0 {
                e.attach_lowrank(rank, &mut rng);
            }
            if with_origin {
                e.origin_client = Some(format!("c{seed}"));
            }
            let bytes = serialize_expert(&e);
            prop_assert_eq!(
                bytes.len(),
                expert_record_len(h, ff, rank, e.origin_client.as_deref())
            );
            let (back, used) = deserialize_expert(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, e);
        }
    }
}

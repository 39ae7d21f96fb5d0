//! Stochastic uniform quantization with `2^bits - 1` magnitude steps.
//!
//! Packet layout: the L2 norm as a little-endian f32, then for every element a
//! sign bit followed by its `bits`-bit level, packed into a bitstream filled
//! from the least significant bit of each byte. Trailing bits of the last
//! byte are zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Invalid(format!("QSGD bits must be in 1..=16, got {bits}")));
    }
    Ok(())
}

/// Packet size for `n` elements.
pub fn qsgd_payload_bytes(n: usize, bits: u32) -> usize {
    4 + (n * (bits as usize + 1)).div_ceil(8)
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, width: u32) {
        for b in 0..width {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.used % 8);
            }
            self.used += 1;
        }
    }
}

fn read_bits(bytes: &[u8], pos: &mut usize, width: u32) -> u32 {
    let mut v = 0;
    for b in 0..width {
        let bit = (bytes[*pos / 8] >> (*pos % 8)) & 1;
        v |= u32::from(bit) << b;
        *pos += 1;
    }
    v
}

pub fn qsgd_encode(values: &[f32], bits: u32, seed: u64) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let norm = values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt() as f32;
    let mut out = BitWriter {
        bytes: norm.to_le_bytes().to_vec(),
        used: 32,
    };
    if norm == 0.0 {
        return Ok(out.bytes);
    }
    let steps = f64::from((1u32 << bits) - 1);
    let mut rng = seed::rng(seed, Stream::Qsgd, &[]);
    for &v in values {
        let r = (f64::from(v).abs() / f64::from(norm) * steps).min(steps);
        let lo = r.floor();
        let level = if rng.random::<f64>() < r - lo { lo + 1.0 } else { lo };
        out.push(u32::from(v.is_sign_negative()), 1);
        out.push(level as u32, bits);
    }
    Ok(out.bytes)
}

pub fn qsgd_decode(packet: &[u8], n: usize, bits: u32) -> Result<Vec<f32>> {
    check_bits(bits)?;
    if packet.len() < 4 {
        return Err(Error::Invalid("QSGD packet shorter than its norm header".into()));
    }
    let norm = f32::from_le_bytes(packet[..4].try_into().expect("4 bytes"));
    if norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    if packet.len() != qsgd_payload_bytes(n, bits) {
        return Err(Error::Invalid(format!(
            "QSGD packet has {} bytes, expected {} for {n} elements",
            packet.len(),
            qsgd_payload_bytes(n, bits)
        )));
    }
    let steps = f64::from((1u32 << bits) - 1);
    let mut pos = 32;
    Ok((0..n)
        .map(|_| {
            let neg = read_bits(packet, &mut pos, 1) == 1;
            let level = f64::from(read_bits(packet, &mut pos, bits));
            let mag = (f64::from(norm) * level / steps) as f32;
            if neg { -mag } else { mag }
        })
        .collect())
}

/// Quantizes and dequantizes `t`; returns the reconstruction and the size of
/// the packet that would be transmitted.
pub fn qsgd_quantize(t: &Tensor, bits: u32, seed: u64) -> Result<(Tensor, usize)> {
    let packet = qsgd_encode(t.data(), bits, seed)?;
    let values = qsgd_decode(&packet, t.len(), bits)?;
    Ok((Tensor::from_parts(t.shape().to_vec(), values), packet.len()))
}

//! Byte format of one quantized frame sent from an edge satellite:
//! the scale as an 8-byte little-endian float, then `2 N N_r` bin indices of
//! `B` bits each, ordered by subcarrier, antenna, then real before imaginary,
//! packed LSB-first.

use crate::coop::quantizer::Quantizer;
use crate::error::{input_err, Result};
use crate::linalg::CMat;

pub fn payload_bits(n: usize, nr: usize, bits: u32) -> usize {
    64 + 2 * n * nr * bits as usize
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, bits: u32) {
        for b in 0..bits {
            if self.used.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().expect("byte pushed above") |= 1 << (self.used % 8);
            }
            self.used += 1;
        }
    }
}

pub fn encode(q: &Quantizer, yf: &CMat) -> Vec<u8> {
    let mut body = BitWriter { bytes: Vec::with_capacity(payload_bits(yf.nrows(), yf.ncols(), q.bits) / 8), used: 0 };
    for n in 0..yf.nrows() {
        for r in 0..yf.ncols() {
            let (re, im) = q.quantize(yf[(n, r)]);
            body.push(re, q.bits);
            body.push(im, q.bits);
        }
    }
    let mut bytes = q.scale.to_le_bytes().to_vec();
    bytes.extend(body.bytes);
    bytes
}

/// Indices `[N x N_r]` for the real and imaginary parts, plus the quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub quantizer: Quantizer,
    pub re: Vec<u32>,
    pub im: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
}

impl DecodedFrame {
    /// Row-major position of `(subcarrier, antenna)`.
    pub fn at(&self, n: usize, r: usize) -> (u32, u32) {
        let i = n * self.cols + r;
        (self.re[i], self.im[i])
    }
}

pub fn decode(bytes: &[u8], bits: u32, n: usize, nr: usize) -> Result<DecodedFrame> {
    let need = 8 + (2 * n * nr * bits as usize).div_ceil(8);
    if bytes.len() != need {
        return Err(input_err(format!("backhaul payload has {} bytes, expected {need}", bytes.len())));
    }
    let scale = f64::from_le_bytes(bytes[..8].try_into().expect("eight header bytes"));
    let quantizer = Quantizer::new(bits, scale)?;
    let body = &bytes[8..];
    let mut cursor = 0usize;
    let mut read = || {
        let mut v = 0u32;
        for b in 0..bits {
            let bit = (body[cursor / 8] >> (cursor % 8)) & 1;
            v |= (bit as u32) << b;
            cursor += 1;
        }
        v
    };
    let mut re = Vec::with_capacity(n * nr);
    let mut im = Vec::with_capacity(n * nr);
    for _ in 0..n * nr {
        re.push(read());
        im.push(read());
    }
    Ok(DecodedFrame { quantizer, re, im, rows: n, cols: nr })
}

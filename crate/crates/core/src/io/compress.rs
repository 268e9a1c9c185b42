//! Per-cube stream codec: CDF 5/3 transform, quantisation of the detail
//! bands (lossy) or integer lifting of the bit patterns (lossless), then
//! varint packing and DEFLATE.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use super::wavelet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Lossless,
    /// Quantisation step of the detail coefficients.
    Lossy {
        q: f64,
    },
}

impl Mode {
    /// Lossy mode whose reconstruction error stays within `tol_abs`.
    pub fn lossy_for_tolerance(tol_abs: f64) -> Self {
        Mode::Lossy {
            q: 2.0 * tol_abs / wavelet::DETAIL_AMPLIFICATION,
        }
    }
}

const TAG_LOSSLESS: u8 = 0;
const TAG_LOSSY: u8 = 1;

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

fn put_varint(out: &mut Vec<u8>, mut u: u64) {
    while u >= 0x80 {
        out.push((u as u8) | 0x80);
        u >>= 7;
    }
    out.push(u as u8);
}

fn get_varint(b: &[u8], o: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *b
            .get(*o)
            .ok_or_else(|| corrupt("varint runs past the end"))?;
        *o += 1;
        v |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(corrupt("varint too long"))
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt cube stream: {what}"))
}

/// Order-preserving map of f64 bit patterns onto i64.
fn ordered_bits(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        b ^ i64::MAX
    } else {
        b
    }
}

fn from_ordered_bits(b: i64) -> f64 {
    f64::from_bits((if b < 0 { b ^ i64::MAX } else { b }) as u64)
}

/// Encode `ncomp` blocks of `side^3` values.
pub fn compress_cube(values: &[f64], side: usize, ncomp: usize, mode: Mode) -> Vec<u8> {
    let v = side * side * side;
    assert_eq!(values.len(), v * ncomp);
    let mut raw = Vec::with_capacity(values.len() * 2);
    match mode {
        Mode::Lossless => {
            for block in values.chunks(v) {
                let mut a: Vec<i64> = block.iter().map(|&x| ordered_bits(x)).collect();
                wavelet::forward_int(&mut a, side);
                for x in a {
                    put_varint(&mut raw, zigzag(x));
                }
            }
        }
        Mode::Lossy { q } => {
            assert!(q > 0.0, "quantisation step must be positive");
            for block in values.chunks(v) {
                let mut a = block.to_vec();
                wavelet::forward(&mut a, side);
                for (idx, x) in a.into_iter().enumerate() {
                    if wavelet::is_approximation(idx, side) {
                        raw.extend_from_slice(&x.to_le_bytes());
                    } else {
                        put_varint(&mut raw, zigzag((x / q).round() as i64));
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(raw.len() / 2 + 16);
    match mode {
        Mode::Lossless => out.push(TAG_LOSSLESS),
        Mode::Lossy { q } => {
            out.push(TAG_LOSSY);
            out.extend_from_slice(&q.to_le_bytes());
        }
    }
    let mut enc = DeflateEncoder::new(out, Compression::default());
    enc.write_all(&raw).expect("in-memory deflate");
    enc.finish().expect("in-memory deflate")
}

/// Decode a stream produced by [`compress_cube`].
pub fn decompress_cube(stream: &[u8], side: usize, ncomp: usize) -> Result<Vec<f64>> {
    let v = side * side * side;
    let (&tag, rest) = stream.split_first().ok_or_else(|| corrupt("empty"))?;
    let (q, body) = match tag {
        TAG_LOSSLESS => (None, rest),
        TAG_LOSSY => {
            if rest.len() < 8 {
                return Err(corrupt("missing quantisation step"));
            }
            let q = f64::from_le_bytes(rest[..8].try_into().unwrap());
            if !(q > 0.0) {
                return Err(corrupt("bad quantisation step"));
            }
            (Some(q), &rest[8..])
        }
        t => return Err(corrupt(&format!("unknown mode {t}"))),
    };
    let mut raw = Vec::new();
    DeflateDecoder::new(body)
        .read_to_end(&mut raw)
        .map_err(|e| corrupt(&e.to_string()))?;
    let mut o = 0;
    let mut out = Vec::with_capacity(v * ncomp);
    for _ in 0..ncomp {
        match q {
            None => {
                let mut a = Vec::with_capacity(v);
                for _ in 0..v {
                    a.push(unzigzag(get_varint(&raw, &mut o)?));
                }
                wavelet::inverse_int(&mut a, side);
                out.extend(a.into_iter().map(from_ordered_bits));
            }
            Some(q) => {
                let mut a = Vec::with_capacity(v);
                for idx in 0..v {
                    if wavelet::is_approximation(idx, side) {
                        let b = raw.get(o..o + 8).ok_or_else(|| corrupt("truncated"))?;
                        a.push(f64::from_le_bytes(b.try_into().unwrap()));
                        o += 8;
                    } else {
                        a.push(unzigzag(get_varint(&raw, &mut o)?) as f64 * q);
                    }
                }
                wavelet::inverse(&mut a, side);
                out.extend(a);
            }
        }
    }
    if o != raw.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

//! Lossless and fixed-rate lossy compression of `f32` buffers.
//!
//! Two codecs stand in for the GPU compressors used on real clusters:
//!
//! * [`CodecSpec::Lossless`]: an XOR predictor over consecutive values. Every
//!   value's bit pattern is XORed with the previous value's (the first with
//!   zero) and the residual is written as a 5-bit leading-zero code followed by
//!   the residual's remaining low bits. Chunks of [`LOSSLESS_CHUNK`] values
//!   that would not shrink are stored raw behind a one-bit fallback flag.
//! * [`CodecSpec::FixedRate`]: a block-floating-point quantizer. Each block of
//!   [`FIXED_RATE_BLOCK`] values stores its largest exponent `E` in one byte,
//!   then every value as a `rate`-bit two's-complement integer in units of
//!   `2^(E - rate + 2)`. The per-value error never exceeds one such unit.
//!
//! # Container layout
//!
//! [`CompressedBuffer::to_bytes`] produces, little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "HCC1"
//! 4       1     codec kind (0 = identity, 1 = lossless, 2 = fixed-rate)
//! 5       1     rate bits (0 unless fixed-rate)
//! 6       8     original value count (u64)
//! 14      4     block count (fixed-rate) / chunk count (lossless) / 0 (identity)
//! 18      ...   payload
//! ```
//!
//! Identity payloads are the raw little-endian `f32` bytes. Lossless payloads
//! are one MSB-first bitstream; each chunk starts with its fallback flag and
//! the stream is zero padded to a whole byte. Fixed-rate payloads are
//! `block_count` records of `1 + 8 * rate` bytes: the biased exponent byte,
//! then 64 MSB-first `rate`-bit fields. The last block is zero padded.
//!
//! Wire sizes reported by this module ([`CompressedBuffer::wire_bytes`],
//! [`wire_size_bytes`]) count the payload only; the 18-byte container header
//! is framing.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{BitReader, BitWriter};

/// Values per fixed-rate block.
pub const FIXED_RATE_BLOCK: usize = 64;
/// Values per lossless chunk.
pub const LOSSLESS_CHUNK: usize = 4096;
/// Bytes of framing in front of every serialized payload.
pub const HEADER_BYTES: usize = 18;

pub const MIN_RATE: u8 = 2;
pub const MAX_RATE: u8 = 32;

const MAGIC: &[u8; 4] = b"HCC1";
const ZERO_RESIDUAL: u32 = 31;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("non-finite value {value} at index {index} cannot take a lossy path")]
    NonFiniteInput { index: usize, value: String },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("lossless output size depends on the data")]
    DataDependentSize,
    #[error("rate {0} outside [{MIN_RATE}, {MAX_RATE}]")]
    InvalidRate(u8),
    #[error("unknown codec `{0}` (expected none, mpc, or zfp:<rate>)")]
    UnknownCodec(String),
}

fn corrupt(msg: impl Into<String>) -> CodecError {
    CodecError::CorruptPayload(msg.into())
}

/// A flat buffer of 32-bit floats. Any bit pattern is allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FloatBuffer(Vec<f32>);

impl FloatBuffer {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Bitwise equality, so NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &[f32]) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn byte_len(&self) -> usize {
        self.0.len() * 4
    }
}

impl Deref for FloatBuffer {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for FloatBuffer {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

impl AsRef<[f32]> for FloatBuffer {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

impl From<Vec<f32>> for FloatBuffer {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

impl From<&[f32]> for FloatBuffer {
    fn from(v: &[f32]) -> Self {
        Self(v.to_vec())
    }
}

/// Which codec a message passes through.
///
/// The text form (`none`, `mpc`, `zfp:<rate>`) is what configuration files use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CodecSpec {
    Identity,
    Lossless,
    FixedRate(u8),
}

impl CodecSpec {
    pub fn fixed_rate(bits: u8) -> Result<Self, CodecError> {
        if (MIN_RATE..=MAX_RATE).contains(&bits) {
            Ok(Self::FixedRate(bits))
        } else {
            Err(CodecError::InvalidRate(bits))
        }
    }

    pub fn is_lossy(self) -> bool {
        matches!(self, Self::FixedRate(_))
    }

    pub fn validate(self) -> Result<Self, CodecError> {
        match self {
            Self::FixedRate(bits) => Self::fixed_rate(bits),
            other => Ok(other),
        }
    }

    fn kind_byte(self) -> u8 {
        match self {
            Self::Identity => 0,
            Self::Lossless => 1,
            Self::FixedRate(_) => 2,
        }
    }

    fn rate_byte(self) -> u8 {
        match self {
            Self::FixedRate(bits) => bits,
            _ => 0,
        }
    }
}

impl fmt::Display for CodecSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("none"),
            Self::Lossless => f.write_str("mpc"),
            Self::FixedRate(bits) => write!(f, "zfp:{bits}"),
        }
    }
}

impl FromStr for CodecSpec {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "identity" => Ok(Self::Identity),
            "mpc" | "lossless" => Ok(Self::Lossless),
            other => {
                let rate = other
                    .strip_prefix("zfp:")
                    .or_else(|| other.strip_prefix("fixed-rate:"))
                    .ok_or_else(|| CodecError::UnknownCodec(s.to_string()))?;
                let bits: u8 = rate
                    .parse()
                    .map_err(|_| CodecError::UnknownCodec(s.to_string()))?;
                Self::fixed_rate(bits)
            }
        }
    }
}

impl TryFrom<String> for CodecSpec {
    type Error = CodecError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CodecSpec> for String {
    fn from(c: CodecSpec) -> Self {
        c.to_string()
    }
}

/// A compressed message as it travels on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedBuffer {
    pub codec: CodecSpec,
    pub original_len: usize,
    /// Fixed-rate blocks or lossless chunks; zero for identity.
    pub block_count: u32,
    pub payload: Vec<u8>,
}

impl CompressedBuffer {
    pub fn wire_bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn raw_bytes(&self) -> usize {
        self.original_len * 4
    }

    /// Per-chunk fallback flags of a lossless payload (empty for other codecs).
    pub fn fallback_flags(&self) -> Result<Vec<bool>, CodecError> {
        if self.codec != CodecSpec::Lossless {
            return Ok(Vec::new());
        }
        let mut flags = Vec::with_capacity(self.block_count as usize);
        walk_lossless(self, |_, fallback| flags.push(fallback), |_| {})?;
        Ok(flags)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.codec.kind_byte());
        out.push(self.codec.rate_byte());
        out.extend_from_slice(&(self.original_len as u64).to_le_bytes());
        out.extend_from_slice(&self.block_count.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_BYTES {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let codec = match (bytes[4], bytes[5]) {
            (0, 0) => CodecSpec::Identity,
            (1, 0) => CodecSpec::Lossless,
            (2, bits) => CodecSpec::fixed_rate(bits).map_err(|_| corrupt(format!("bad rate {bits}")))?,
            (kind, rate) => return Err(corrupt(format!("bad codec kind {kind} / rate {rate}"))),
        };
        let original_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
        let original_len = usize::try_from(original_len).map_err(|_| corrupt("length overflow"))?;
        let block_count = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes"));
        Ok(Self {
            codec,
            original_len,
            block_count,
            payload: bytes[HEADER_BYTES..].to_vec(),
        })
    }
}

/// Compresses `values` with `spec`.
pub fn compress(spec: CodecSpec, values: &[f32]) -> Result<CompressedBuffer, CodecError> {
    let spec = spec.validate()?;
    match spec {
        CodecSpec::Identity => Ok(CompressedBuffer {
            codec: spec,
            original_len: values.len(),
            block_count: 0,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }),
        CodecSpec::Lossless => Ok(compress_lossless(values)),
        CodecSpec::FixedRate(bits) => compress_fixed_rate(bits, values),
    }
}

/// Inverse of [`compress`]. Lossless and identity payloads decode bit-exactly.
pub fn decompress(cbuf: &CompressedBuffer) -> Result<FloatBuffer, CodecError> {
    match cbuf.codec.validate()? {
        CodecSpec::Identity => {
            if cbuf.block_count != 0 {
                return Err(corrupt("identity payload with nonzero block count"));
            }
            if Some(cbuf.payload.len()) != cbuf.original_len.checked_mul(4) {
                return Err(corrupt(format!(
                    "identity payload of {} bytes for {} values",
                    cbuf.payload.len(),
                    cbuf.original_len
                )));
            }
            Ok(cbuf
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect::<Vec<_>>()
                .into())
        }
        CodecSpec::Lossless => {
            let mut out = Vec::with_capacity(cbuf.original_len);
            walk_lossless(cbuf, |_, _| {}, |bits| out.push(f32::from_bits(bits)))?;
            Ok(out.into())
        }
        CodecSpec::FixedRate(bits) => decompress_fixed_rate(bits, cbuf),
    }
}

/// Exact payload size `spec` emits for `n` values.
pub fn wire_size_bytes(spec: CodecSpec, n: usize) -> Result<usize, CodecError> {
    match spec.validate()? {
        CodecSpec::Identity => Ok(n * 4),
        CodecSpec::Lossless => Err(CodecError::DataDependentSize),
        CodecSpec::FixedRate(bits) => Ok(n.div_ceil(FIXED_RATE_BLOCK) * fixed_rate_block_bytes(bits)),
    }
}

fn fixed_rate_block_bytes(bits: u8) -> usize {
    1 + FIXED_RATE_BLOCK * bits as usize / 8
}

// ---------------------------------------------------------------------------
// lossless

fn residual_code(residual: u32) -> u32 {
    if residual == 0 {
        ZERO_RESIDUAL
    } else {
        residual.leading_zeros().min(ZERO_RESIDUAL - 1)
    }
}

fn residual_bits(code: u32) -> u32 {
    if code == ZERO_RESIDUAL {
        0
    } else {
        32 - code
    }
}

fn compress_lossless(values: &[f32]) -> CompressedBuffer {
    let chunks = values.len().div_ceil(LOSSLESS_CHUNK);
    let mut w = BitWriter::with_capacity(values.len() * 4 + chunks);
    let mut prev = 0u32;
    for chunk in values.chunks(LOSSLESS_CHUNK) {
        let chunk_prev = prev;
        let encoded_bits: usize = chunk
            .iter()
            .scan(chunk_prev, |p, v| {
                let bits = v.to_bits();
                let code = residual_code(bits ^ *p);
                *p = bits;
                Some(5 + residual_bits(code) as usize)
            })
            .sum();
        if encoded_bits >= chunk.len() * 32 {
            w.write(1, 1);
            for v in chunk {
                w.write(v.to_bits(), 32);
            }
        } else {
            w.write(0, 1);
            let mut p = chunk_prev;
            for v in chunk {
                let bits = v.to_bits();
                let residual = bits ^ p;
                let code = residual_code(residual);
                w.write(code, 5);
                w.write(residual, residual_bits(code));
                p = bits;
            }
        }
        prev = chunk.last().map_or(prev, |v| v.to_bits());
    }
    CompressedBuffer {
        codec: CodecSpec::Lossless,
        original_len: values.len(),
        block_count: chunks as u32,
        payload: w.finish(),
    }
}

/// Decodes a lossless payload, reporting each chunk's fallback flag and every
/// decoded bit pattern. Validates the chunk count and trailing padding.
fn walk_lossless(
    cbuf: &CompressedBuffer,
    mut on_chunk: impl FnMut(usize, bool),
    mut on_value: impl FnMut(u32),
) -> Result<(), CodecError> {
    let n = cbuf.original_len;
    let chunks = n.div_ceil(LOSSLESS_CHUNK);
    if cbuf.block_count as usize != chunks {
        return Err(corrupt(format!(
            "chunk count {} does not match {} values",
            cbuf.block_count, n
        )));
    }
    // Every value costs at least 5 bits, so reject absurd lengths before allocating.
    if n.saturating_mul(5) > cbuf.payload.len().saturating_mul(8) {
        return Err(corrupt("payload too short for the declared length"));
    }
    let truncated = || corrupt("truncated lossless payload");
    let mut r = BitReader::new(&cbuf.payload);
    let mut bits_read = 0usize;
    let mut prev = 0u32;
    for c in 0..chunks {
        let len = LOSSLESS_CHUNK.min(n - c * LOSSLESS_CHUNK);
        let fallback = r.read(1).ok_or_else(truncated)? == 1;
        bits_read += 1;
        on_chunk(c, fallback);
        for _ in 0..len {
            let bits = if fallback {
                bits_read += 32;
                r.read(32).ok_or_else(truncated)?
            } else {
                let code = r.read(5).ok_or_else(truncated)?;
                let width = residual_bits(code);
                let residual = r.read(width).ok_or_else(truncated)?;
                bits_read += 5 + width as usize;
                residual ^ prev
            };
            on_value(bits);
            prev = bits;
        }
    }
    if bits_read.div_ceil(8) != cbuf.payload.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after lossless stream",
            cbuf.payload.len() - bits_read.div_ceil(8)
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fixed rate

/// `2^e` for exponents in the normal `f64` range.
pub(crate) fn exp2i(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Biased exponent byte recorded for a block: the largest exponent field.
fn block_exponent_field(block: &[f32]) -> u8 {
    block
        .iter()
        .map(|v| ((v.to_bits() >> 23) & 0xff) as u8)
        .max()
        .unwrap_or(0)
}

/// Unbiased exponent `E` used by the quantizer. Denormals and zeros share the
/// smallest normal exponent.
fn unbiased_exponent(field: u8) -> i32 {
    field.max(1) as i32 - 127
}

/// Maximum per-value error for a block with exponent field `field` at `bits`.
pub fn fixed_rate_error_bound(block: &[f32], bits: u8) -> f64 {
    exp2i(unbiased_exponent(block_exponent_field(block)) - bits as i32 + 2)
}

fn compress_fixed_rate(bits: u8, values: &[f32]) -> Result<CompressedBuffer, CodecError> {
    if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(CodecError::NonFiniteInput {
            index,
            value: v.to_string(),
        });
    }
    let blocks = values.len().div_ceil(FIXED_RATE_BLOCK);
    let width = bits as u32;
    let qmax = (1i64 << (width - 1)) - 1;
    let qmin = -(1i64 << (width - 1));
    let mut w = BitWriter::with_capacity(blocks * fixed_rate_block_bytes(bits));
    for block in values.chunks(FIXED_RATE_BLOCK) {
        let field = block_exponent_field(block);
        w.write(field as u32, 8);
        let inv_step = exp2i(-(unbiased_exponent(field) - width as i32 + 2));
        for i in 0..FIXED_RATE_BLOCK {
            let v = block.get(i).copied().unwrap_or(0.0) as f64;
            let q = ((v * inv_step).round_ties_even() as i64).clamp(qmin, qmax);
            w.write(q as u32, width);
        }
    }
    Ok(CompressedBuffer {
        codec: CodecSpec::FixedRate(bits),
        original_len: values.len(),
        block_count: blocks as u32,
        payload: w.finish(),
    })
}

fn decompress_fixed_rate(bits: u8, cbuf: &CompressedBuffer) -> Result<FloatBuffer, CodecError> {
    let n = cbuf.original_len;
    let blocks = n.div_ceil(FIXED_RATE_BLOCK);
    if cbuf.block_count as usize != blocks {
        return Err(corrupt(format!(
            "block count {} does not match {} values",
            cbuf.block_count, n
        )));
    }
    let expected = blocks * fixed_rate_block_bytes(bits);
    if cbuf.payload.len() != expected {
        return Err(corrupt(format!(
            "fixed-rate payload of {} bytes, expected {expected}",
            cbuf.payload.len()
        )));
    }
    let width = bits as u32;
    let shift = 32 - width;
    let mut r = BitReader::new(&cbuf.payload);
    let mut out = Vec::with_capacity(n);
    for b in 0..blocks {
        let field = r.read(8).expect("length checked") as u8;
        if field == 0xff {
            return Err(corrupt(format!("block {b} has a non-finite exponent")));
        }
        let step = exp2i(unbiased_exponent(field) - width as i32 + 2);
        let len = FIXED_RATE_BLOCK.min(n - b * FIXED_RATE_BLOCK);
        for i in 0..FIXED_RATE_BLOCK {
            let raw = r.read(width).expect("length checked");
            if i < len {
                let q = ((raw << shift) as i32) >> shift;
                // saturate: the top code of the largest binade exceeds f32::MAX
                let max = f32::MAX as f64;
                out.push((q as f64 * step).clamp(-max, max) as f32);
            }
        }
    }
    Ok(out.into())
}

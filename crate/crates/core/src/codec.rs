//! Wire encodings and payload accounting for the four frame kinds.
//!
//! Binary layout (little-endian throughout):
//!
//! ```text
//! header   { kind: u8, flags: u8, reserved: u16, round: u32, worker: u32, n: u32 }
//! kind-specific:
//!   Full   { count: u32 }                                payload: count * f32
//!   Core   { signature: u64, epoch: u32, count: u32 }    payload: count * f32
//!   Kv     { count: u32 }                                payload: count * (u32 index, f32 value)
//!   Quant  { bucket: u32, bits: u8, pad: [u8; 3], count: u32 }
//!          payload: ceil(count / bucket) * f32 scales,
//!                   then count fields of (bits + 1) bits packed LSB-first
//!                   into little-endian u32 words, zero-padded to a word
//! ```
//!
//! `payload_words` counts exact 4-byte words of payload; headers are O(1) per
//! frame and accounted separately by the simulator.

use crate::error::{Error, Result};
use crate::selection::CoreSet;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Frame identity carried by every header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameMeta {
    pub round: u32,
    pub worker: u32,
    /// Model dimension the frame addresses into.
    pub n: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Full,
    Core,
    Kv,
    Quant,
}

impl FrameKind {
    fn code(self) -> u8 {
        match self {
            FrameKind::Full => 0,
            FrameKind::Core => 1,
            FrameKind::Kv => 2,
            FrameKind::Quant => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => FrameKind::Full,
            1 => FrameKind::Core,
            2 => FrameKind::Kv,
            3 => FrameKind::Quant,
            _ => return Err(Error::Truncated { what: "unknown frame kind" }),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Full => "Full",
            FrameKind::Core => "Core",
            FrameKind::Kv => "Kv",
            FrameKind::Quant => "Quant",
        }
    }
}

/// Kind-specific header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameBody {
    Full { count: u32 },
    Core { signature: u64, epoch: u32, count: u32 },
    Kv { count: u32 },
    Quant { bucket: u32, bits: u8, count: u32 },
}

impl FrameBody {
    pub fn kind(&self) -> FrameKind {
        match self {
            FrameBody::Full { .. } => FrameKind::Full,
            FrameBody::Core { .. } => FrameKind::Core,
            FrameBody::Kv { .. } => FrameKind::Kv,
            FrameBody::Quant { .. } => FrameKind::Quant,
        }
    }
}

/// An encoded message with an exact payload-word count.
#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub meta: FrameMeta,
    pub body: FrameBody,
    payload: Vec<u8>,
}

impl WireFrame {
    pub fn kind(&self) -> FrameKind {
        self.body.kind()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Exact payload size in 4-byte words (headers excluded).
    pub fn payload_words(&self) -> usize {
        debug_assert_eq!(self.payload.len() % 4, 0);
        self.payload.len() / 4
    }

    /// Header size in bytes for separate accounting.
    pub fn header_bytes(&self) -> usize {
        16 + match self.body {
            FrameBody::Full { .. } | FrameBody::Kv { .. } => 4,
            FrameBody::Core { .. } => 16,
            FrameBody::Quant { .. } => 12,
        }
    }

    /// Serializes header + payload to the documented layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_bytes() + self.payload.len());
        out.push(self.kind().code());
        out.push(0); // flags
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.meta.round.to_le_bytes());
        out.extend_from_slice(&self.meta.worker.to_le_bytes());
        out.extend_from_slice(&self.meta.n.to_le_bytes());
        match self.body {
            FrameBody::Full { count } | FrameBody::Kv { count } => {
                out.extend_from_slice(&count.to_le_bytes());
            }
            FrameBody::Core {
                signature,
                epoch,
                count,
            } => {
                out.extend_from_slice(&signature.to_le_bytes());
                out.extend_from_slice(&epoch.to_le_bytes());
                out.extend_from_slice(&count.to_le_bytes());
            }
            FrameBody::Quant { bucket, bits, count } => {
                out.extend_from_slice(&bucket.to_le_bytes());
                out.push(bits);
                out.extend_from_slice(&[0u8; 3]);
                out.extend_from_slice(&count.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and validates the documented layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let kind = FrameKind::from_code(r.u8()?)?;
        let _flags = r.u8()?;
        let _reserved = r.u16()?;
        let meta = FrameMeta {
            round: r.u32()?,
            worker: r.u32()?,
            n: r.u32()?,
        };
        let body = match kind {
            FrameKind::Full => FrameBody::Full { count: r.u32()? },
            FrameKind::Core => FrameBody::Core {
                signature: r.u64()?,
                epoch: r.u32()?,
                count: r.u32()?,
            },
            FrameKind::Kv => FrameBody::Kv { count: r.u32()? },
            FrameKind::Quant => {
                let bucket = r.u32()?;
                let bits = r.u8()?;
                r.skip(3)?;
                FrameBody::Quant {
                    bucket,
                    bits,
                    count: r.u32()?,
                }
            }
        };
        let payload = r.rest().to_vec();
        let frame = WireFrame { meta, body, payload };
        frame.validate_payload_len()?;
        Ok(frame)
    }

    fn validate_payload_len(&self) -> Result<()> {
        let expected = match self.body {
            FrameBody::Full { count } | FrameBody::Core { count, .. } => count as usize * 4,
            FrameBody::Kv { count } => count as usize * 8,
            FrameBody::Quant { bucket, bits, count } => {
                quant_payload_bytes(count as usize, bucket as usize, bits)?
            }
        };
        if self.payload.len() != expected {
            return Err(Error::PayloadLength {
                what: self.kind().name(),
                expected,
                got: self.payload.len(),
            });
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Truncated { what: "frame header" });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn skip(&mut self, len: usize) -> Result<()> {
        self.take(len).map(|_| ())
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

/// Index-value map over a subset of coordinates, indices ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseUpdate {
    pub fn new(indices: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::ShapeMismatch {
                what: "sparse update",
                expected: indices.len(),
                got: values.len(),
            });
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::UnsortedOrDuplicateIndex { index: w[1] });
            }
        }
        Ok(Self { indices, values })
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
        }
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

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

/// Stochastic quantization parameters: `s = 2^bits - 1` levels per sign,
/// buckets of consecutive coordinates share one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantParams {
    bits: u8,
    bucket: u32,
}

impl Default for QuantParams {
    fn default() -> Self {
        Self {
            bits: 8,
            bucket: 512,
        }
    }
}

impl QuantParams {
    pub fn new(bits: u8, bucket: u32) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidQuantParams(format!("bits {bits} outside 1..=16")));
        }
        if bucket == 0 {
            return Err(Error::InvalidQuantParams("bucket must be >= 1".into()));
        }
        Ok(Self { bits, bucket })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn bucket(&self) -> u32 {
        self.bucket
    }

    /// Top quantization level, `2^bits - 1`.
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

fn quant_payload_bytes(count: usize, bucket: usize, bits: u8) -> Result<usize> {
    if bucket == 0 || !(1..=16).contains(&bits) {
        return Err(Error::InvalidQuantParams(format!(
            "bucket {bucket}, bits {bits}"
        )));
    }
    let scale_words = count.div_ceil(bucket);
    let packed_words = (count * (bits as usize + 1)).div_ceil(32);
    Ok((scale_words + packed_words) * 4)
}

fn check_finite(values: &[f32]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "frame values" });
    }
    Ok(())
}

/// Dense frame: the whole vector, `n` words on the wire.
pub fn encode_full(meta: FrameMeta, values: &[f32]) -> Result<WireFrame> {
    check_finite(values)?;
    let mut payload = Vec::with_capacity(values.len() * 4);
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    Ok(WireFrame {
        meta,
        body: FrameBody::Full {
            count: values.len() as u32,
        },
        payload,
    })
}

pub fn decode_full(frame: &WireFrame) -> Result<Vec<f32>> {
    let FrameBody::Full { count } = frame.body else {
        return Err(Error::FrameKindMismatch {
            expected: "Full",
            got: frame.kind().name(),
        });
    };
    frame.validate_payload_len()?;
    Ok(read_f32s(&frame.payload, count as usize))
}

fn read_f32s(bytes: &[u8], count: usize) -> Vec<f32> {
    (0..count)
        .map(|i| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()))
        .collect()
}

/// Key-cached core frame: values only, in ascending core-index order, plus a
/// signature of the cached keys. `|core|` words on the wire.
pub fn encode_core(meta: FrameMeta, values_at_core: &[f32], core: &CoreSet) -> Result<WireFrame> {
    if values_at_core.len() != core.len() {
        return Err(Error::ShapeMismatch {
            what: "core frame values",
            expected: core.len(),
            got: values_at_core.len(),
        });
    }
    check_finite(values_at_core)?;
    let mut payload = Vec::with_capacity(values_at_core.len() * 4);
    for v in values_at_core {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    Ok(WireFrame {
        meta,
        body: FrameBody::Core {
            signature: core.signature(),
            epoch: core.epoch(),
            count: core.len() as u32,
        },
        payload,
    })
}

/// Pairs the payload with the receiver's cached core; rejects stale caches.
pub fn decode_core(frame: &WireFrame, cached_core: &CoreSet) -> Result<SparseUpdate> {
    let FrameBody::Core {
        signature,
        epoch,
        count,
    } = frame.body
    else {
        return Err(Error::FrameKindMismatch {
            expected: "Core",
            got: frame.kind().name(),
        });
    };
    if signature != cached_core.signature() {
        return Err(Error::SignatureMismatch {
            cached: cached_core.signature(),
            frame: signature,
        });
    }
    if epoch != cached_core.epoch() {
        return Err(Error::EpochMismatch {
            cached: cached_core.epoch(),
            frame: epoch,
        });
    }
    if count as usize != cached_core.len() {
        return Err(Error::PayloadLength {
            what: "Core",
            expected: cached_core.len() * 4,
            got: count as usize * 4,
        });
    }
    frame.validate_payload_len()?;
    let values = read_f32s(&frame.payload, count as usize);
    SparseUpdate::new(cached_core.indices().to_vec(), values)
}

/// Explorer frame: explicit (index, value) pairs, `2 * |sparse|` words.
pub fn encode_kv(meta: FrameMeta, sparse: &SparseUpdate) -> Result<WireFrame> {
    if let Some(&last) = sparse.indices().last() {
        if last >= meta.n {
            return Err(Error::IndexOutOfRange {
                index: last,
                n: meta.n,
            });
        }
    }
    check_finite(sparse.values())?;
    let mut payload = Vec::with_capacity(sparse.len() * 8);
    for (i, v) in sparse.iter() {
        payload.extend_from_slice(&i.to_le_bytes());
        payload.extend_from_slice(&v.to_le_bytes());
    }
    Ok(WireFrame {
        meta,
        body: FrameBody::Kv {
            count: sparse.len() as u32,
        },
        payload,
    })
}

pub fn decode_kv(frame: &WireFrame) -> Result<SparseUpdate> {
    let FrameBody::Kv { count } = frame.body else {
        return Err(Error::FrameKindMismatch {
            expected: "Kv",
            got: frame.kind().name(),
        });
    };
    frame.validate_payload_len()?;
    let mut indices = Vec::with_capacity(count as usize);
    let mut values = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let off = i * 8;
        let idx = u32::from_le_bytes(frame.payload[off..off + 4].try_into().unwrap());
        if idx >= frame.meta.n {
            return Err(Error::IndexOutOfRange {
                index: idx,
                n: frame.meta.n,
            });
        }
        indices.push(idx);
        values.push(f32::from_le_bytes(
            frame.payload[off + 4..off + 8].try_into().unwrap(),
        ));
    }
    SparseUpdate::new(indices, values)
}

struct BitWriter {
    words: Vec<u32>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            words: Vec::new(),
            acc: 0,
            filled: 0,
        }
    }

    fn push(&mut self, value: u32, width: u32) {
        self.acc |= (value as u64) << self.filled;
        self.filled += width;
        while self.filled >= 32 {
            self.words.push(self.acc as u32);
            self.acc >>= 32;
            self.filled -= 32;
        }
    }

    fn finish(mut self) -> Vec<u32> {
        if self.filled > 0 {
            self.words.push(self.acc as u32);
        }
        self.words
    }
}

struct BitReader<'a> {
    words: &'a [u8],
    acc: u64,
    avail: u32,
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(words: &'a [u8]) -> Self {
        Self {
            words,
            acc: 0,
            avail: 0,
            pos: 0,
        }
    }

    fn pull(&mut self, width: u32) -> Result<u32> {
        while self.avail < width {
            if self.pos + 4 > self.words.len() {
                return Err(Error::Truncated { what: "quant bit stream" });
            }
            let w = u32::from_le_bytes(self.words[self.pos..self.pos + 4].try_into().unwrap());
            self.acc |= (w as u64) << self.avail;
            self.avail += 32;
            self.pos += 4;
        }
        let mask = (1u64 << width) - 1;
        let v = (self.acc & mask) as u32;
        self.acc >>= width;
        self.avail -= width;
        Ok(v)
    }
}

/// Bucketed stochastic quantization: per bucket a max-magnitude scale, per
/// value a sign bit and a level in `[0, 2^bits - 1]` drawn so the decode is
/// unbiased. Payload: `ceil(n/bucket) + ceil(n*(bits+1)/32)` words.
pub fn quant_encode(
    meta: FrameMeta,
    values: &[f32],
    qp: &QuantParams,
    rng_seed: u64,
) -> Result<WireFrame> {
    check_finite(values)?;
    let s = qp.levels();
    let width = qp.bits() as u32 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut payload = Vec::new();
    let mut writer = BitWriter::new();
    for chunk in values.chunks(qp.bucket() as usize) {
        let scale = chunk.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        payload.extend_from_slice(&scale.to_le_bytes());
        for &v in chunk {
            // One draw per value keeps the stream position independent of data.
            let u: f64 = rng.gen();
            let field = if scale == 0.0 || v == 0.0 {
                0
            } else {
                let x = (v.abs() as f64 / scale as f64) * s as f64;
                let floor = x.floor();
                let level = floor as u32 + u32::from(u < x - floor);
                let sign = u32::from(v < 0.0);
                (level << 1) | sign
            };
            writer.push(field, width);
        }
    }
    for w in writer.finish() {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    let frame = WireFrame {
        meta,
        body: FrameBody::Quant {
            bucket: qp.bucket(),
            bits: qp.bits(),
            count: values.len() as u32,
        },
        payload,
    };
    frame.validate_payload_len()?;
    Ok(frame)
}

/// `value_i = sign_i * level_i / s * scale_bucket(i)`.
pub fn quant_decode(frame: &WireFrame) -> Result<Vec<f32>> {
    let FrameBody::Quant { bucket, bits, count } = frame.body else {
        return Err(Error::FrameKindMismatch {
            expected: "Quant",
            got: frame.kind().name(),
        });
    };
    frame.validate_payload_len()?;
    let qp = QuantParams::new(bits, bucket)?;
    let s = qp.levels() as f64;
    let width = bits as u32 + 1;
    let n = count as usize;
    let n_buckets = n.div_ceil(bucket as usize);
    let scales = read_f32s(&frame.payload, n_buckets);
    let mut reader = BitReader::new(&frame.payload[n_buckets * 4..]);
    let mut out = Vec::with_capacity(n);
    for (i, scale) in scales.iter().enumerate() {
        let in_bucket = (n - i * bucket as usize).min(bucket as usize);
        for _ in 0..in_bucket {
            let field = reader.pull(width)?;
            let level = field >> 1;
            let sign = field & 1;
            let magnitude = (level as f64 / s * *scale as f64) as f32;
            out.push(if sign == 1 { -magnitude } else { magnitude });
        }
    }
    Ok(out)
}

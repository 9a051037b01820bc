//! Binary wire format for the three inter-agent payloads and byte accounting.
//!
//! Every payload starts with the same 16-byte little-endian header:
//!
//! | bytes  | field                                                       |
//! |--------|-------------------------------------------------------------|
//! | 0..4   | magic `b"CPWF"`                                             |
//! | 4      | version (1)                                                 |
//! | 5      | kind: 1 demand, 2 feature, 3 detection                      |
//! | 6      | flags: bit 0 set = 32-bit feature values (else 16-bit)      |
//! | 7      | aux: channel compression ratio `c0` for features, else 0    |
//! | 8..12  | sender id (u32)                                             |
//! | 12..16 | count: scale records / box count; demand packs rows, cols   |
//!
//! See `FORMAT.md` at the repository root for the payload bodies. Sender poses
//! travel in the transport envelope, not in the payload.

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AgentId, BevBox, Pose2};
use crate::grid::{BinaryMask, GridSpec, SparseGrid};

pub const MAGIC: [u8; 4] = *b"CPWF";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const SCALE_RECORD_LEN: usize = 8;
pub const COORD_BYTES: usize = 4;
pub const BOX_BYTES: usize = 24;

const FLAG_SINGLE: u8 = 0b0000_0001;

#[derive(Debug, Error, PartialEq)]
pub enum MessageError {
    #[error("payload truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown payload kind {0}")]
    UnknownKind(u8),
    #[error("expected {expected:?} payload, found {found:?}")]
    WrongKind {
        expected: PayloadKind,
        found: PayloadKind,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("nonzero padding bits in demand bitmap")]
    DirtyPadding,
    #[error("scale {scale} cell ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfBounds {
        scale: usize,
        row: u16,
        col: u16,
        rows: usize,
        cols: usize,
    },
    #[error("scale id {0} not in grid spec")]
    UnknownScale(u8),
    #[error("entries of scale {0} not strictly sorted by (row, col)")]
    Unsorted(usize),
    #[error("invalid compression: c0 = {c0}, nominal channels = {channels}")]
    InvalidCompression { c0: usize, channels: usize },
    #[error("{0} nominal channel counts for {1} scales")]
    ScaleCountMismatch(usize, usize),
    #[error("grid {rows}x{cols} exceeds u16 coordinates")]
    GridTooLarge { rows: usize, cols: usize },
    #[error("invalid box {index}: {reason}")]
    InvalidBox { index: usize, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PayloadKind {
    Demand = 1,
    Feature = 2,
    Detection = 3,
}

impl PayloadKind {
    fn from_u8(v: u8) -> Result<Self, MessageError> {
        match v {
            1 => Ok(Self::Demand),
            2 => Ok(Self::Feature),
            3 => Ok(Self::Detection),
            other => Err(MessageError::UnknownKind(other)),
        }
    }
}

/// Precision of transmitted feature values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuePrecision {
    #[default]
    Half,
    Single,
}

impl ValuePrecision {
    pub fn bytes(self) -> usize {
        match self {
            Self::Half => 2,
            Self::Single => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: PayloadKind,
    pub flags: u8,
    pub aux: u8,
    pub sender: u32,
    pub count: u32,
}

impl Header {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(WIRE_VERSION);
        out.push(self.kind as u8);
        out.push(self.flags);
        out.push(self.aux);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, MessageError> {
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(MessageError::BadMagic(magic));
        }
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(MessageError::UnsupportedVersion(version));
        }
        let kind = PayloadKind::from_u8(r.u8()?)?;
        let flags = r.u8()?;
        let aux = r.u8()?;
        let sender = r.u32()?;
        let count = r.u32()?;
        Ok(Self {
            kind,
            flags,
            aux,
            sender,
            count,
        })
    }

    fn expect(r: &mut Reader<'_>, kind: PayloadKind) -> Result<Self, MessageError> {
        let h = Self::read(r)?;
        if h.kind != kind {
            return Err(MessageError::WrongKind {
                expected: kind,
                found: h.kind,
            });
        }
        Ok(h)
    }
}

/// Reads the header of any payload.
pub fn peek_header(bytes: &[u8]) -> Result<Header, MessageError> {
    Header::read(&mut Reader::new(bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MessageError> {
        if self.buf.len() - self.pos < n {
            return Err(MessageError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MessageError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MessageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, MessageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, MessageError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), MessageError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(MessageError::TrailingBytes(n)),
        }
    }
}

/// Ego's demand mask, broadcast to collaborators.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMessage {
    pub sender: AgentId,
    pub mask: BinaryMask,
}

impl DemandMessage {
    pub fn encoded_len(&self) -> usize {
        demand_len(self.mask.rows, self.mask.cols)
    }

    /// Row-major bitmap, LSB first within each byte, padding bits zero.
    pub fn encode(&self) -> Result<Vec<u8>, MessageError> {
        let (rows, cols) = (self.mask.rows, self.mask.cols);
        if rows > u16::MAX as usize || cols > u16::MAX as usize {
            return Err(MessageError::GridTooLarge { rows, cols });
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        Header {
            kind: PayloadKind::Demand,
            flags: 0,
            aux: 0,
            sender: self.sender,
            count: rows as u32 | (cols as u32) << 16,
        }
        .write(&mut out);
        let mut bytes = vec![0u8; (rows * cols).div_ceil(8)];
        for (i, _) in self.mask.bits.iter().enumerate().filter(|(_, &b)| b) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bytes);
        Ok(out)
    }
}

pub fn demand_len(rows: usize, cols: usize) -> usize {
    HEADER_LEN + (rows * cols).div_ceil(8)
}

pub fn encode_demand(sender: AgentId, mask: &BinaryMask) -> Result<Vec<u8>, MessageError> {
    DemandMessage {
        sender,
        mask: mask.clone(),
    }
    .encode()
}

pub fn decode_demand(bytes: &[u8]) -> Result<DemandMessage, MessageError> {
    let mut r = Reader::new(bytes);
    let h = Header::expect(&mut r, PayloadKind::Demand)?;
    let rows = (h.count & 0xFFFF) as usize;
    let cols = (h.count >> 16) as usize;
    let n = rows * cols;
    let body = r.take(n.div_ceil(8))?;
    r.finish()?;
    if !n.is_multiple_of(8) && body[n / 8] >> (n % 8) != 0 {
        return Err(MessageError::DirtyPadding);
    }
    let bits = (0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(DemandMessage {
        sender: h.sender,
        mask: BinaryMask {
            rows,
            cols,
            scale: 0,
            bits,
        },
    })
}

/// Multi-scale sparse features after channel compression. Each scale's
/// `channels` is `C_l / c0`; only the first two slots carry the stand-in
/// evidence, the rest are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMessage {
    pub sender: AgentId,
    pub c0: usize,
    pub precision: ValuePrecision,
    pub pose: Pose2,
    pub scales: Vec<SparseGrid>,
}

/// Byte breakdown of an encoded feature message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSize {
    pub header: usize,
    pub records: usize,
    pub coords: usize,
    pub values: usize,
    pub cells: usize,
}

impl FeatureSize {
    pub fn total(&self) -> usize {
        self.header + self.records + self.coords + self.values
    }
}

/// Bytes one selected cell costs at a scale with `nominal_channels` channels.
pub fn cell_payload_bytes(nominal_channels: usize, c0: usize, precision: ValuePrecision) -> usize {
    nominal_channels / c0 * precision.bytes() + COORD_BYTES
}

impl FeatureMessage {
    /// Applies the channel-compression size model to a sparse selection.
    pub fn from_selection(
        sender: AgentId,
        sparse: &[SparseGrid],
        c0: usize,
        nominal_channels: &[usize],
        precision: ValuePrecision,
        pose: Pose2,
    ) -> Result<Self, MessageError> {
        if nominal_channels.len() != sparse.len() {
            return Err(MessageError::ScaleCountMismatch(nominal_channels.len(), sparse.len()));
        }
        if c0 == 0 || c0 > u8::MAX as usize {
            return Err(MessageError::InvalidCompression { c0, channels: 0 });
        }
        let mut scales = Vec::with_capacity(sparse.len());
        for (grid, &nominal) in sparse.iter().zip(nominal_channels) {
            let k = nominal / c0;
            if nominal % c0 != 0 || k == 0 || k > u16::MAX as usize {
                return Err(MessageError::InvalidCompression {
                    c0,
                    channels: nominal,
                });
            }
            if grid.rows > u16::MAX as usize || grid.cols > u16::MAX as usize {
                return Err(MessageError::GridTooLarge {
                    rows: grid.rows,
                    cols: grid.cols,
                });
            }
            let keep = grid.channels.min(k);
            let mut out = SparseGrid::empty(grid.scale, grid.rows, grid.cols, k);
            out.coords = grid.coords.clone();
            out.values = Vec::with_capacity(grid.len() * k);
            for (_, v) in grid.iter() {
                out.values.extend_from_slice(&v[..keep]);
                out.values.extend(std::iter::repeat_n(0.0, k - keep));
            }
            scales.push(out);
        }
        Ok(Self {
            sender,
            c0,
            precision,
            pose,
            scales,
        })
    }

    pub fn size(&self) -> FeatureSize {
        let mut s = FeatureSize {
            header: HEADER_LEN,
            records: SCALE_RECORD_LEN * self.scales.len(),
            ..FeatureSize::default()
        };
        for g in &self.scales {
            s.cells += g.len();
            s.coords += COORD_BYTES * g.len();
            s.values += g.len() * g.channels * self.precision.bytes();
        }
        s
    }

    pub fn encoded_len(&self) -> usize {
        self.size().total()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        Header {
            kind: PayloadKind::Feature,
            flags: if self.precision == ValuePrecision::Single {
                FLAG_SINGLE
            } else {
                0
            },
            aux: self.c0 as u8,
            sender: self.sender,
            count: self.scales.len() as u32,
        }
        .write(&mut out);
        for g in &self.scales {
            out.push(g.scale as u8);
            out.push(0);
            out.extend_from_slice(&(g.channels as u16).to_le_bytes());
            out.extend_from_slice(&(g.len() as u32).to_le_bytes());
            for ((r, c), values) in g.iter() {
                out.extend_from_slice(&r.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
                match self.precision {
                    ValuePrecision::Half => {
                        for &v in values {
                            out.extend_from_slice(&f16::from_f32(v).to_le_bytes());
                        }
                    }
                    ValuePrecision::Single => {
                        for &v in values {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }
}

/// Builds and encodes a feature message in one step.
pub fn encode_feature_message(
    sender: AgentId,
    sparse: &[SparseGrid],
    c0: usize,
    nominal_channels: &[usize],
    precision: ValuePrecision,
    pose: Pose2,
) -> Result<(FeatureMessage, Vec<u8>), MessageError> {
    let msg = FeatureMessage::from_selection(sender, sparse, c0, nominal_channels, precision, pose)?;
    let bytes = msg.encode();
    debug_assert_eq!(bytes.len(), msg.encoded_len());
    Ok((msg, bytes))
}

/// Decodes a feature payload; `pose` comes from the transport envelope.
pub fn decode_feature_message(bytes: &[u8], pose: Pose2, spec: &GridSpec) -> Result<FeatureMessage, MessageError> {
    let mut r = Reader::new(bytes);
    let h = Header::expect(&mut r, PayloadKind::Feature)?;
    let precision = if h.flags & FLAG_SINGLE != 0 {
        ValuePrecision::Single
    } else {
        ValuePrecision::Half
    };
    let mut scales = Vec::with_capacity(h.count as usize);
    for _ in 0..h.count {
        let scale_id = r.u8()?;
        let _reserved = r.u8()?;
        let channels = r.u16()? as usize;
        let entries = r.u32()? as usize;
        let scale = scale_id as usize;
        if scale >= spec.num_scales() {
            return Err(MessageError::UnknownScale(scale_id));
        }
        let (rows, cols) = spec.dims(scale);
        // Bound the allocation by what the buffer can actually hold.
        let per_entry = COORD_BYTES + channels * precision.bytes();
        let remaining = bytes.len() - r.pos;
        if entries.saturating_mul(per_entry) > remaining {
            return Err(MessageError::Truncated {
                offset: r.pos,
                needed: entries.saturating_mul(per_entry),
                available: remaining,
            });
        }
        let mut g = SparseGrid::empty(scale, rows, cols, channels);
        g.coords.reserve(entries);
        g.values.reserve(entries * channels);
        for _ in 0..entries {
            let row = r.u16()?;
            let col = r.u16()?;
            if row as usize >= rows || col as usize >= cols {
                return Err(MessageError::OutOfBounds {
                    scale,
                    row,
                    col,
                    rows,
                    cols,
                });
            }
            g.coords.push((row, col));
            for _ in 0..channels {
                let v = match precision {
                    ValuePrecision::Half => f16::from_bits(r.u16()?).to_f32(),
                    ValuePrecision::Single => r.f32()?,
                };
                g.values.push(v);
            }
        }
        if !g.is_sorted() {
            return Err(MessageError::Unsorted(scale));
        }
        scales.push(g);
    }
    r.finish()?;
    Ok(FeatureMessage {
        sender: h.sender,
        c0: h.aux as usize,
        precision,
        pose,
        scales,
    })
}

/// Single-agent detections in the sender's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMessage {
    pub sender: AgentId,
    pub pose: Pose2,
    pub boxes: Vec<BevBox>,
}

pub fn detection_len(boxes: usize) -> usize {
    HEADER_LEN + BOX_BYTES * boxes
}

/// Header plus six little-endian f32 per box: cx, cy, length, width, yaw, confidence.
pub fn encode_detections(sender: AgentId, boxes: &[BevBox]) -> Vec<u8> {
    let mut out = Vec::with_capacity(detection_len(boxes.len()));
    Header {
        kind: PayloadKind::Detection,
        flags: 0,
        aux: 0,
        sender,
        count: boxes.len() as u32,
    }
    .write(&mut out);
    for b in boxes {
        for v in [b.cx, b.cy, b.length, b.width, b.yaw, b.confidence] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a detection payload; `pose` comes from the transport envelope.
pub fn decode_detections(bytes: &[u8], pose: Pose2) -> Result<DetectionMessage, MessageError> {
    let mut r = Reader::new(bytes);
    let h = Header::expect(&mut r, PayloadKind::Detection)?;
    let n = h.count as usize;
    if n.saturating_mul(BOX_BYTES) > bytes.len() - r.pos {
        return Err(MessageError::Truncated {
            offset: r.pos,
            needed: n.saturating_mul(BOX_BYTES),
            available: bytes.len() - r.pos,
        });
    }
    let mut boxes = Vec::with_capacity(n);
    for index in 0..n {
        let mut v = [0f64; 6];
        for slot in &mut v {
            *slot = r.f32()? as f64;
        }
        let [cx, cy, length, width, yaw, confidence] = v;
        if !(length > 0.0 && width > 0.0) || !cx.is_finite() || !cy.is_finite() || !yaw.is_finite() {
            return Err(MessageError::InvalidBox {
                index,
                reason: "non-positive extent or non-finite value",
            });
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MessageError::InvalidBox {
                index,
                reason: "confidence outside [0, 1]",
            });
        }
        boxes.push(BevBox {
            cx,
            cy,
            length,
            width,
            yaw,
            confidence,
            source_agent: h.sender,
        });
    }
    r.finish()?;
    Ok(DetectionMessage {
        sender: h.sender,
        pose,
        boxes,
    })
}

/// Bytes exchanged on one ego ↔ collaborator link in one frame.
///
/// `total_bytes` counts what the collaborator sends to the ego (features and
/// detections); the demand broadcast travels the other way and is reported
/// separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ByteReport {
    pub demand_bytes: usize,
    pub feature_bytes: usize,
    pub detection_bytes: usize,
    /// Part of `feature_bytes` spent on feature values.
    pub feature_value_bytes: usize,
    /// Selected cells summed over scales.
    pub feature_cells: usize,
}

impl ByteReport {
    pub fn total_bytes(&self) -> usize {
        self.feature_bytes + self.detection_bytes
    }

    pub fn mbps(&self, rate_hz: f64) -> f64 {
        bytes_to_mbps(self.total_bytes() as f64, rate_hz)
    }
}

pub fn bytes_to_mbps(bytes_per_frame: f64, rate_hz: f64) -> f64 {
    bytes_per_frame * rate_hz * 8.0 / 1e6
}

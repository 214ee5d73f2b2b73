//! `VQVC` v1 container: fixed-width index planes, no entropy coding.
//!
//! Everything here is integer-only.
//!
//! Header, all integers little-endian (53 bytes):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `VQVC` |
//! | 4 | 1 | version (1) |
//! | 5 | 4 | frame width in pixels |
//! | 9 | 4 | frame height in pixels |
//! | 13 | 4 | GOP size `m` |
//! | 17 | 4 | number of frame records that follow |
//! | 21 | 12 | keyframe codebook sizes `K1,K2,K3` (u32 each) |
//! | 33 | 12 | predicted codebook sizes `K1,K2,K3` (u32 each) |
//! | 45 | 8 | content hash of the weight bundle |
//!
//! Each frame record is a kind byte (0 keyframe, 1 predicted) followed by
//! six index planes: stage 1..3, codebook 0..1, each in raster order.
//! A plane stores every index in `ceil(log2 K)` bits, MSB-first, and is
//! zero-padded to a byte boundary. The GOP ends with an 8-byte FNV-1a 64
//! checksum of everything before it, header included. A file is a
//! concatenation of GOP streams.

use crate::autoencoder::DOWNSAMPLE_FACTOR;
use crate::error::{Error, Result};
use crate::quantizer::{stage_extents, CodebookSpec, IndexGrid, StageIndices, BOOKS_PER_STAGE, STAGES};
use crate::weights::fnv1a64;

pub const MAGIC: &[u8; 4] = b"VQVC";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 53;
pub const CHECKSUM_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Key,
    Predicted,
}

impl FrameKind {
    fn byte(self) -> u8 {
        match self {
            FrameKind::Key => 0,
            FrameKind::Predicted => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FrameKind::Key),
            1 => Ok(FrameKind::Predicted),
            _ => Err(Error::CorruptStream(format!("unknown frame kind {b}"))),
        }
    }
}

/// Index payload size of one frame. `index_bits + padding_bits` is exactly
/// the packed plane length in bits; the kind byte and header are not included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BitCount {
    pub index_bits: u64,
    pub padding_bits: u64,
}

impl BitCount {
    pub fn payload_bits(&self) -> u64 {
        self.index_bits + self.padding_bits
    }
}

/// Payload bits of one frame of `width`×`height` pixels coded with `spec`.
pub fn measure_bits(spec: &CodebookSpec, width: usize, height: usize) -> Result<BitCount> {
    let (lh, lw) = latent_extents(width, height)?;
    measure_latent_bits(spec, lh, lw)
}

fn measure_latent_bits(spec: &CodebookSpec, lh: usize, lw: usize) -> Result<BitCount> {
    let mut count = BitCount::default();
    for ((h, w), bits) in stage_extents(lh, lw)?.into_iter().zip(spec.index_bits()) {
        let plane = (h * w) as u64 * bits as u64;
        let padded = plane.div_ceil(8) * 8;
        count.index_bits += BOOKS_PER_STAGE as u64 * plane;
        count.padding_bits += BOOKS_PER_STAGE as u64 * (padded - plane);
    }
    Ok(count)
}

fn latent_extents(width: usize, height: usize) -> Result<(usize, usize)> {
    if width == 0 || height == 0 || !width.is_multiple_of(DOWNSAMPLE_FACTOR) || !height.is_multiple_of(DOWNSAMPLE_FACTOR) {
        return Err(Error::Config(format!(
            "frame {width}x{height} is not divisible by {DOWNSAMPLE_FACTOR}"
        )));
    }
    Ok((height / DOWNSAMPLE_FACTOR, width / DOWNSAMPLE_FACTOR))
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), acc: 0, filled: 0 }
    }

    fn put(&mut self, value: u32, width: u32) {
        self.acc = (self.acc << width) | value as u64;
        self.filled += width;
        while self.filled >= 8 {
            self.filled -= 8;
            self.bytes.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    fn align(&mut self) {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
            self.acc = 0;
            self.filled = 0;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0, acc: 0, filled: 0 }
    }

    fn get(&mut self, width: u32) -> Result<u32> {
        while self.filled < width {
            let b = *self
                .bytes
                .get(self.pos)
                .ok_or_else(|| Error::CorruptStream("index payload truncated".into()))?;
            self.pos += 1;
            self.acc = (self.acc << 8) | b as u64;
            self.filled += 8;
        }
        self.filled -= width;
        let v = (self.acc >> self.filled) as u32 & ((1u64 << width) - 1) as u32;
        self.acc &= (1u64 << self.filled) - 1;
        Ok(v)
    }

    fn align(&mut self) {
        self.acc = 0;
        self.filled = 0;
    }
}

/// Packs every plane of `grid` at the widths implied by `spec`.
pub fn pack_indices(grid: &IndexGrid, spec: &CodebookSpec) -> Result<Vec<u8>> {
    if grid.stages.len() != STAGES {
        return Err(Error::Encode(format!("grid has {} stages, expected {STAGES}", grid.stages.len())));
    }
    let mut w = BitWriter::new();
    for (stage, (&k, bits)) in grid.stages.iter().zip(spec.sizes.iter().zip(spec.index_bits())) {
        for plane in &stage.planes {
            if plane.len() != stage.height * stage.width {
                return Err(Error::Encode(format!(
                    "plane holds {} indices for a {}x{} grid",
                    plane.len(),
                    stage.height,
                    stage.width
                )));
            }
            for &i in plane {
                if i as usize >= k {
                    return Err(Error::Encode(format!("index {i} out of range for codebook of size {k}")));
                }
                w.put(i, bits);
            }
            w.align();
        }
    }
    Ok(w.bytes)
}

/// Byte length of a packed grid for an `lh`×`lw` latent.
pub fn packed_len(spec: &CodebookSpec, lh: usize, lw: usize) -> Result<usize> {
    Ok((measure_latent_bits(spec, lh, lw)?.payload_bits() / 8) as usize)
}

/// Exact inverse of [`pack_indices`] for an `lh`×`lw` latent.
pub fn unpack_indices(bytes: &[u8], spec: &CodebookSpec, lh: usize, lw: usize) -> Result<IndexGrid> {
    let expected = packed_len(spec, lh, lw)?;
    if bytes.len() != expected {
        return Err(Error::CorruptStream(format!(
            "index payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut r = BitReader::new(bytes);
    let mut stages = Vec::with_capacity(STAGES);
    for ((h, w), (&k, bits)) in stage_extents(lh, lw)?.into_iter().zip(spec.sizes.iter().zip(spec.index_bits())) {
        let mut plane = || -> Result<Vec<u32>> {
            let mut out = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                let i = r.get(bits)?;
                if i as usize >= k {
                    return Err(Error::CorruptStream(format!("index {i} out of range for codebook of size {k}")));
                }
                out.push(i);
            }
            r.align();
            Ok(out)
        };
        let planes: [Vec<u32>; BOOKS_PER_STAGE] = [plane()?, plane()?];
        stages.push(StageIndices { height: h, width: w, planes });
    }
    Ok(IndexGrid { stages })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
    pub gop: u32,
    pub frame_count: u32,
    pub keyframe: CodebookSpec,
    pub predicted: CodebookSpec,
    pub weight_hash: u64,
}

impl StreamHeader {
    pub fn latent_extents(&self) -> Result<(usize, usize)> {
        latent_extents(self.width as usize, self.height as usize)
    }

    pub fn spec(&self, kind: FrameKind) -> &CodebookSpec {
        match kind {
            FrameKind::Key => &self.keyframe,
            FrameKind::Predicted => &self.predicted,
        }
    }

    /// Kind of record `i` within the GOP.
    pub fn kind_at(i: usize) -> FrameKind {
        if i == 0 {
            FrameKind::Key
        } else {
            FrameKind::Predicted
        }
    }

    /// Index payload of the whole GOP, computed from the header alone.
    pub fn payload_bits(&self) -> Result<BitCount> {
        let mut total = BitCount::default();
        for i in 0..self.frame_count as usize {
            let b = measure_bits(self.spec(Self::kind_at(i)), self.width as usize, self.height as usize)?;
            total.index_bits += b.index_bits;
            total.padding_bits += b.padding_bits;
        }
        Ok(total)
    }

    /// Header, one kind byte per record and the checksum.
    pub fn overhead_bits(&self) -> u64 {
        8 * (HEADER_BYTES as u64 + self.frame_count as u64 + CHECKSUM_BYTES as u64)
    }

    /// Serialized length of the GOP stream this header describes.
    pub fn stream_len(&self) -> Result<usize> {
        Ok((self.overhead_bits() + self.payload_bits()?.payload_bits()) as usize / 8)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [self.width, self.height, self.gop, self.frame_count] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for k in self.keyframe.sizes.iter().chain(&self.predicted.sizes) {
            out.extend_from_slice(&(*k as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.weight_hash.to_le_bytes());
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::CorruptStream(format!("header needs {HEADER_BYTES} bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CorruptStream("not a VQVC stream".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version(format!("stream version {} (supported: {VERSION})", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let spec_at = |o: usize| {
            CodebookSpec::new([u32_at(o) as usize, u32_at(o + 4) as usize, u32_at(o + 8) as usize])
                .map_err(|e| Error::CorruptStream(e.to_string()))
        };
        let h = StreamHeader {
            width: u32_at(5),
            height: u32_at(9),
            gop: u32_at(13),
            frame_count: u32_at(17),
            keyframe: spec_at(21)?,
            predicted: spec_at(33)?,
            weight_hash: u64::from_le_bytes(bytes[45..53].try_into().unwrap()),
        };
        if h.gop == 0 || h.frame_count == 0 || h.frame_count > h.gop {
            return Err(Error::CorruptStream(format!(
                "{} frames in a GOP of size {}",
                h.frame_count, h.gop
            )));
        }
        let (lh, lw) = h.latent_extents().map_err(|e| Error::CorruptStream(e.to_string()))?;
        stage_extents(lh, lw).map_err(|e| Error::CorruptStream(e.to_string()))?;
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub kind: FrameKind,
    pub grid: IndexGrid,
}

/// One GOP: header plus its frame records in display order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopBitstream {
    pub header: StreamHeader,
    pub frames: Vec<FrameRecord>,
}

impl GopBitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.frames.len() != self.header.frame_count as usize {
            return Err(Error::Encode(format!(
                "header announces {} frames, stream holds {}",
                self.header.frame_count,
                self.frames.len()
            )));
        }
        let (lh, lw) = self.header.latent_extents()?;
        let mut out = Vec::with_capacity(self.header.stream_len()?);
        self.header.write(&mut out);
        for (i, f) in self.frames.iter().enumerate() {
            if f.kind != StreamHeader::kind_at(i) {
                return Err(Error::Encode(format!("record {i} has kind {:?}", f.kind)));
            }
            if f.grid.latent_extents()? != (lh, lw) {
                return Err(Error::Encode(format!("record {i} does not match the frame extents")));
            }
            out.push(f.kind.byte());
            out.extend(pack_indices(&f.grid, self.header.spec(f.kind))?);
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parses one GOP stream from the front of `bytes`, returning it and the
    /// number of bytes consumed. The stream must have been produced with the
    /// weights whose hash is `weight_hash`.
    pub fn parse(bytes: &[u8], weight_hash: u64) -> Result<(Self, usize)> {
        let header = StreamHeader::parse(bytes)?;
        if header.weight_hash != weight_hash {
            return Err(Error::ModelMismatch {
                expected: header.weight_hash,
                actual: weight_hash,
            });
        }
        let len = header.stream_len()?;
        if bytes.len() < len {
            return Err(Error::CorruptStream(format!("stream truncated: {} of {len} bytes", bytes.len())));
        }
        let body = len - CHECKSUM_BYTES;
        if fnv1a64(&bytes[..body]).to_le_bytes() != bytes[body..len] {
            return Err(Error::CorruptStream("checksum mismatch".into()));
        }
        let (lh, lw) = header.latent_extents()?;
        let mut pos = HEADER_BYTES;
        let mut frames = Vec::with_capacity(header.frame_count as usize);
        for i in 0..header.frame_count as usize {
            let kind = FrameKind::from_byte(bytes[pos])?;
            if kind != StreamHeader::kind_at(i) {
                return Err(Error::CorruptStream(format!("record {i} has kind {kind:?}")));
            }
            pos += 1;
            let spec = header.spec(kind);
            let n = packed_len(spec, lh, lw)?;
            let grid = unpack_indices(&bytes[pos..pos + n], spec, lh, lw)?;
            pos += n;
            frames.push(FrameRecord { kind, grid });
        }
        Ok((GopBitstream { header, frames }, len))
    }

    /// Parses a file holding one or more concatenated GOP streams.
    pub fn parse_all(bytes: &[u8], weight_hash: u64) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let (g, n) = Self::parse(&bytes[pos..], weight_hash)?;
            out.push(g);
            pos += n;
        }
        if out.is_empty() {
            return Err(Error::CorruptStream("empty stream".into()));
        }
        Ok(out)
    }

    pub fn payload_bits(&self) -> Result<BitCount> {
        self.header.payload_bits()
    }

    /// Exact integer parts of bits per pixel: `(index bits, pixels)`.
    pub fn rate(&self) -> Result<(u64, u64)> {
        let pixels = self.header.width as u64 * self.header.height as u64 * self.header.frame_count as u64;
        Ok((self.payload_bits()?.index_bits, pixels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(k: [usize; 3]) -> CodebookSpec {
        CodebookSpec::new(k).unwrap()
    }

    fn grid_from(lh: usize, lw: usize, spec: &CodebookSpec, mut next: impl FnMut(usize) -> u32) -> IndexGrid {
        let stages = stage_extents(lh, lw)
            .unwrap()
            .into_iter()
            .zip(spec.sizes)
            .map(|((h, w), k)| StageIndices {
                height: h,
                width: w,
                planes: [(0..h * w).map(|_| next(k)).collect(), (0..h * w).map(|_| next(k)).collect()],
            })
            .collect();
        IndexGrid { stages }
    }

    #[test]
    fn writer_bit_layout() {
        let mut w = BitWriter::new();
        for v in [0, 1, 1, 0] {
            w.put(v, 1);
        }
        w.align();
        assert_eq!(w.bytes, [0x60]);
        let mut r = BitReader::new(&w.bytes);
        let back: Vec<u32> = (0..4).map(|_| r.get(1).unwrap()).collect();
        assert_eq!(back, [0, 1, 1, 0]);

        let mut w = BitWriter::new();
        w.put(0b1_0110_0111_0001, 13);
        w.put(0b101, 3);
        assert_eq!(w.bytes, [0b1011_0011, 0b1000_1101]);
    }

    #[test]
    fn closed_form_payloads() {
        let key = measure_bits(&CodebookSpec::KEYFRAME, 1920, 1024).unwrap();
        assert_eq!(key.index_bits, 250560);
        assert_eq!(key.padding_bits, 0);
        assert_eq!(measure_bits(&CodebookSpec::PREDICTED_LOW, 1920, 1024).unwrap().index_bits, 96960);
        // one plane of K=8192 at 64x120: 64*120*13/8 bytes
        assert_eq!(64 * 120 * 13 / 8, 12480);
        assert_eq!(packed_len(&CodebookSpec::KEYFRAME, 128, 240).unwrap(), 250560 / 8);
        let tiny = measure_bits(&spec([3, 3, 3]), 64, 64).unwrap();
        assert_eq!(tiny.index_bits, 2 * 2 * (16 + 4 + 1));
        assert_eq!(tiny.padding_bits, 2 * 6);
        assert!(measure_bits(&CodebookSpec::KEYFRAME, 1920, 1020).is_err());
    }

    #[test]
    fn measured_bits_match_packed_length_exhaustively() {
        for k in [2usize, 3, 5, 8, 100, 8192] {
            let s = spec([k, k.max(3) - 1, 2]);
            for lh in (8..=40).step_by(8) {
                for lw in (8..=40).step_by(8) {
                    let g = grid_from(lh, lw, &s, |k| (k - 1) as u32);
                    let bytes = pack_indices(&g, &s).unwrap();
                    assert_eq!(bytes.len() as u64 * 8, measure_latent_bits(&s, lh, lw).unwrap().payload_bits());
                }
            }
        }
    }

    #[test]
    fn pack_rejects_out_of_range_and_unpack_rejects_bad_lengths() {
        let s = spec([3, 2, 2]);
        let mut g = grid_from(8, 8, &s, |_| 0);
        let bytes = pack_indices(&g, &s).unwrap();
        assert!(matches!(unpack_indices(&bytes[1..], &s, 8, 8), Err(Error::CorruptStream(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(unpack_indices(&long, &s, 8, 8), Err(Error::CorruptStream(_))));
        // K=3 uses 2 bits, so the value 3 is representable but invalid
        let mut bad = bytes;
        bad[0] = 0xC0;
        assert!(matches!(unpack_indices(&bad, &s, 8, 8), Err(Error::CorruptStream(_))));
        g.stages[0].planes[1][3] = 3;
        assert!(matches!(pack_indices(&g, &s), Err(Error::Encode(_))));
    }

    fn header(frames: u32) -> StreamHeader {
        StreamHeader {
            width: 128,
            height: 64,
            gop: 4,
            frame_count: frames,
            keyframe: spec([16, 8, 4]),
            predicted: spec([5, 8, 4]),
            weight_hash: 0xfeed_beef,
        }
    }

    fn stream(frames: u32, seed: u32) -> GopBitstream {
        let h = header(frames);
        let mut state = seed;
        let frames = (0..frames as usize)
            .map(|i| {
                let kind = StreamHeader::kind_at(i);
                let grid = grid_from(8, 16, h.spec(kind), |k| {
                    state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                    (state >> 8) % k as u32
                });
                FrameRecord { kind, grid }
            })
            .collect();
        GopBitstream { header: h, frames }
    }

    #[test]
    fn container_round_trip_and_errors() {
        let a = stream(3, 1);
        let b = stream(4, 2);
        let mut file = a.to_bytes().unwrap();
        assert_eq!(file.len(), a.header.stream_len().unwrap());
        file.extend(b.to_bytes().unwrap());
        let back = GopBitstream::parse_all(&file, 0xfeed_beef).unwrap();
        assert_eq!(back, vec![a.clone(), b]);

        assert!(matches!(
            GopBitstream::parse_all(&file, 1),
            Err(Error::ModelMismatch { expected: 0xfeed_beef, actual: 1 })
        ));
        let one = a.to_bytes().unwrap();
        assert!(matches!(GopBitstream::parse(&one[..one.len() - 1], 0xfeed_beef), Err(Error::CorruptStream(_))));
        let mut v = one.clone();
        v[4] = 2;
        assert!(matches!(GopBitstream::parse(&v, 0xfeed_beef), Err(Error::Version(_))));
        let mut k = one.clone();
        k[HEADER_BYTES] = 1;
        assert!(matches!(GopBitstream::parse(&k, 0xfeed_beef), Err(Error::CorruptStream(_))));
        let mut m = one;
        m[0] = b'X';
        assert!(matches!(GopBitstream::parse(&m, 0xfeed_beef), Err(Error::CorruptStream(_))));

        let mut wrong = a;
        wrong.frames.swap(0, 1);
        assert!(wrong.to_bytes().is_err());
    }

    #[test]
    fn rate_depends_only_on_header() {
        let (a, b) = (stream(4, 7), stream(4, 9));
        assert_ne!(a, b);
        assert_eq!(a.rate().unwrap(), b.rate().unwrap());
        let key = measure_bits(&spec([16, 8, 4]), 128, 64).unwrap().index_bits;
        let pred = measure_bits(&spec([5, 8, 4]), 128, 64).unwrap().index_bits;
        assert_eq!(a.rate().unwrap(), (key + 3 * pred, 128 * 64 * 4));
    }

    proptest! {
        #[test]
        fn pack_unpack_pack_is_identity(k in prop::array::uniform3(1usize..9000), seed: u32, lh in 1usize..4, lw in 1usize..4) {
            let s = spec(k);
            let (lh, lw) = (lh * 8, lw * 8);
            let mut state = seed;
            let g = grid_from(lh, lw, &s, |k| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                state % k as u32
            });
            let bytes = pack_indices(&g, &s).unwrap();
            let back = unpack_indices(&bytes, &s, lh, lw).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(pack_indices(&back, &s).unwrap(), bytes);
        }
    }
}

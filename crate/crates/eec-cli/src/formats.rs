//! On-disk formats: binary PGM masks and packed two-view feature streams.
//!
//! Both formats round-trip bit-exactly and all writes are atomic
//! (temp file in the target directory, then rename). Multi-byte values
//! are little-endian throughout.

use std::fmt;
use std::fs;
use std::path::Path;

use eec_core::harness::StreamRecord;
use eec_core::metrics::Mask;
use eec_core::numerics::FeatureMap;

#[derive(Debug)]
pub enum FormatError {
    Io(std::io::Error),
    /// Wrong leading magic; `offset` is where the magic was expected.
    BadMagic { offset: usize, detail: &'static str },
    /// Structurally invalid header or framing.
    Header { offset: usize, detail: &'static str },
    UnsupportedVersion { got: u32 },
    /// Payload ends before the advertised size.
    Truncated { offset: usize, detail: &'static str },
    /// A stream record is cut short; `index` is the first missing record.
    TruncatedRecord { index: usize },
    /// Stream records must be numbered 1..=T contiguously.
    NonContiguousFrames { index: usize, got: u32 },
    EmptyStream,
    Core(eec_core::Error),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "io error: {e}"),
            FormatError::BadMagic { offset, detail } => {
                write!(f, "bad magic at byte {offset}: {detail}")
            }
            FormatError::Header { offset, detail } => {
                write!(f, "malformed header at byte {offset}: {detail}")
            }
            FormatError::UnsupportedVersion { got } => {
                write!(f, "unsupported format version {got}")
            }
            FormatError::Truncated { offset, detail } => {
                write!(f, "truncated at byte {offset}: {detail}")
            }
            FormatError::TruncatedRecord { index } => {
                write!(f, "stream ends inside record {index}")
            }
            FormatError::NonContiguousFrames { index, got } => {
                write!(f, "record {index} has frame number {got}, expected {}", index + 1)
            }
            FormatError::EmptyStream => write!(f, "cannot encode an empty stream"),
            FormatError::Core(e) => write!(f, "invalid content: {e}"),
        }
    }
}

impl std::error::Error for FormatError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FormatError::Io(e) => Some(e),
            FormatError::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        FormatError::Io(e)
    }
}

impl From<eec_core::Error> for FormatError {
    fn from(e: eec_core::Error) -> Self {
        FormatError::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Write `bytes` to `path` atomically: the data lands in a temporary file
/// in the same directory and is renamed over the target, so readers never
/// observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or(FormatError::Header {
        offset: 0,
        detail: "output path has no file name",
    })?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) masks: pixel >= 128 is foreground, written as 0/255.

fn skip_pnm_whitespace(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() {
            *pos += 1;
        } else if b == b'#' {
            while let Some(&b) = bytes.get(*pos) {
                *pos += 1;
                if b == b'\n' {
                    break;
                }
            }
        } else {
            break;
        }
    }
}

fn read_pnm_uint(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<usize> {
    skip_pnm_whitespace(bytes, pos);
    let start = *pos;
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or(FormatError::Header { offset: start, detail: "numeric field overflows" })?;
        *pos += 1;
    }
    if *pos == start {
        return Err(FormatError::Header { offset: start, detail: what });
    }
    Ok(value)
}

/// Parse a binary PGM image into a mask: any pixel value >= 128 is
/// foreground. Only "P5" with maxval 255 is accepted; trailing bytes after
/// the pixel payload are ignored.
pub fn parse_mask_pgm(bytes: &[u8]) -> Result<Mask> {
    if bytes.starts_with(b"P2") {
        return Err(FormatError::BadMagic {
            offset: 0,
            detail: "ASCII PGM (P2) is not supported; use binary P5",
        });
    }
    if !bytes.starts_with(b"P5") {
        return Err(FormatError::BadMagic { offset: 0, detail: "expected binary PGM magic P5" });
    }
    let mut pos = 2;
    let w = read_pnm_uint(bytes, &mut pos, "expected image width")?;
    let h = read_pnm_uint(bytes, &mut pos, "expected image height")?;
    let maxval_at = {
        skip_pnm_whitespace(bytes, &mut pos);
        pos
    };
    let maxval = read_pnm_uint(bytes, &mut pos, "expected maxval")?;
    if maxval != 255 {
        return Err(FormatError::Header { offset: maxval_at, detail: "maxval must be 255" });
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(FormatError::Header {
                offset: pos,
                detail: "expected single whitespace byte before pixel payload",
            })
        }
    }
    let need = w
        .checked_mul(h)
        .ok_or(FormatError::Header { offset: 2, detail: "image dimensions overflow" })?;
    if bytes.len() - pos < need {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            detail: "pixel payload ends early",
        });
    }
    let bits = bytes[pos..pos + need].iter().map(|&p| p >= 128).collect();
    Ok(Mask::new(h, w, bits)?)
}

pub fn encode_mask_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w(), mask.h()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    parse_mask_pgm(&fs::read(path)?)
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    atomic_write(path, &encode_mask_pgm(mask))
}

// ---------------------------------------------------------------------------
// Two-view stream files.
//
// Layout: magic "EECS", version u32, then T, h, w, C (u32 each), then per
// record: ego features (h*w*C little-endian f64), ego mask bitset
// (ceil(h*w/8) bytes, row-major, LSB-first), exo features, exo ground-truth
// mask bitset. Frame numbers are implicit: record i holds frame i+1.

pub const STREAM_MAGIC: [u8; 4] = *b"EECS";
pub const STREAM_VERSION: u32 = 1;

fn push_features(out: &mut Vec<u8>, f: &FeatureMap) {
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_bits(out: &mut Vec<u8>, m: &Mask) {
    let hw = m.h() * m.w();
    let mut bytes = vec![0u8; hw.div_ceil(8)];
    for (idx, &b) in m.bits().iter().enumerate() {
        if b {
            bytes[idx / 8] |= 1 << (idx % 8);
        }
    }
    out.extend_from_slice(&bytes);
}

pub fn encode_stream(records: &[StreamRecord]) -> Result<Vec<u8>> {
    let first = records.first().ok_or(FormatError::EmptyStream)?;
    let (h, w, c) = (first.ego_feature.h(), first.ego_feature.w(), first.ego_feature.c());
    let per_record = 2 * (h * w * c * 8 + (h * w).div_ceil(8));
    let mut out = Vec::with_capacity(24 + records.len() * per_record);
    out.extend_from_slice(&STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| FormatError::Header {
        offset: 8,
        detail: "stream length exceeds u32",
    })?.to_le_bytes());
    for dim in [h, w, c] {
        out.extend_from_slice(
            &u32::try_from(dim)
                .map_err(|_| FormatError::Header { offset: 12, detail: "dimension exceeds u32" })?
                .to_le_bytes(),
        );
    }
    for (index, rec) in records.iter().enumerate() {
        if rec.t != (index + 1) as u32 {
            return Err(FormatError::NonContiguousFrames { index, got: rec.t });
        }
        for f in [&rec.ego_feature, &rec.exo_feature] {
            if (f.h(), f.w()) != (h, w) {
                return Err(eec_core::Error::SpatialMismatch { a: (h, w), b: (f.h(), f.w()) }.into());
            }
            if f.c() != c {
                return Err(eec_core::Error::ChannelMismatch { expected: c, got: f.c() }.into());
            }
        }
        for m in [&rec.ego_mask, &rec.exo_gt] {
            if (m.h(), m.w()) != (h, w) {
                return Err(eec_core::Error::SpatialMismatch { a: (h, w), b: (m.h(), m.w()) }.into());
            }
        }
        push_features(&mut out, &rec.ego_feature);
        push_bits(&mut out, &rec.ego_mask);
        push_features(&mut out, &rec.exo_feature);
        push_bits(&mut out, &rec.exo_gt);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32> {
    let end = *pos + 4;
    if bytes.len() < end {
        return Err(FormatError::Truncated { offset: bytes.len(), detail: what });
    }
    let v = u32::from_le_bytes(bytes[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

fn read_features(
    bytes: &[u8],
    pos: &mut usize,
    index: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<FeatureMap> {
    let n = h * w * c;
    let need = n * 8;
    if bytes.len() - *pos < need {
        return Err(FormatError::TruncatedRecord { index });
    }
    let mut data = Vec::with_capacity(n);
    for k in 0..n {
        let at = *pos + k * 8;
        data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
    }
    *pos += need;
    Ok(FeatureMap::new(h, w, c, data)?)
}

fn read_bits(bytes: &[u8], pos: &mut usize, index: usize, h: usize, w: usize) -> Result<Mask> {
    let hw = h * w;
    let need = hw.div_ceil(8);
    if bytes.len() - *pos < need {
        return Err(FormatError::TruncatedRecord { index });
    }
    let chunk = &bytes[*pos..*pos + need];
    for idx in hw..need * 8 {
        if chunk[idx / 8] >> (idx % 8) & 1 == 1 {
            return Err(FormatError::Header {
                offset: *pos + idx / 8,
                detail: "nonzero padding bits in mask bitset",
            });
        }
    }
    let bits = (0..hw).map(|idx| chunk[idx / 8] >> (idx % 8) & 1 == 1).collect();
    *pos += need;
    Ok(Mask::new(h, w, bits)?)
}

pub fn decode_stream(bytes: &[u8]) -> Result<Vec<StreamRecord>> {
    if bytes.len() < 4 || bytes[..4] != STREAM_MAGIC {
        return Err(FormatError::BadMagic { offset: 0, detail: "expected stream magic EECS" });
    }
    let mut pos = 4;
    let version = read_u32(bytes, &mut pos, "missing version")?;
    if version != STREAM_VERSION {
        return Err(FormatError::UnsupportedVersion { got: version });
    }
    let frames = read_u32(bytes, &mut pos, "missing frame count")? as usize;
    let h = read_u32(bytes, &mut pos, "missing height")? as usize;
    let w = read_u32(bytes, &mut pos, "missing width")? as usize;
    let c = read_u32(bytes, &mut pos, "missing channel count")? as usize;
    h.checked_mul(w)
        .and_then(|p| p.checked_mul(c))
        .and_then(|n| n.checked_mul(8))
        .ok_or(FormatError::Header { offset: 12, detail: "dimensions overflow" })?;
    if frames == 0 {
        return Err(FormatError::EmptyStream);
    }
    // Capacity comes from an untrusted header; truncation checks catch a
    // lying frame count before much is allocated.
    let mut records = Vec::with_capacity(frames.min(1024));
    for index in 0..frames {
        let ego_feature = read_features(bytes, &mut pos, index, h, w, c)?;
        let ego_mask = read_bits(bytes, &mut pos, index, h, w)?;
        let exo_feature = read_features(bytes, &mut pos, index, h, w, c)?;
        let exo_gt = read_bits(bytes, &mut pos, index, h, w)?;
        records.push(StreamRecord {
            t: (index + 1) as u32,
            ego_feature,
            ego_mask,
            exo_feature,
            exo_gt,
        });
    }
    if pos != bytes.len() {
        return Err(FormatError::Header { offset: pos, detail: "trailing bytes after final record" });
    }
    Ok(records)
}

pub fn read_stream(path: &Path) -> Result<Vec<StreamRecord>> {
    decode_stream(&fs::read(path)?)
}

pub fn write_stream(records: &[StreamRecord], path: &Path) -> Result<()> {
    atomic_write(path, &encode_stream(records)?)
}

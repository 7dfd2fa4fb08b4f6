//! Self-describing binary container shared by checkpoint, replay, dataset,
//! and depth-grid files.
//!
//! Layout: 4-byte magic `DLAB`, a format version byte, a file-kind byte,
//! then kind-specific payload. All integers little-endian; floats are raw
//! little-endian IEEE-754 bits, so round trips are bit-exact. Readers track
//! the byte offset and report it on any corruption.

use crate::tensor::Tensor;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DLAB";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Checkpoint = 1,
    Replay = 2,
    Dataset = 3,
    DepthGrid = 4,
}

impl FileKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Checkpoint),
            2 => Some(Self::Replay),
            3 => Some(Self::Dataset),
            4 => Some(Self::DepthGrid),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub enum FormatError {
    /// Malformed content; `offset` is the byte position of the failure.
    Corrupt { offset: usize, detail: String },
    Io(std::io::Error),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Corrupt { offset, detail } => write!(f, "corrupt file at offset {offset}: {detail}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Append-only byte sink for container payloads.
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: FileKind) -> Self {
        let mut buf = Vec::with_capacity(256);
        buf.extend_from_slice(&MAGIC);
        buf.push(FORMAT_VERSION);
        buf.push(kind as u8);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64_slice(&mut self, data: &[f64]) {
        self.u64(data.len() as u64);
        for &v in data {
            self.f64(v);
        }
    }

    pub fn u8_slice(&mut self, data: &[u8]) {
        self.u64(data.len() as u64);
        self.buf.extend_from_slice(data);
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64_slice(t.data());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<(), FormatError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.buf)?;
        Ok(())
    }
}

/// Cursor over container bytes with offset-carrying errors.
pub struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version, and kind before yielding a payload cursor.
    pub fn open(bytes: &'a [u8], expected_kind: FileKind) -> Result<Self, FormatError> {
        let mut r = Self { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.corrupt_at(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(r.corrupt_at(4, format!("unsupported format version {version}")));
        }
        let kind_byte = r.u8()?;
        match FileKind::from_byte(kind_byte) {
            Some(kind) if kind == expected_kind => Ok(r),
            Some(kind) => Err(r.corrupt_at(5, format!("file kind {kind:?}, expected {expected_kind:?}"))),
            None => Err(r.corrupt_at(5, format!("unknown file kind byte {kind_byte}"))),
        }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    fn corrupt(&self, detail: String) -> FormatError {
        self.corrupt_at(self.offset, detail)
    }

    fn corrupt_at(&self, offset: usize, detail: String) -> FormatError {
        FormatError::Corrupt { offset, detail }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.offset + n > self.bytes.len() {
            return Err(self.corrupt(format!(
                "need {n} bytes, only {} remain",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let at = self.offset;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| self.corrupt_at(at, format!("invalid utf-8 string: {e}")))
    }

    pub fn f64_slice(&mut self) -> Result<Vec<f64>, FormatError> {
        let len = self.u64()? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn u8_slice(&mut self) -> Result<Vec<u8>, FormatError> {
        let len = self.u64()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn tensor(&mut self) -> Result<Tensor, FormatError> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.corrupt(format!("implausible tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let at = self.offset;
        let data = self.f64_slice()?;
        Tensor::new(shape, data).map_err(|e| self.corrupt_at(at, format!("bad tensor: {e}")))
    }

    /// Asserts the payload was fully consumed.
    pub fn expect_eof(&self) -> Result<(), FormatError> {
        if self.offset != self.bytes.len() {
            return Err(self.corrupt(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    Ok(fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut w = Writer::new(FileKind::Dataset);
        w.u32(7);
        w.string("indoor_a");
        w.f64(0.1 + 0.2); // deliberately non-representable decimal
        let t = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        w.tensor(&t);
        let bytes = w.into_bytes();

        let mut r = Reader::open(&bytes, FileKind::Dataset).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.string().unwrap(), "indoor_a");
        assert_eq!(r.f64().unwrap().to_bits(), (0.1_f64 + 0.2).to_bits());
        let back = r.tensor().unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        r.expect_eof().unwrap();
    }

    #[test]
    fn wrong_kind_and_magic_are_rejected() {
        let w = Writer::new(FileKind::Replay);
        let bytes = w.into_bytes();
        assert!(Reader::open(&bytes, FileKind::Checkpoint).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match Reader::open(&bad, FileKind::Replay) {
            Err(FormatError::Corrupt { offset: 0, .. }) => {}
            Err(other) => panic!("expected corrupt magic, got {other:?}"),
            Ok(_) => panic!("expected corrupt magic, opened fine"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut w = Writer::new(FileKind::Replay);
        w.u64(123);
        let mut bytes = w.into_bytes();
        bytes.truncate(bytes.len() - 3);
        let mut r = Reader::open(&bytes, FileKind::Replay).unwrap();
        match r.u64() {
            Err(FormatError::Corrupt { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected corrupt, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_an_error() {
        let mut w = Writer::new(FileKind::Replay);
        w.u8(1);
        let mut bytes = w.into_bytes();
        bytes.push(0xFF);
        let mut r = Reader::open(&bytes, FileKind::Replay).unwrap();
        r.u8().unwrap();
        assert!(r.expect_eof().is_err());
    }
}

//! Binary file format for packed sequences.
//!
//! ```text
//! header : "SPKD" | u32 version (1) | u32 patch_size | u32 reserved (0)
//! record : u32 element_count
//!          element_count x (u8 tag | payload)
//!              tag 0 Text    : u32 id
//!              tag 1 Patch   : patch_size^2 * 3 raw bytes
//!              tag 2 Special : u8 kind
//!              tag 3 Pad     : -
//!          element_count x u32 segment id
//!          ceil(element_count / 8) bytes of loss mask, LSB first
//!          u32 CRC32 of everything above in the record
//! ```
//! All integers are little-endian.

use std::io::{self, Read, Write};
use std::sync::Arc;

use thiserror::Error;

use super::PackedSequence;
use crate::encoding::{SpecialToken, TokenElement};

pub const MAGIC: [u8; 4] = *b"SPKD";
pub const VERSION: u32 = 1;

const TAG_TEXT: u8 = 0;
const TAG_PATCH: u8 = 1;
const TAG_SPECIAL: u8 = 2;
const TAG_PAD: u8 = 3;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("stream truncated in record {record}")]
    Truncated { record: usize },
    #[error("checksum mismatch in record {record}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { record: usize, stored: u32, computed: u32 },
    #[error("corrupt record {record}: {reason}")]
    Corrupt { record: usize, reason: String },
    #[error("patch of {actual} bytes does not match patch size {patch_size}")]
    PatchSize { patch_size: u32, actual: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes tagged elements; shared with the example shard format.
pub(crate) fn write_element(out: &mut Vec<u8>, el: &TokenElement, patch_len: usize, patch_size: u32) -> Result<(), FormatError> {
    match el {
        TokenElement::Text(id) => {
            out.push(TAG_TEXT);
            out.extend_from_slice(&id.to_le_bytes());
        }
        TokenElement::Patch(bytes) => {
            if bytes.len() != patch_len {
                return Err(FormatError::PatchSize {
                    patch_size,
                    actual: bytes.len(),
                });
            }
            out.push(TAG_PATCH);
            out.extend_from_slice(bytes);
        }
        TokenElement::Special(kind) => {
            out.push(TAG_SPECIAL);
            out.push(kind.code());
        }
        TokenElement::Pad => out.push(TAG_PAD),
    }
    Ok(())
}

/// Reader that checksums what it reads and reports short reads as truncation.
pub(crate) struct RecordReader<'a, R> {
    inner: &'a mut R,
    hasher: crc32fast::Hasher,
    pub(crate) record: usize,
}

impl<'a, R: Read> RecordReader<'a, R> {
    pub(crate) fn new(inner: &'a mut R, record: usize) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
            record,
        }
    }

    pub(crate) fn bytes(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => FormatError::Truncated { record: self.record },
            _ => FormatError::Io(e),
        })?;
        self.hasher.update(buf);
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        let mut b = [0u8; 1];
        self.bytes(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn corrupt(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Corrupt {
            record: self.record,
            reason: reason.into(),
        }
    }

    pub(crate) fn element(&mut self, patch_len: usize) -> Result<TokenElement, FormatError> {
        Ok(match self.u8()? {
            TAG_TEXT => TokenElement::Text(self.u32()?),
            TAG_PATCH => {
                let mut buf = vec![0u8; patch_len];
                self.bytes(&mut buf)?;
                TokenElement::Patch(Arc::from(buf))
            }
            TAG_SPECIAL => {
                let code = self.u8()?;
                TokenElement::Special(
                    SpecialToken::from_code(code).ok_or_else(|| self.corrupt(format!("special kind {code}")))?,
                )
            }
            TAG_PAD => TokenElement::Pad,
            tag => return Err(self.corrupt(format!("element tag {tag}"))),
        })
    }

    /// Reads the stored CRC (excluded from the hash) and compares.
    pub(crate) fn finish(self) -> Result<(), FormatError> {
        let computed = self.hasher.finalize();
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => FormatError::Truncated { record: self.record },
            _ => FormatError::Io(e),
        })?;
        let stored = u32::from_le_bytes(b);
        if stored != computed {
            return Err(FormatError::Checksum {
                record: self.record,
                stored,
                computed,
            });
        }
        Ok(())
    }
}

/// Checks magic and version; returns the patch size.
pub(crate) fn read_header<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<u32, FormatError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated { record: 0 },
        _ => FormatError::Io(e),
    })?;
    let found: [u8; 4] = head[0..4].try_into().unwrap();
    if found != magic {
        return Err(FormatError::BadMagic { found, expected: magic });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(u32::from_le_bytes(head[8..12].try_into().unwrap()))
}

pub(crate) fn write_header<W: Write>(w: &mut W, magic: [u8; 4], patch_size: u32) -> io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&patch_size.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())
}

/// Reads the first byte of a record, distinguishing clean EOF.
pub(crate) fn at_eof<R: Read>(r: &mut R, first: &mut [u8; 1]) -> Result<bool, FormatError> {
    loop {
        return match r.read(first) {
            Ok(0) => Ok(true),
            Ok(_) => Ok(false),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => Err(e.into()),
        };
    }
}

pub fn patch_len(patch_size: u32) -> usize {
    let p = patch_size as usize;
    p * p * 3
}

/// Encodes one record including its trailing checksum.
pub fn encode_record(seq: &PackedSequence, patch_size: u32) -> Result<Vec<u8>, FormatError> {
    let n = seq.elements.len();
    assert!(
        seq.segment_ids.len() == n && seq.loss_mask.len() == n,
        "packed sequence columns differ in length"
    );
    let plen = patch_len(patch_size);
    let mut out = Vec::with_capacity(4 + n * 9 + n / 8 + 8);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for el in &seq.elements {
        write_element(&mut out, el, plen, patch_size)?;
    }
    for id in &seq.segment_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (t, _) in seq.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
        bits[t / 8] |= 1 << (t % 8);
    }
    out.extend_from_slice(&bits);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub struct PackedWriter<W: Write> {
    inner: W,
    patch_size: u32,
    records: usize,
}

impl<W: Write> PackedWriter<W> {
    pub fn new(mut inner: W, patch_size: u32) -> Result<Self, FormatError> {
        write_header(&mut inner, MAGIC, patch_size)?;
        Ok(Self {
            inner,
            patch_size,
            records: 0,
        })
    }

    pub fn write(&mut self, seq: &PackedSequence) -> Result<(), FormatError> {
        let rec = encode_record(seq, self.patch_size)?;
        self.inner.write_all(&rec)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn finish(mut self) -> Result<W, FormatError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Iterates records; stops after the first error.
pub struct PackedReader<R: Read> {
    inner: R,
    patch_size: u32,
    record: usize,
    failed: bool,
}

impl<R: Read> PackedReader<R> {
    pub fn new(mut inner: R) -> Result<Self, FormatError> {
        let patch_size = read_header(&mut inner, MAGIC)?;
        Ok(Self {
            inner,
            patch_size,
            record: 0,
            failed: false,
        })
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    fn read_record(&mut self) -> Result<Option<PackedSequence>, FormatError> {
        let mut first = [0u8; 1];
        if at_eof(&mut self.inner, &mut first)? {
            return Ok(None);
        }
        let record = self.record;
        let plen = patch_len(self.patch_size);
        let mut chained = io::Cursor::new(first).chain(&mut self.inner);
        let mut r = RecordReader::new(&mut chained, record);
        let n = r.u32()? as usize;
        let mut elements = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            elements.push(r.element(plen)?);
        }
        let mut segment_ids = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            segment_ids.push(r.u32()?);
        }
        let mut bits = vec![0u8; n.div_ceil(8)];
        r.bytes(&mut bits)?;
        r.finish()?;
        let loss_mask = (0..n).map(|t| bits[t / 8] >> (t % 8) & 1 == 1).collect();
        self.record += 1;
        Ok(Some(PackedSequence {
            elements,
            segment_ids,
            loss_mask,
        }))
    }
}

impl<R: Read> Iterator for PackedReader<R> {
    type Item = Result<PackedSequence, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(seq)) => Some(Ok(seq)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

pub fn serialize(seqs: &[PackedSequence], patch_size: u32) -> Result<Vec<u8>, FormatError> {
    let mut w = PackedWriter::new(Vec::new(), patch_size)?;
    for s in seqs {
        w.write(s)?;
    }
    w.finish()
}

/// Returns the header patch size and all records.
pub fn deserialize(bytes: &[u8]) -> Result<(u32, Vec<PackedSequence>), FormatError> {
    let reader = PackedReader::new(bytes)?;
    let patch_size = reader.patch_size();
    let seqs = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((patch_size, seqs))
}

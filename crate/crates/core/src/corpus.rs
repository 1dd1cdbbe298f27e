//! Corpus manifests, example construction and example shard files.
//!
//! A manifest is line-delimited JSON, one record per line:
//!
//! ```json
//! {"dataset": "cc3m", "image_path": "img/0001.jpg", "text": "a dog on a beach", "kind": "pretrain-captioned"}
//! ```
//!
//! `image_path` is optional and resolved relative to the manifest. Supervised
//! records may carry a `response`; the image and `text` then form the prompt.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{layout_vision_span, EncodingError, TokenElement};
use crate::packing::format::{at_eof, patch_len, read_header, write_element, write_header, FormatError, RecordReader};
use crate::packing::{Example, ExampleKind};
use crate::preprocess::{patchify, ImageDims, PreprocessConfig, PreprocessError, RawImage};
use crate::tokenizer::Tokenizer;

pub const EXAMPLE_MAGIC: [u8; 4] = *b"SEXM";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Manifest { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub text: String,
    pub kind: ExampleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

impl ManifestRecord {
    /// Image path resolved against the manifest's directory.
    pub fn resolve_image(&self, manifest_dir: &Path) -> Option<PathBuf> {
        self.image_path.as_ref().map(|p| manifest_dir.join(p))
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Manifest {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Manifest {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| CorpusError::Record {
            path: path.to_owned(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads image dimensions from the file header without decoding pixels.
pub fn probe_dims(path: &Path) -> Result<ImageDims, CorpusError> {
    let (w, h) = image::image_dimensions(path).map_err(|e| CorpusError::Image {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    Ok(ImageDims::new(w, h)?)
}

/// Decodes to 8-bit RGB, compositing any alpha channel over black.
pub fn decode_image(path: &Path) -> Result<RawImage, CorpusError> {
    let img = image::open(path).map_err(|e| CorpusError::Image {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let dims = ImageDims::new(img.width(), img.height())?;
    let raw = if img.color().has_alpha() {
        RawImage::from_rgba8(dims, img.to_rgba8().as_raw())?
    } else {
        RawImage::new(dims, img.to_rgb8().into_raw())?
    };
    Ok(raw)
}

/// Lays out `[vision span] text [response]` for one record.
pub fn build_example(
    record: &ManifestRecord,
    image: Option<&RawImage>,
    cfg: &PreprocessConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<Example, CorpusError> {
    let mut elements = Vec::new();
    if let Some(img) = image {
        let grid = patchify(img, cfg)?;
        elements.extend(layout_vision_span(&grid)?);
    }
    elements.extend(tokenizer.encode(&record.text).into_iter().map(TokenElement::Text));
    let mut prompt_len = 0;
    if let Some(response) = &record.response {
        prompt_len = elements.len();
        elements.extend(tokenizer.encode(response).into_iter().map(TokenElement::Text));
    }
    Ok(Example {
        elements,
        source_dataset: record.dataset.clone(),
        kind: record.kind,
        prompt_len,
        train_on_prompt: false,
    })
}

/// Writer for `.sexm` example shards.
///
/// Same header layout as packed files with magic `SEXM`. Each record is
/// `u32 name_len | name | u8 kind | u32 prompt_len | u8 train_on_prompt |
/// u32 element_count | elements | u32 CRC32`.
pub struct ExampleWriter<W: Write> {
    inner: W,
    patch_size: u32,
    records: usize,
}

impl<W: Write> ExampleWriter<W> {
    pub fn new(mut inner: W, patch_size: u32) -> Result<Self, FormatError> {
        write_header(&mut inner, EXAMPLE_MAGIC, patch_size)?;
        Ok(Self {
            inner,
            patch_size,
            records: 0,
        })
    }

    pub fn write(&mut self, ex: &Example) -> Result<(), FormatError> {
        let mut out = Vec::new();
        let name = ex.source_dataset.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(ex.kind.code());
        out.extend_from_slice(&(ex.prompt_len as u32).to_le_bytes());
        out.push(ex.train_on_prompt as u8);
        out.extend_from_slice(&(ex.elements.len() as u32).to_le_bytes());
        let plen = patch_len(self.patch_size);
        for el in &ex.elements {
            write_element(&mut out, el, plen, self.patch_size)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        self.inner.write_all(&out)?;
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

pub struct ExampleReader<R: Read> {
    inner: R,
    patch_size: u32,
    record: usize,
    failed: bool,
}

impl<R: Read> ExampleReader<R> {
    pub fn new(mut inner: R) -> Result<Self, FormatError> {
        let patch_size = read_header(&mut inner, EXAMPLE_MAGIC)?;
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

    fn read_record(&mut self) -> Result<Option<Example>, FormatError> {
        let mut first = [0u8; 1];
        if at_eof(&mut self.inner, &mut first)? {
            return Ok(None);
        }
        let plen = patch_len(self.patch_size);
        let mut chained = io::Cursor::new(first).chain(&mut self.inner);
        let mut r = RecordReader::new(&mut chained, self.record);
        let name_len = r.u32()? as usize;
        if name_len > 1 << 16 {
            return Err(r.corrupt(format!("dataset name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.bytes(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| r.corrupt("dataset name is not UTF-8"))?;
        let code = r.u8()?;
        let kind = ExampleKind::from_code(code).ok_or_else(|| r.corrupt(format!("example kind {code}")))?;
        let prompt_len = r.u32()? as usize;
        let train_on_prompt = r.u8()? != 0;
        let n = r.u32()? as usize;
        let mut elements = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            elements.push(r.element(plen)?);
        }
        r.finish()?;
        self.record += 1;
        Ok(Some(Example {
            elements,
            source_dataset: name,
            kind,
            prompt_len,
            train_on_prompt,
        }))
    }
}

impl<R: Read> Iterator for ExampleReader<R> {
    type Item = Result<Example, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(ex)) => Some(Ok(ex)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Loads a whole `.sexm` shard, returning its patch size and examples.
pub fn read_examples(path: &Path) -> Result<(u32, Vec<Example>), FormatError> {
    let reader = ExampleReader::new(BufReader::new(File::open(path)?))?;
    let patch_size = reader.patch_size();
    let examples = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((patch_size, examples))
}

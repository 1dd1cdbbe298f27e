//! Fixed-length sequence packing with per-example attention isolation.
//!
//! Examples are appended in arrival order to a single open sequence. When the
//! next example does not fit, the open sequence is padded to `max_len` and
//! emitted. Pretraining streams may split an example at a text boundary to
//! fill the remaining space; vision spans are never split. Supervised streams
//! never split.
//!
//! Each example occupies one contiguous segment. Attention is causal and
//! confined to the segment, and loss is taken only on next-token targets that
//! are text in the same segment.

pub mod format;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{SpecialToken, TokenElement};

/// Default packed length.
pub const DEFAULT_MAX_LEN: usize = 32_768;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackingError {
    #[error("malformed vision span at element {index}: {reason}")]
    MalformedSpan { index: usize, reason: &'static str },
    #[error("example from {dataset} cannot be packed: {reason}")]
    Unpackable { dataset: String, reason: String },
    #[error("invalid packed sequence: {0}")]
    InvalidSequence(String),
    #[error("max_len must be positive")]
    ZeroLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleKind {
    PretrainText,
    PretrainCaptioned,
    Supervised,
}

impl ExampleKind {
    pub fn code(self) -> u8 {
        match self {
            Self::PretrainText => 0,
            Self::PretrainCaptioned => 1,
            Self::Supervised => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::PretrainText),
            1 => Some(Self::PretrainCaptioned),
            2 => Some(Self::Supervised),
            _ => None,
        }
    }
}

/// A training example before packing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub elements: Vec<TokenElement>,
    pub source_dataset: String,
    pub kind: ExampleKind,
    /// Elements before this index are the prompt of a supervised example.
    pub prompt_len: usize,
    /// Keep loss on prompt text in supervised packing.
    pub train_on_prompt: bool,
}

impl Example {
    pub fn new(elements: Vec<TokenElement>, source_dataset: impl Into<String>, kind: ExampleKind) -> Self {
        Self {
            elements,
            source_dataset: source_dataset.into(),
            kind,
            prompt_len: 0,
            train_on_prompt: false,
        }
    }

    pub fn with_prompt_len(mut self, prompt_len: usize) -> Self {
        self.prompt_len = prompt_len;
        self
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn validate(&self) -> Result<(), PackingError> {
        if let Some(index) = self.elements.iter().position(TokenElement::is_pad) {
            return Err(PackingError::MalformedSpan {
                index,
                reason: "padding inside an example",
            });
        }
        vision_spans(&self.elements).map(|_| ())
    }

    /// Whether element `t` may serve as a loss target under `mode`.
    fn target_eligible(&self, t: usize, mode: PackMode) -> bool {
        match mode {
            PackMode::Pretrain => true,
            PackMode::Supervised => self.train_on_prompt || t >= self.prompt_len,
        }
    }
}

/// Locates `<vision> ... </vision>` ranges and checks that patches and row
/// separators appear only inside them.
pub fn vision_spans(elements: &[TokenElement]) -> Result<Vec<Range<usize>>, PackingError> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (index, el) in elements.iter().enumerate() {
        let fail = |reason| Err(PackingError::MalformedSpan { index, reason });
        match (el, open) {
            (TokenElement::Special(SpecialToken::VisionBegin), None) => open = Some(index),
            (TokenElement::Special(SpecialToken::VisionBegin), Some(_)) => return fail("nested <vision>"),
            (TokenElement::Special(SpecialToken::VisionEnd), Some(start)) => {
                if index == start + 1 {
                    return fail("empty vision span");
                }
                spans.push(start..index + 1);
                open = None;
            }
            (TokenElement::Special(SpecialToken::VisionEnd), None) => return fail("unmatched </vision>"),
            (TokenElement::Special(SpecialToken::VrowSep), None) => return fail("row separator outside span"),
            (TokenElement::Patch(_), None) => return fail("patch outside span"),
            (TokenElement::Text(_), Some(_)) => return fail("text inside span"),
            _ => {}
        }
    }
    if let Some(start) = open {
        return Err(PackingError::MalformedSpan {
            index: start,
            reason: "unterminated <vision>",
        });
    }
    Ok(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PackMode {
    Pretrain,
    Supervised,
}

/// One fixed-length training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub elements: Vec<TokenElement>,
    pub segment_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// A contiguous run of one packed example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: u32,
    pub range: Range<usize>,
}

impl PackedSequence {
    /// Single-segment sequence with the structural loss mask.
    pub fn from_elements(elements: Vec<TokenElement>) -> Self {
        let segment_ids = vec![0; elements.len()];
        let loss_mask = build_loss_mask(&elements, &segment_ids, None);
        Self {
            elements,
            segment_ids,
            loss_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn pad_count(&self) -> usize {
        self.elements.iter().filter(|e| e.is_pad()).count()
    }

    /// Non-pad segments in order.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for (t, (el, &id)) in self.elements.iter().zip(&self.segment_ids).enumerate() {
            if el.is_pad() {
                continue;
            }
            match out.last_mut() {
                Some(seg) if seg.id == id && seg.range.end == t => seg.range.end = t + 1,
                _ => out.push(Segment { id, range: t..t + 1 }),
            }
        }
        out
    }

    /// Position of each element relative to the start of its segment; pads get 0.
    pub fn segment_positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for seg in self.segments() {
            for (i, t) in seg.range.enumerate() {
                out[t] = i;
            }
        }
        out
    }

    /// Loss mask implied by element kinds and segments alone.
    pub fn structural_loss_mask(&self) -> Vec<bool> {
        build_loss_mask(&self.elements, &self.segment_ids, None)
    }

    pub fn attention(&self) -> AttentionMask {
        build_attention_predicate(self)
    }

    pub fn validate(&self) -> Result<(), PackingError> {
        let n = self.elements.len();
        let bad = |msg: String| Err(PackingError::InvalidSequence(msg));
        if self.segment_ids.len() != n || self.loss_mask.len() != n {
            return bad(format!(
                "length mismatch: {} elements, {} segment ids, {} mask bits",
                n,
                self.segment_ids.len(),
                self.loss_mask.len()
            ));
        }
        if let Some(t) = self.segment_ids.windows(2).position(|w| w[1] < w[0]) {
            return bad(format!("segment ids decrease at position {}", t + 1));
        }
        let first_pad = self.elements.iter().position(TokenElement::is_pad).unwrap_or(n);
        if self.elements[first_pad..].iter().any(|e| !e.is_pad()) {
            return bad("padding is not confined to the tail".into());
        }
        if first_pad < n {
            let expected = if first_pad == 0 {
                0
            } else {
                self.segment_ids[first_pad - 1] + 1
            };
            if self.segment_ids[first_pad..].iter().any(|&s| s != expected) {
                return bad(format!("padding must use reserved segment id {expected}"));
            }
        }
        for seg in self.segments() {
            if let Err(e) = vision_spans(&self.elements[seg.range.clone()]) {
                return bad(format!("segment {}: {e}", seg.id));
            }
        }
        let structural = self.structural_loss_mask();
        if let Some(t) = (0..n).find(|&t| self.loss_mask[t] && !structural[t]) {
            return bad(format!("loss mask set at {t} without a text target in the same segment"));
        }
        Ok(())
    }
}

/// Next-token loss mask.
///
/// Position `t` is active iff `t` is not padding, `elements[t + 1]` is text in
/// the same segment, and (when `target_eligible` is given) that target is
/// eligible, e.g. lies in a supervised response.
pub fn build_loss_mask(
    elements: &[TokenElement],
    segment_ids: &[u32],
    target_eligible: Option<&[bool]>,
) -> Vec<bool> {
    let n = elements.len();
    (0..n)
        .map(|t| {
            t + 1 < n
                && !elements[t].is_pad()
                && elements[t + 1].is_text()
                && segment_ids[t + 1] == segment_ids[t]
                && target_eligible.is_none_or(|e| e[t + 1])
        })
        .collect()
}

/// Causal, segment-local attention predicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    /// `None` marks padding.
    segments: Vec<Option<u32>>,
    /// First position of the segment each element belongs to.
    segment_start: Vec<usize>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        k <= q && self.segments[q].is_some() && self.segments[q] == self.segments[k]
    }

    /// Keys visible from `q`, always a contiguous range ending at `q`.
    pub fn key_range(&self, q: usize) -> Range<usize> {
        match self.segments[q] {
            Some(_) => self.segment_start[q]..q + 1,
            None => q..q,
        }
    }

    pub fn allowed_pairs(&self) -> usize {
        (0..self.len()).map(|q| self.key_range(q).len()).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.len())
            .map(|q| (0..self.len()).map(|k| self.allowed(q, k)).collect())
            .collect()
    }
}

pub fn build_attention_predicate(seq: &PackedSequence) -> AttentionMask {
    let n = seq.len();
    let mut segments = Vec::with_capacity(n);
    let mut segment_start = Vec::with_capacity(n);
    let mut start = 0;
    for t in 0..n {
        if seq.elements[t].is_pad() {
            segments.push(None);
            segment_start.push(t);
            continue;
        }
        let id = seq.segment_ids[t];
        if t == 0 || seq.elements[t - 1].is_pad() || seq.segment_ids[t - 1] != id {
            start = t;
        }
        segments.push(Some(id));
        segment_start.push(start);
    }
    AttentionMask {
        segments,
        segment_start,
    }
}

#[derive(Debug, Default)]
struct OpenSequence {
    elements: Vec<TokenElement>,
    segment_ids: Vec<u32>,
    eligible: Vec<bool>,
    next_segment: u32,
}

impl OpenSequence {
    fn len(&self) -> usize {
        self.elements.len()
    }

    fn append(&mut self, elements: &[TokenElement], eligible: impl Iterator<Item = bool>) {
        let id = self.next_segment;
        self.next_segment += 1;
        self.elements.extend_from_slice(elements);
        self.segment_ids.extend(std::iter::repeat_n(id, elements.len()));
        self.eligible.extend(eligible.take(elements.len()));
    }

    fn close(&mut self, max_len: usize) -> PackedSequence {
        let mut open = std::mem::take(self);
        let pad_id = open.next_segment;
        let pad = max_len - open.len();
        open.elements.extend(std::iter::repeat_n(TokenElement::Pad, pad));
        open.segment_ids.extend(std::iter::repeat_n(pad_id, pad));
        open.eligible.extend(std::iter::repeat_n(false, pad));
        let loss_mask = build_loss_mask(&open.elements, &open.segment_ids, Some(&open.eligible));
        PackedSequence {
            elements: open.elements,
            segment_ids: open.segment_ids,
            loss_mask,
        }
    }
}

/// Streaming next-fit packer with a single open sequence.
#[derive(Debug)]
pub struct Packer {
    max_len: usize,
    mode: PackMode,
    open: OpenSequence,
}

impl Packer {
    pub fn new(max_len: usize, mode: PackMode) -> Result<Self, PackingError> {
        if max_len == 0 {
            return Err(PackingError::ZeroLength);
        }
        Ok(Self {
            max_len,
            mode,
            open: OpenSequence::default(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Adds an example; returns every sequence that was closed as a result.
    pub fn push(&mut self, example: &Example) -> Result<Vec<PackedSequence>, PackingError> {
        example.validate()?;
        let unpackable = |reason: String| PackingError::Unpackable {
            dataset: example.source_dataset.clone(),
            reason,
        };
        let spans = vision_spans(&example.elements)?;
        if let Some(span) = spans.iter().find(|s| s.len() > self.max_len) {
            return Err(unpackable(format!(
                "vision span of {} elements exceeds sequence length {}",
                span.len(),
                self.max_len
            )));
        }
        if self.mode == PackMode::Supervised && example.len() > self.max_len {
            return Err(unpackable(format!(
                "{} elements exceed sequence length {}",
                example.len(),
                self.max_len
            )));
        }

        let eligible: Vec<bool> = (0..example.len())
            .map(|t| example.target_eligible(t, self.mode))
            .collect();
        let mut closed = Vec::new();
        let mut offset = 0;
        while offset < example.len() {
            let rest = example.len() - offset;
            let room = self.max_len - self.open.len();
            if rest <= room {
                self.open
                    .append(&example.elements[offset..], eligible[offset..].iter().copied());
                break;
            }
            let cut = match self.mode {
                PackMode::Supervised => 0,
                PackMode::Pretrain => split_point(&spans, offset, room),
            };
            if cut > 0 {
                self.open.append(
                    &example.elements[offset..offset + cut],
                    eligible[offset..].iter().copied(),
                );
                offset += cut;
            }
            closed.push(self.open.close(self.max_len));
        }
        Ok(closed)
    }

    /// Pads and returns the open sequence, if it holds anything.
    pub fn finish(&mut self) -> Option<PackedSequence> {
        (self.open.len() > 0).then(|| self.open.close(self.max_len))
    }
}

/// Longest prefix length `<= room` of the example tail starting at `offset`
/// that ends outside every vision span.
fn split_point(spans: &[Range<usize>], offset: usize, room: usize) -> usize {
    let mut cut = room;
    while cut > 0 {
        let boundary = offset + cut;
        match spans.iter().find(|s| s.start < boundary && boundary < s.end) {
            Some(span) => cut = span.start.saturating_sub(offset),
            None => return cut,
        }
    }
    0
}

/// Packs a whole stream eagerly.
pub fn pack_examples<'a, I>(examples: I, max_len: usize, mode: PackMode) -> Result<Vec<PackedSequence>, PackingError>
where
    I: IntoIterator<Item = &'a Example>,
{
    let mut packer = Packer::new(max_len, mode)?;
    let mut out = Vec::new();
    for ex in examples {
        out.extend(packer.push(ex)?);
    }
    out.extend(packer.finish());
    Ok(out)
}

/// Lazy packing over an example iterator.
pub struct PackStream<I> {
    inner: I,
    packer: Packer,
    ready: std::collections::VecDeque<PackedSequence>,
    done: bool,
}

impl<I: Iterator<Item = Example>> PackStream<I> {
    pub fn new(inner: I, max_len: usize, mode: PackMode) -> Result<Self, PackingError> {
        Ok(Self {
            inner,
            packer: Packer::new(max_len, mode)?,
            ready: Default::default(),
            done: false,
        })
    }
}

impl<I: Iterator<Item = Example>> Iterator for PackStream<I> {
    type Item = Result<PackedSequence, PackingError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(seq) = self.ready.pop_front() {
                return Some(Ok(seq));
            }
            if self.done {
                return None;
            }
            match self.inner.next() {
                Some(ex) => match self.packer.push(&ex) {
                    Ok(closed) => self.ready.extend(closed),
                    Err(e) => {
                        self.done = true;
                        return Some(Err(e));
                    }
                },
                None => {
                    self.done = true;
                    self.ready.extend(self.packer.finish());
                }
            }
        }
    }
}

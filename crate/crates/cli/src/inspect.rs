use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use solo_core::encoding::{SpecialToken, TokenElement};
use solo_core::packing::format::PackedReader;
use solo_core::packing::{vision_spans, PackedSequence};

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Packed `.spkd` file.
    pub file: PathBuf,
    /// Show at most this many sequences.
    #[arg(long)]
    pub limit: Option<usize>,
    /// One JSON object per sequence.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanReport {
    pub start: usize,
    pub end: usize,
    pub rows: usize,
    pub cols: usize,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub id: u32,
    pub start: usize,
    pub end: usize,
    pub text: usize,
    pub active: usize,
    pub spans: Vec<SpanReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceReport {
    pub index: usize,
    pub len: usize,
    pub pad: usize,
    pub active: usize,
    /// Active positions over non-pad positions.
    pub mask_density: f64,
    pub segments: Vec<SegmentReport>,
}

pub fn describe(index: usize, seq: &PackedSequence) -> SequenceReport {
    let segments: Vec<SegmentReport> = seq
        .segments()
        .into_iter()
        .map(|seg| {
            let els = &seq.elements[seg.range.clone()];
            let spans = vision_spans(els)
                .unwrap_or_default()
                .into_iter()
                .map(|r| {
                    let inner = &els[r.clone()];
                    let rows = 1 + inner
                        .iter()
                        .filter(|e| **e == TokenElement::Special(SpecialToken::VrowSep))
                        .count();
                    let patches = inner.iter().filter(|e| matches!(e, TokenElement::Patch(_))).count();
                    SpanReport {
                        start: seg.range.start + r.start,
                        end: seg.range.start + r.end,
                        rows,
                        cols: patches / rows,
                        patches,
                    }
                })
                .collect();
            SegmentReport {
                id: seg.id,
                start: seg.range.start,
                end: seg.range.end,
                text: els.iter().filter(|e| e.is_text()).count(),
                active: seq.loss_mask[seg.range].iter().filter(|&&m| m).count(),
                spans,
            }
        })
        .collect();
    let pad = seq.pad_count();
    let active = seq.loss_mask.iter().filter(|&&m| m).count();
    let real = seq.len() - pad;
    SequenceReport {
        index,
        len: seq.len(),
        pad,
        active,
        mask_density: if real == 0 { 0.0 } else { active as f64 / real as f64 },
        segments,
    }
}

fn render(r: &SequenceReport, out: &mut dyn Write) -> std::io::Result<()> {
    let real = r.len - r.pad;
    writeln!(
        out,
        "sequence {}: {} elements, {} segments, {} pad, loss mask {}/{} ({:.1}%)",
        r.index,
        r.len,
        r.segments.len(),
        r.pad,
        r.active,
        real,
        100.0 * r.mask_density
    )?;
    for s in &r.segments {
        writeln!(
            out,
            "  segment {} [{}, {}): {} elements, {} text, {} active, {} span{}",
            s.id,
            s.start,
            s.end,
            s.end - s.start,
            s.text,
            s.active,
            s.spans.len(),
            if s.spans.len() == 1 { "" } else { "s" }
        )?;
        for v in &s.spans {
            writeln!(
                out,
                "    span [{}, {}): {} elements, {} rows x {} cols, {} patches",
                v.start,
                v.end,
                v.end - v.start,
                v.rows,
                v.cols,
                v.patches
            )?;
        }
    }
    Ok(())
}

pub fn run(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let file = File::open(&args.file).with_context(|| format!("opening {}", args.file.display()))?;
    let reader = PackedReader::new(BufReader::new(file)).with_context(|| format!("reading {}", args.file.display()))?;
    if !args.json {
        writeln!(out, "{}: patch size {}", args.file.display(), reader.patch_size())?;
    }
    for (i, record) in reader.enumerate().take(args.limit.unwrap_or(usize::MAX)) {
        let seq = record.with_context(|| format!("reading {}", args.file.display()))?;
        let report = describe(i, &seq);
        if args.json {
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        } else {
            render(&report, out)?;
        }
    }
    Ok(())
}

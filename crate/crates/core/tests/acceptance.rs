//! Acceptance suite: one line per criterion, nonzero exit on any failure.

use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use solo_core::corpus::ManifestRecord;
use solo_core::encoding::{layout_vision_span, SpecialToken, TokenElement};
use solo_core::mixture::{account_records, account_tokens, DatasetEntry, DatasetTokens, MixtureError, Modality};
use solo_core::model::{
    batch_gradients, forward, grad_check, lr_at_step, masked_loss_grad, train, ModelConfig, ModelParams, TrainConfig,
};
use solo_core::packing::format::{deserialize, encode_record, serialize, FormatError};
use solo_core::packing::{
    build_attention_predicate, build_loss_mask, pack_examples, vision_spans, Example, ExampleKind, PackMode,
    PackedSequence,
};
use solo_core::preprocess::{
    extract_patches, patchify, resize_output_dims, ImageDims, PatchGrid, PreprocessConfig, RawImage,
};
use solo_core::tokenizer::{ByteTokenizer, Tokenizer};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- generators

fn random_grid(rng: &mut ChaCha8Rng, patch_size: u32, max_rows: usize, max_cols: usize) -> PatchGrid {
    let rows = rng.gen_range(1..=max_rows);
    let cols = rng.gen_range(1..=max_cols);
    let plen = (patch_size * patch_size * 3) as usize;
    let patches = (0..rows * cols)
        .map(|_| (0..plen).map(|_| rng.gen()).collect())
        .collect();
    PatchGrid::new(patch_size, rows, cols, patches).unwrap()
}

/// Text runs and vision spans in random order, roughly `target` elements.
fn random_elements(rng: &mut ChaCha8Rng, target: usize, patch_size: u32, vocab: u32) -> Vec<TokenElement> {
    let mut out = Vec::new();
    while out.len() < target {
        if rng.gen_bool(0.3) {
            let grid = random_grid(rng, patch_size, 6, 8);
            out.extend(layout_vision_span(&grid).unwrap());
        } else {
            let n = rng.gen_range(1..=40);
            out.extend((0..n).map(|_| TokenElement::Text(rng.gen_range(0..vocab))));
        }
    }
    out
}

fn random_example(rng: &mut ChaCha8Rng, max_len: usize, patch_size: u32, vocab: u32) -> Example {
    let target = rng.gen_range(1..=max_len);
    let elements = random_elements(rng, target, patch_size, vocab);
    let kind = if elements.iter().any(|e| matches!(e, TokenElement::Patch(_))) {
        ExampleKind::PretrainCaptioned
    } else {
        ExampleKind::PretrainText
    };
    Example::new(elements, "random", kind)
}

fn random_supervised(rng: &mut ChaCha8Rng, max_len: usize, patch_size: u32, vocab: u32) -> Example {
    let mut ex = random_example(rng, max_len, patch_size, vocab);
    while ex.len() > max_len {
        ex = random_example(rng, max_len, patch_size, vocab);
    }
    ex.kind = ExampleKind::Supervised;
    ex.prompt_len = rng.gen_range(0..=ex.len());
    ex.train_on_prompt = rng.gen_bool(0.2);
    ex
}

fn is_pad(e: &TokenElement) -> bool {
    matches!(e, TokenElement::Pad)
}

fn is_text(e: &TokenElement) -> bool {
    matches!(e, TokenElement::Text(_))
}

/// Maximal runs of equal segment id over non-pad positions.
fn segment_runs(seq: &PackedSequence) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut t = 0;
    while t < seq.elements.len() {
        if is_pad(&seq.elements[t]) {
            t += 1;
            continue;
        }
        let start = t;
        while t < seq.elements.len() && !is_pad(&seq.elements[t]) && seq.segment_ids[t] == seq.segment_ids[start] {
            t += 1;
        }
        runs.push(start..t);
    }
    runs
}

// ---------------------------------------------------------------- 1, 2: resize

/// Line-for-line port of the published Python routine, floats and `int()`
/// truncation included.
fn published_resize(l1: u32, l2: u32) -> (u32, u32) {
    const PATCH_SIZE: f64 = 32.0;
    const MAX_RESOLUTION: f64 = 1024.0;
    let (l1, l2) = (l1 as f64, l2 as f64);
    let (short, long) = if l2 <= l1 { (l2, l1) } else { (l1, l2) };
    let requested_new_long = ((long / PATCH_SIZE + 1.0).trunc() * PATCH_SIZE).min(MAX_RESOLUTION);
    let new_long = requested_new_long;
    let new_short = (new_long * short / long).trunc();
    let new_short = (new_short / PATCH_SIZE + 1.0).trunc() * PATCH_SIZE;
    if l2 <= l1 {
        (new_long as u32, new_short as u32)
    } else {
        (new_short as u32, new_long as u32)
    }
}

fn resize(l1: u32, l2: u32) -> (u32, u32) {
    let out = resize_output_dims(ImageDims::new(l1, l2).unwrap(), &PreprocessConfig::default()).unwrap();
    (out.width, out.height)
}

fn c1_resize_fidelity() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0u64;
    let mut first = None;
    for l1 in 1..=2048 {
        for l2 in 1..=2048 {
            if resize(l1, l2) != published_resize(l1, l2) {
                mismatches += 1;
                first.get_or_insert((l1, l2));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(mismatches == 0, "{mismatches} mismatches, first at {first:?}");
    ensure!(secs < 10.0, "grid took {secs:.2}s");
    Ok(format!("2048x2048 grid, 0 mismatches, {secs:.2}s"))
}

fn c2_resize_invariants() -> Outcome {
    let mut worst = (0, 0);
    for l1 in 1..=2048u32 {
        for l2 in 1..=2048u32 {
            let (w, h) = resize(l1, l2);
            let (new_long, new_short) = if l2 <= l1 { (w, h) } else { (h, w) };
            ensure!(w % 32 == 0 && h % 32 == 0, "({l1},{l2}) -> ({w},{h}) not aligned");
            ensure!(new_long <= 1024, "({l1},{l2}) long side {new_long}");
            ensure!(new_short <= 1056, "({l1},{l2}) short side {new_short}");
            worst = (worst.0.max(new_long), worst.1.max(new_short));
        }
    }
    for (input, expect) in [((32, 32), (64, 96)), ((2000, 2000), (1024, 1056))] {
        let got = resize(input.0, input.1);
        ensure!(got == expect, "{input:?} -> {got:?}, expected {expect:?}");
    }
    Ok(format!(
        "max long {} max short {}, (32,32)->(64,96) and (2000,2000)->(1024,1056)",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- 3, 4: layout

fn c3_layout_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let p = rng.gen_range(1..=4);
        let grid = random_grid(&mut rng, p, 40, 40);
        let (rows, cols) = (grid.rows(), grid.cols());
        let span = layout_vision_span(&grid).map_err(|e| e.to_string())?;
        ensure!(span.len() == rows * cols + rows + 1, "grid {i}: {rows}x{cols} span {}", span.len());
        let count = |k: SpecialToken| span.iter().filter(|e| **e == TokenElement::Special(k)).count();
        ensure!(count(SpecialToken::VrowSep) == rows - 1, "grid {i}: separators");
        ensure!(count(SpecialToken::VisionBegin) == 1 && count(SpecialToken::VisionEnd) == 1, "grid {i}: begin/end");
        ensure!(
            span[0] == TokenElement::Special(SpecialToken::VisionBegin)
                && span[span.len() - 1] == TokenElement::Special(SpecialToken::VisionEnd),
            "grid {i}: span not delimited"
        );
        // Row r occupies 1 + r*(cols+1) .. +cols, followed by a separator.
        for r in 0..rows {
            let base = 1 + r * (cols + 1);
            for c in 0..cols {
                ensure!(
                    span[base + c] == TokenElement::Patch(Arc::from(grid.patch(r, c))),
                    "grid {i}: patch ({r},{c}) misplaced"
                );
            }
            if r + 1 < rows {
                ensure!(span[base + cols] == TokenElement::Special(SpecialToken::VrowSep), "grid {i}: row {r} separator");
            }
        }
    }
    Ok("1000 grids".into())
}

fn c4_vision_token_count() -> Outcome {
    let cfg = PreprocessConfig::default();
    let img = RawImage::solid(ImageDims::new(672, 512).unwrap(), [10, 20, 30]).unwrap();
    let grid = extract_patches(&img, &cfg).map_err(|e| e.to_string())?;
    ensure!(grid.len() == 336, "672x512 gave {} patches", grid.len());
    ensure!((grid.cols(), grid.rows()) == (21, 16), "grid {}x{}", grid.cols(), grid.rows());
    let raw = RawImage::solid(ImageDims::new(640, 480).unwrap(), [1, 2, 3]).unwrap();
    let grid = patchify(&raw, &cfg).map_err(|e| e.to_string())?;
    ensure!(grid.len() == 336, "640x480 via resize gave {}", grid.len());
    let span = layout_vision_span(&grid).unwrap();
    ensure!(span.len() == 353, "span {}", span.len());
    Ok("672x512 -> 21x16 = 336 patches, span 353".into())
}

// ---------------------------------------------------------------- 5, 6: packing

fn c5_packing_conservation() -> Outcome {
    const S_MAX: usize = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sequences = 0usize;
    let mut pairs = 0u64;
    for stream in 0..1000 {
        let mode = if stream % 2 == 0 { PackMode::Pretrain } else { PackMode::Supervised };
        let n = rng.gen_range(1..=10);
        let examples: Vec<Example> = (0..n)
            .map(|_| match mode {
                PackMode::Pretrain => random_example(&mut rng, 900, 1, 1000),
                PackMode::Supervised => random_supervised(&mut rng, S_MAX, 1, 1000),
            })
            .collect();
        let packed = pack_examples(&examples, S_MAX, mode).map_err(|e| format!("stream {stream}: {e}"))?;
        sequences += packed.len();

        let input: Vec<&TokenElement> = examples.iter().flat_map(|e| &e.elements).collect();
        let mut output = Vec::new();
        for (si, seq) in packed.iter().enumerate() {
            let l = seq.elements.len();
            ensure!(l == S_MAX && seq.segment_ids.len() == l && seq.loss_mask.len() == l, "stream {stream} seq {si}: length");
            let first_pad = seq.elements.iter().position(is_pad).unwrap_or(l);
            ensure!(seq.elements[first_pad..].iter().all(is_pad), "stream {stream} seq {si}: pad not at tail");
            output.extend(&seq.elements[..first_pad]);

            // Segment ids must form contiguous runs.
            let runs = segment_runs(seq);
            let mut ids: Vec<u32> = runs.iter().map(|r| seq.segment_ids[r.start]).collect();
            ids.dedup();
            ensure!(ids.len() == runs.len(), "stream {stream} seq {si}: segment id reused");
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            ensure!(sorted.len() == ids.len(), "stream {stream} seq {si}: segment not contiguous");

            let mask = build_attention_predicate(seq);
            for q in 0..l {
                for k in 0..l {
                    let expect = k <= q
                        && !is_pad(&seq.elements[q])
                        && !is_pad(&seq.elements[k])
                        && seq.segment_ids[q] == seq.segment_ids[k];
                    ensure!(mask.allowed(q, k) == expect, "stream {stream} seq {si}: mask ({q},{k})");
                }
            }
            pairs += (l * l) as u64;

            for r in &runs {
                vision_spans(&seq.elements[r.clone()])
                    .map_err(|e| format!("stream {stream} seq {si} segment {r:?}: {e}"))?;
            }
        }
        ensure!(output == input, "stream {stream}: elements not conserved in order");
        let count = |v: &[&TokenElement], f: fn(&TokenElement) -> bool| v.iter().filter(|e| f(e)).count();
        ensure!(
            count(&output, is_text) == count(&input, is_text) && output.len() == input.len(),
            "stream {stream}: multiset differs"
        );
    }
    Ok(format!("1000 streams, {sequences} sequences, {pairs} mask pairs"))
}

fn c6_loss_mask_rule() -> Outcome {
    let worked = PackedSequence::from_elements(vec![
        TokenElement::Special(SpecialToken::VisionBegin),
        TokenElement::Patch(Arc::from(vec![0u8; 3])),
        TokenElement::Special(SpecialToken::VisionEnd),
        TokenElement::Text(65),
        TokenElement::Text(100),
    ]);
    ensure!(
        worked.loss_mask == [false, false, true, true, false],
        "worked example gave {:?}",
        worked.loss_mask
    );

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Arbitrary element soups with arbitrary segment runs and eligibility.
    for case in 0..2000 {
        let n = rng.gen_range(1..=64);
        let elements: Vec<TokenElement> = (0..n)
            .map(|_| match rng.gen_range(0..4) {
                0 | 1 => TokenElement::Text(rng.gen_range(0..50)),
                2 => TokenElement::Patch(Arc::from(vec![rng.gen::<u8>(); 3])),
                _ => TokenElement::Special(SpecialToken::from_code(rng.gen_range(0..3)).unwrap()),
            })
            .collect();
        let mut elements = elements;
        elements.extend(std::iter::repeat_n(TokenElement::Pad, rng.gen_range(0..4)));
        let mut segment_ids = Vec::with_capacity(elements.len());
        let mut id = 0u32;
        for _ in 0..elements.len() {
            if rng.gen_bool(0.15) {
                id += 1;
            }
            segment_ids.push(id);
        }
        let eligible: Vec<bool> = (0..elements.len()).map(|_| rng.gen_bool(0.7)).collect();
        let supervised = rng.gen_bool(0.5);
        let got = build_loss_mask(&elements, &segment_ids, supervised.then_some(&eligible[..]));
        for t in 0..elements.len() {
            let expect = t + 1 < elements.len()
                && !is_pad(&elements[t])
                && is_text(&elements[t + 1])
                && segment_ids[t + 1] == segment_ids[t]
                && (!supervised || eligible[t + 1]);
            ensure!(got[t] == expect, "soup {case} position {t}");
        }
    }

    // Packed supervised streams, checked in example coordinates.
    let mut active = 0usize;
    for stream in 0..300 {
        let examples: Vec<Example> = (0..rng.gen_range(1..=8))
            .map(|_| random_supervised(&mut rng, 200, 1, 300))
            .collect();
        let packed = pack_examples(&examples, 256, PackMode::Supervised).map_err(|e| e.to_string())?;
        let mut ex_iter = examples.iter();
        for seq in &packed {
            for (t, &m) in seq.loss_mask.iter().enumerate() {
                if is_pad(&seq.elements[t]) {
                    ensure!(!m, "stream {stream}: pad position active");
                }
            }
            for run in segment_runs(seq) {
                let ex = ex_iter.next().ok_or("more segments than examples")?;
                ensure!(run.len() == ex.len(), "stream {stream}: supervised example was split");
                for o in 0..ex.len() {
                    let expect = o + 1 < ex.len()
                        && is_text(&ex.elements[o + 1])
                        && (ex.train_on_prompt || o + 1 >= ex.prompt_len);
                    ensure!(
                        seq.loss_mask[run.start + o] == expect,
                        "stream {stream}: offset {o} of example (prompt_len {}, train_on_prompt {})",
                        ex.prompt_len,
                        ex.train_on_prompt
                    );
                    active += expect as usize;
                }
            }
        }
        ensure!(ex_iter.next().is_none(), "stream {stream}: example missing from output");
    }
    Ok(format!("worked example [F, F, T, T, F]; 2000 soups; 300 supervised streams ({active} active)"))
}

// ---------------------------------------------------------------- 7, 8: model

fn toy_config(max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 32,
        text_vocab_size: 64,
        patch_size: 2,
        max_seq_len,
        tie_embeddings: false,
    }
}

fn small_examples(rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..rng.gen_range(2..=5))
        .map(|_| {
            let target = rng.gen_range(3..=30);
            let mut elements = Vec::new();
            while elements.len() < target {
                if rng.gen_bool(0.3) {
                    elements.extend(layout_vision_span(&random_grid(rng, 2, 3, 3)).unwrap());
                } else {
                    elements.extend((0..rng.gen_range(1..=8)).map(|_| TokenElement::Text(rng.gen_range(0..64))));
                }
            }
            Example::new(elements, "toy", ExampleKind::PretrainCaptioned)
        })
        .collect()
}

fn c7_packing_transparency() -> Outcome {
    const S_MAX: usize = 96;
    let cfg = toy_config(S_MAX);
    let params = ModelParams::init(&cfg, 7, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for set in 0..100 {
        let examples = small_examples(&mut rng);
        let packed = pack_examples(&examples, S_MAX, PackMode::Supervised).map_err(|e| e.to_string())?;
        let mut ex_iter = examples.iter();
        for seq in &packed {
            let logits = forward(seq, &params, &cfg).map_err(|e| e.to_string())?;
            for run in segment_runs(seq) {
                let ex = ex_iter.next().ok_or("segment without example")?;
                let alone = forward(&PackedSequence::from_elements(ex.elements.clone()), &params, &cfg)
                    .map_err(|e| e.to_string())?;
                for (o, t) in run.enumerate() {
                    for (a, b) in logits.row(t).iter().zip(alone.row(o)) {
                        worst = worst.max((a - b).abs());
                    }
                    rows += 1;
                }
            }
        }
        ensure!(worst < 1e-5, "set {set}: max logit difference {worst:e}");
    }
    Ok(format!("100 sets, {rows} positions, max |diff| {worst:.1e}"))
}

fn c8_segment_isolation() -> Outcome {
    const S_MAX: usize = 96;
    let cfg = toy_config(S_MAX);
    let params = ModelParams::init(&cfg, 8, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut perturbations = 0usize;
    let mut checked_rows = 0usize;
    for set in 0..60 {
        let examples = small_examples(&mut rng);
        let packed = pack_examples(&examples, S_MAX, PackMode::Pretrain).map_err(|e| e.to_string())?;
        for seq in packed.iter().filter(|s| segment_runs(s).len() >= 2) {
            let base = forward(seq, &params, &cfg).map_err(|e| e.to_string())?;
            for target in segment_runs(seq) {
                let candidates: Vec<usize> = target
                    .clone()
                    .filter(|&t| matches!(seq.elements[t], TokenElement::Text(_) | TokenElement::Patch(_)))
                    .collect();
                let t = candidates[rng.gen_range(0..candidates.len())];
                let mut perturbed = seq.clone();
                perturbed.elements[t] = match &seq.elements[t] {
                    TokenElement::Text(id) => TokenElement::Text((id + 1 + rng.gen_range(0..62)) % 64),
                    TokenElement::Patch(p) => TokenElement::Patch(p.iter().map(|b| b.wrapping_add(97)).collect()),
                    _ => unreachable!(),
                };
                let out = forward(&perturbed, &params, &cfg).map_err(|e| e.to_string())?;
                perturbations += 1;
                let mut changed_inside = false;
                for r in 0..seq.len() {
                    let same = base.row(r).iter().zip(out.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                    if target.contains(&r) {
                        changed_inside |= !same;
                    } else {
                        ensure!(same, "set {set}: perturbing {t} in {target:?} changed row {r}");
                        checked_rows += 1;
                    }
                }
                ensure!(changed_inside, "set {set}: perturbation at {t} had no effect at all");
            }
        }
    }
    ensure!(perturbations > 0, "no multi-segment sequences generated");
    Ok(format!("{perturbations} perturbations, {checked_rows} foreign rows bit-identical"))
}

// ---------------------------------------------------------------- 9: gradients

fn c9_gradient_fidelity() -> Outcome {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        text_vocab_size: 24,
        patch_size: 2,
        max_seq_len: 32,
        tie_embeddings: false,
    };
    let params = ModelParams::init(&cfg, 9, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut first = layout_vision_span(&random_grid(&mut rng, 2, 2, 2)).unwrap();
    first.extend([3, 7, 11, 2, 19].map(TokenElement::Text));
    let second: Vec<TokenElement> = [5, 1, 23, 8, 8, 0].map(TokenElement::Text).to_vec();
    let examples = [
        Example::new(first, "toy", ExampleKind::PretrainCaptioned),
        Example::new(second, "toy", ExampleKind::PretrainText),
    ];
    let seq = pack_examples(&examples, 28, PackMode::Pretrain).map_err(|e| e.to_string())?.remove(0);

    let report = grad_check(&params, &cfg, &seq, 1e-6, 10, 99).map_err(|e| e.to_string())?;
    let tensor_count = params.tensors().len();
    ensure!(report.checks.len() >= 200, "only {} coordinates", report.checks.len());
    ensure!(report.tensors_covered().len() == tensor_count, "not every tensor sampled");
    ensure!(
        report
            .checks
            .iter()
            .any(|c| c.tensor == "projector.matrix" && c.analytic != 0.0),
        "no nonzero projector gradient sampled"
    );
    if report.max_rel_error >= 1e-4 {
        let worst = report
            .checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .unwrap();
        return Err(format!("max relative error {:.2e} at {worst:?}", report.max_rel_error));
    }

    // Rows of dL/dlogits whose target is not text are exactly zero.
    let logits = forward(&seq, &params, &cfg).map_err(|e| e.to_string())?;
    let dlogits = masked_loss_grad(&logits, &seq, 1.0);
    for t in 0..seq.len() {
        let non_text_target = t + 1 >= seq.len() || !is_text(&seq.elements[t + 1]);
        if non_text_target {
            ensure!(dlogits.row(t).iter().all(|&g| g == 0.0), "gradient at position {t} with non-text target");
        }
    }

    let mut silent = seq.clone();
    silent.loss_mask.iter_mut().for_each(|m| *m = false);
    let (_, grads) = batch_gradients(&params, &cfg, &[&silent]).map_err(|e| e.to_string())?;
    ensure!(
        grads.tensors().iter().all(|t| t.data.iter().all(|&g| g == 0.0)),
        "nonzero gradient with empty loss mask"
    );
    Ok(format!(
        "{} coordinates over {tensor_count} tensors, max rel error {:.2e}; empty mask gives zero gradient",
        report.checks.len(),
        report.max_rel_error
    ))
}

// ---------------------------------------------------------------- 10: schedule

fn c10_lr_endpoints() -> Outcome {
    let cfg = TrainConfig::default();
    let at = |s| lr_at_step(s, &cfg).map_err(|e| e.to_string());
    let (start, peak, end) = (at(0)?, at(200)?, at(cfg.total_steps)?);
    ensure!(start == 0.0, "lr(0) = {start:e}");
    ensure!(peak == 5e-5, "lr(200) = {peak:e}");
    ensure!(end == 5e-6, "lr({}) = {end:e}", cfg.total_steps);
    ensure!(lr_at_step(cfg.total_steps + 1, &cfg).is_err(), "step past the end accepted");
    Ok(format!("lr(0)=0, lr(200)=5e-5, lr({})=5e-6", cfg.total_steps))
}

// ---------------------------------------------------------------- 11: accounting

fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
    image::RgbImage::new(w, h).save(dir.join(name)).unwrap();
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) {
    let mut f = fs::File::create(path).unwrap();
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
}

fn record(dataset: &str, image: Option<&str>, text: &str, response: Option<&str>) -> ManifestRecord {
    ManifestRecord {
        dataset: dataset.into(),
        image_path: image.map(Into::into),
        text: text.into(),
        kind: if response.is_some() {
            ExampleKind::Supervised
        } else if image.is_some() {
            ExampleKind::PretrainCaptioned
        } else {
            ExampleKind::PretrainText
        },
        response: response.map(Into::into),
    }
}

fn counts(t: &DatasetTokens) -> [u64; 5] {
    [t.records, t.images, t.text_tokens, t.vision_tokens, t.special_tokens]
}

fn c11_token_accounting() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    // (w, h) -> resized (w', h') -> cols x rows, specials rows + 1:
    // 640x480 -> 672x512 -> 21x16 = 336, 17
    // 32x32 -> 64x96 -> 2x3 = 6, 4
    // 1x1 -> 32x64 -> 1x2 = 2, 3
    // 100x300 -> 128x320 -> 4x10 = 40, 11
    // 2000x1000 -> 1024x544 -> 32x17 = 544, 18
    for (name, w, h) in [
        ("a.png", 640, 480),
        ("b.png", 32, 32),
        ("c.png", 1, 1),
        ("d.png", 100, 300),
        ("e.png", 2000, 1000),
    ] {
        write_png(d, name, w, h);
    }
    let set_a = vec![
        record("a", Some("a.png"), "a cat", None),
        record("a", Some("b.png"), "xy", None),
        record("a", None, "hello world", None),
    ];
    let set_b = vec![
        record("b", Some("c.png"), "z", None),
        record("b", Some("d.png"), "tall", Some("yes")),
        record("b", Some("e.png"), "", None),
    ];
    write_manifest(&d.join("a.jsonl"), &set_a);
    write_manifest(&d.join("b.jsonl"), &set_b);
    write_manifest(&d.join("both.jsonl"), &[set_a.clone(), set_b.clone()].concat());

    let cfg = PreprocessConfig::default();
    let tok = ByteTokenizer;
    let entries = vec![
        DatasetEntry::new("a", d.join("a.jsonl"), Modality::ImageText, 1.0),
        DatasetEntry::new("b", d.join("b.jsonl"), Modality::ImageText, 1.0),
    ];
    let account = account_tokens(&entries, &cfg, &tok).map_err(|e| e.to_string())?;
    let hand_a = [3, 2, 5 + 2 + 11, 336 + 6, 17 + 4];
    let hand_b = [3, 3, 1 + 4 + 3, 2 + 40 + 544, 3 + 11 + 18];
    ensure!(counts(&account.datasets[0]) == hand_a, "dataset a {:?} vs hand {hand_a:?}", counts(&account.datasets[0]));
    ensure!(counts(&account.datasets[1]) == hand_b, "dataset b {:?} vs hand {hand_b:?}", counts(&account.datasets[1]));

    let total = counts(&account.total());
    let union = DatasetEntry::new("both", d.join("both.jsonl"), Modality::ImageText, 1.0);
    let joint = account_tokens(&[union], &cfg, &tok).map_err(|e| e.to_string())?;
    ensure!(counts(&joint.total()) == total, "union {:?} vs sum {total:?}", counts(&joint.total()));
    let (text_pct, vision_pct) = account.percentages();
    let expect_text = 100.0 * 26.0 / (26.0 + 928.0);
    ensure!((text_pct - expect_text).abs() < 1e-12 && (text_pct + vision_pct - 100.0).abs() < 1e-9, "percentages");

    // Splitting one corpus at every cut point keeps the totals.
    let all = [set_a, set_b].concat();
    let whole = counts(&account_records("x", &all, d, &cfg, &tok).map_err(|e| e.to_string())?);
    for cut in 0..=all.len() {
        let left = account_records("l", &all[..cut], d, &cfg, &tok).map_err(|e| e.to_string())?;
        let right = account_records("r", &all[cut..], d, &cfg, &tok).map_err(|e| e.to_string())?;
        ensure!(counts(&(left + &right)) == whole, "split at {cut} not additive");
    }

    let missing = DatasetEntry::new("ghost", d.join("missing.jsonl"), Modality::TextOnly, 1.0);
    match account_tokens(&[missing], &cfg, &tok) {
        Err(MixtureError::Ingestion { dataset, .. }) if dataset == "ghost" => {}
        other => return Err(format!("missing manifest gave {other:?}")),
    }
    Ok(format!("hand counts a={hand_a:?} b={hand_b:?}; union and splits additive"))
}

// ---------------------------------------------------------------- 12: learning

const COLORS: [(&str, [u8; 3]); 5] = [
    ("red", [220, 30, 30]),
    ("green", [30, 200, 40]),
    ("blue", [20, 40, 230]),
    ("yellow", [230, 220, 20]),
    ("white", [245, 245, 245]),
];

fn smoke_corpus(cfg: &PreprocessConfig) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tok = ByteTokenizer;
    (0..50)
        .map(|i| {
            let (label, rgb) = COLORS[i % COLORS.len()];
            let dims = ImageDims::new(rng.gen_range(8..=24), rng.gen_range(8..=24)).unwrap();
            let pixels = (0..dims.pixel_count())
                .flat_map(|_| rgb.map(|c| c.saturating_add(rng.gen_range(0..16))))
                .collect();
            let img = RawImage::new(dims, pixels).unwrap();
            let mut elements = layout_vision_span(&patchify(&img, cfg).unwrap()).unwrap();
            elements.extend(tok.encode(&format!("a {label} square")).into_iter().map(TokenElement::Text));
            Example::new(elements, "synthetic-labels", ExampleKind::PretrainCaptioned)
        })
        .collect()
}

fn c12_learning_smoke() -> Outcome {
    let start = Instant::now();
    let pre = PreprocessConfig::new(8, 64).map_err(|e| e.to_string())?;
    let examples = smoke_corpus(&pre);
    let seqs = pack_examples(&examples, 128, PackMode::Pretrain).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 64,
        text_vocab_size: 256,
        patch_size: 8,
        max_seq_len: 128,
        tie_embeddings: false,
    };
    let train_cfg = TrainConfig {
        peak_lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 20,
        total_steps: 200,
        batch_size: 4,
        ..Default::default()
    };
    let run = train(&seqs, &model, &train_cfg, 12, None).map_err(|e| e.to_string())?;
    let again = train(&seqs, &model, &train_cfg, 12, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let first = run.log[0].loss;
    let last = run.log[199].loss;
    let drop = 1.0 - last / first;
    ensure!(drop >= 0.30, "loss {first:.4} -> {last:.4} ({:.1}% decrease)", 100.0 * drop);
    let bits = |log: &[solo_core::model::LossRecord]| -> Vec<[u64; 2]> {
        log.iter().map(|r| [r.loss.to_bits(), r.lr.to_bits()]).collect()
    };
    ensure!(bits(&run.log) == bits(&again.log), "rerun loss log differs");
    ensure!(run.params == again.params, "rerun weights differ");
    for r in &run.log {
        ensure!(r.lr == lr_at_step(r.step, &train_cfg).unwrap(), "lr log at step {}", r.step);
    }
    ensure!(secs < 300.0, "two runs took {secs:.1}s");
    Ok(format!(
        "{} sequences, loss {first:.4} -> {last:.4} ({:.1}% decrease), rerun bit-identical, {secs:.1}s",
        seqs.len(),
        100.0 * drop
    ))
}

// ---------------------------------------------------------------- 13: format

fn c13_serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut seqs: Vec<(u32, PackedSequence)> = Vec::new();
    while seqs.len() < 1000 {
        let p = [1u32, 2, 4][rng.gen_range(0..3)];
        let examples: Vec<Example> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let target = rng.gen_range(1..=150);
                Example::new(random_elements(&mut rng, target, p, 5000), "rt", ExampleKind::PretrainCaptioned)
            })
            .collect();
        let max_len = rng.gen_range(64..=256);
        for s in pack_examples(&examples, max_len, PackMode::Pretrain).map_err(|e| e.to_string())? {
            seqs.push((p, s));
        }
    }
    seqs.truncate(1000);

    for (i, (p, seq)) in seqs.iter().enumerate() {
        let bytes = serialize(std::slice::from_ref(seq), *p).map_err(|e| e.to_string())?;
        let (patch_size, back) = deserialize(&bytes).map_err(|e| format!("sequence {i}: {e}"))?;
        ensure!(patch_size == *p && back.len() == 1 && back[0] == *seq, "sequence {i} did not round-trip");
        ensure!(serialize(&back, *p).unwrap() == bytes, "sequence {i} re-encodes differently");
    }

    // Multi-record files with the same patch size.
    let group: Vec<PackedSequence> = seqs.iter().filter(|(p, _)| *p == 2).map(|(_, s)| s.clone()).take(40).collect();
    let bytes = serialize(&group, 2).map_err(|e| e.to_string())?;
    ensure!(deserialize(&bytes).map_err(|e| e.to_string())?.1 == group, "multi-record file");

    let mut offsets = vec![16usize];
    for s in &group {
        let len = encode_record(s, 2).map_err(|e| e.to_string())?.len();
        offsets.push(offsets.last().unwrap() + len);
    }
    ensure!(*offsets.last().unwrap() == bytes.len(), "record offsets");

    let mut truncations = 0;
    for _ in 0..200 {
        let cut = rng.gen_range(16..bytes.len());
        if offsets.contains(&cut) {
            continue;
        }
        let record = offsets.iter().rposition(|&o| o < cut).unwrap();
        match deserialize(&bytes[..cut]) {
            Err(FormatError::Truncated { record: r }) if r == record => truncations += 1,
            other => return Err(format!("cut at {cut}: {:?}", other.map(|(_, v)| v.len()))),
        }
    }
    ensure!(
        matches!(deserialize(&bytes[..10]), Err(FormatError::Truncated { .. })),
        "truncated header not reported"
    );

    let mut corruptions = 0;
    for (k, s) in group.iter().enumerate() {
        // Stored checksum flipped.
        let mut bad = bytes.clone();
        bad[offsets[k + 1] - 1] ^= 0x5a;
        match deserialize(&bad) {
            Err(FormatError::Checksum { record, .. }) if record == k => corruptions += 1,
            other => return Err(format!("crc flip in record {k}: {:?}", other.map(|(_, v)| v.len()))),
        }
        // Payload byte flipped: the first element's value, or a segment id.
        let mut bad = bytes.clone();
        let at = match s.elements[0] {
            TokenElement::Text(_) | TokenElement::Patch(_) => offsets[k] + 5,
            _ => offsets[k] + 4 + encoded_elements_len(s, 2),
        };
        bad[at] ^= 0x01;
        match deserialize(&bad) {
            Err(FormatError::Checksum { record, .. }) if record == k => corruptions += 1,
            other => return Err(format!("payload flip in record {k}: {:?}", other.map(|(_, v)| v.len()))),
        }
    }
    Ok(format!("1000 round-trips, {truncations} truncations, {corruptions} corruptions detected"))
}

fn encoded_elements_len(seq: &PackedSequence, patch_size: usize) -> usize {
    seq.elements
        .iter()
        .map(|e| match e {
            TokenElement::Text(_) => 5,
            TokenElement::Patch(_) => 1 + patch_size * patch_size * 3,
            TokenElement::Special(_) => 2,
            TokenElement::Pad => 1,
        })
        .sum()
}

// ---------------------------------------------------------------- runner

fn main() {
    let criteria: [Criterion; 13] = [
        ("resize fidelity", c1_resize_fidelity),
        ("resize invariants", c2_resize_invariants),
        ("layout law", c3_layout_law),
        ("vision-token count", c4_vision_token_count),
        ("packing conservation and mask soundness", c5_packing_conservation),
        ("loss-mask rule", c6_loss_mask_rule),
        ("packing transparency", c7_packing_transparency),
        ("segment isolation", c8_segment_isolation),
        ("gradient fidelity", c9_gradient_fidelity),
        ("lr schedule endpoints", c10_lr_endpoints),
        ("token accounting", c11_token_accounting),
        ("learning smoke run", c12_learning_smoke),
        ("serialization", c13_serialization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{:>2}. {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {label} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label} ({secs:.2}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

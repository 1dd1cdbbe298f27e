use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use solo_core::corpus::{build_example, decode_image, read_manifest, ExampleWriter, ManifestRecord};
use solo_core::packing::Example;
use solo_core::preprocess::PreprocessConfig;
use solo_core::tokenizer::Tokenizer;

use crate::{load_tokenizer, write_atomic, PreprocessFlags};

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL manifest; image paths are relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `<dataset>.sexm` shards and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
    /// Vocabulary file, one piece per line; bytes otherwise.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Exit with an error when more records than this are skipped.
    #[arg(long)]
    pub max_failures: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    /// Index among the manifest's non-blank lines.
    pub record: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub examples: usize,
    pub elements: usize,
    pub failures: usize,
    pub shard: Option<String>,
    pub errors: Vec<RecordFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub examples: usize,
    pub failures: usize,
    pub patch_size: u32,
    pub datasets: BTreeMap<String, DatasetSummary>,
}

/// Shard file name for a dataset: anything outside `[A-Za-z0-9._-]` becomes `_`.
pub fn shard_name(dataset: &str) -> String {
    let stem: String = dataset
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{stem}.sexm")
}

fn process(record: &ManifestRecord, base: &Path, cfg: &PreprocessConfig, tok: &dyn Tokenizer) -> Result<Example> {
    let image = match record.resolve_image(base) {
        Some(path) => Some(decode_image(&path)?),
        None => None,
    };
    Ok(build_example(record, image.as_ref(), cfg, tok)?)
}

pub fn run(args: &IngestArgs) -> Result<IngestSummary> {
    let cfg = args.preprocess.config()?;
    let tok = load_tokenizer(args.vocab.as_deref())?;
    let records = read_manifest(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new(""));
    log::info!("ingesting {} records from {}", records.len(), args.manifest.display());

    let results: Vec<Result<Example>> = records
        .par_iter()
        .map(|r| process(r, base, &cfg, tok.as_ref()))
        .collect();

    let mut summary = IngestSummary {
        patch_size: cfg.patch_size(),
        ..Default::default()
    };
    let mut grouped: BTreeMap<&str, Vec<Example>> = BTreeMap::new();
    for (i, (record, result)) in records.iter().zip(results).enumerate() {
        let ds = summary.datasets.entry(record.dataset.clone()).or_default();
        ds.records += 1;
        summary.records += 1;
        match result {
            Ok(ex) => {
                ds.examples += 1;
                ds.elements += ex.len();
                summary.examples += 1;
                grouped.entry(&record.dataset).or_default().push(ex);
            }
            Err(e) => {
                log::warn!("skipping record {i} ({}): {e:#}", record.dataset);
                ds.failures += 1;
                summary.failures += 1;
                ds.errors.push(RecordFailure {
                    record: i,
                    error: format!("{e:#}"),
                });
            }
        }
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (dataset, examples) in &grouped {
        let name = shard_name(dataset);
        let path = args.out.join(&name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = ExampleWriter::new(BufWriter::new(file), cfg.patch_size())?;
        for ex in examples {
            w.write(ex).with_context(|| format!("writing {}", path.display()))?;
        }
        w.finish()?;
        summary.datasets.get_mut(*dataset).expect("dataset counted").shard = Some(name);
    }
    let json = serde_json::to_vec_pretty(&summary)?;
    write_atomic(&args.out.join("summary.json"), &json)?;
    log::info!(
        "{} examples in {} shards, {} failures",
        summary.examples,
        grouped.len(),
        summary.failures
    );
    if let Some(max) = args.max_failures {
        if summary.failures > max {
            bail!("{} records failed, more than --max-failures {max}", summary.failures);
        }
    }
    Ok(summary)
}

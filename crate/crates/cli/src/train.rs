use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use solo_core::model::{train_batches, Batch, ModelConfig, TrainConfig, TrainOutcome};
use solo_core::packing::format::PackedReader;

use crate::load_tokenizer;

/// Batches buffered between the loader thread and the optimizer.
const QUEUE_DEPTH: usize = 4;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A `.spkd` file, or a directory whose `.spkd` files are read in name order.
    #[arg(long)]
    pub packed: PathBuf,
    /// Directory for `loss.jsonl` and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Model configuration as JSON; patch size and sequence length are taken
    /// from the packed data.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Vocabulary used at ingest; sets the text vocabulary size.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1525)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub peak_lr: f64,
    #[arg(long, default_value_t = 5e-6)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 200)]
    pub warmup_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn packed_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_owned()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "spkd"));
    files.sort();
    if files.is_empty() {
        bail!("no .spkd files in {}", path.display());
    }
    Ok(files)
}

fn open(path: &Path) -> Result<PackedReader<BufReader<File>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    PackedReader::new(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Patch size and sequence length of the first record.
fn probe(files: &[PathBuf]) -> Result<(u32, usize)> {
    let mut reader = open(&files[0])?;
    let patch_size = reader.patch_size();
    let first = reader
        .next()
        .ok_or_else(|| anyhow!("{} holds no sequences", files[0].display()))?
        .with_context(|| format!("reading {}", files[0].display()))?;
    Ok((patch_size, first.len()))
}

/// Streams batches over the files, cycling, until `steps` have been sent or
/// the receiver hangs up.
fn load(files: &[PathBuf], patch_size: u32, batch_size: usize, steps: usize, tx: SyncSender<Batch>) -> Result<()> {
    let mut sent = 0;
    let mut batch = Batch {
        sequences: Vec::with_capacity(batch_size),
        provenance: Vec::with_capacity(batch_size),
    };
    while sent < steps {
        let mut index = 0;
        for path in files {
            let reader = open(path)?;
            if reader.patch_size() != patch_size {
                bail!("{} has patch size {}, expected {patch_size}", path.display(), reader.patch_size());
            }
            for record in reader {
                let seq = record.with_context(|| format!("reading {}", path.display()))?;
                batch.sequences.push(seq);
                batch.provenance.push(index);
                index += 1;
                if batch.sequences.len() == batch_size {
                    let full = std::mem::replace(
                        &mut batch,
                        Batch {
                            sequences: Vec::with_capacity(batch_size),
                            provenance: Vec::with_capacity(batch_size),
                        },
                    );
                    if tx.send(full).is_err() {
                        return Ok(());
                    }
                    sent += 1;
                    if sent == steps {
                        return Ok(());
                    }
                }
            }
        }
        if index == 0 {
            bail!("packed input holds no sequences");
        }
    }
    Ok(())
}

pub fn run(args: &TrainArgs) -> Result<TrainOutcome> {
    let files = packed_files(&args.packed)?;
    let (patch_size, seq_len) = probe(&files)?;
    let mut model = match &args.model_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ModelConfig {
            text_vocab_size: load_tokenizer(args.vocab.as_deref())?.vocab_size(),
            ..ModelConfig::default()
        },
    };
    model.patch_size = patch_size;
    model.max_seq_len = seq_len;
    let train_cfg = TrainConfig {
        peak_lr: args.peak_lr,
        min_lr: args.min_lr,
        warmup_steps: args.warmup_steps,
        total_steps: args.steps,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        checkpoint_every: args.checkpoint_every,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let (tx, rx) = sync_channel(QUEUE_DEPTH);
    let loader = {
        let files = files.clone();
        let (b, steps) = (args.batch_size, args.steps);
        thread::spawn(move || load(&files, patch_size, b, steps, tx))
    };
    let outcome = train_batches(rx, &model, &train_cfg, args.seed, Some(&args.out));
    loader.join().map_err(|_| anyhow!("loader thread panicked"))??;
    let outcome = outcome?;
    if let Some(last) = outcome.log.last() {
        log::info!("step {} loss {:.5}; wrote {}", last.step, last.loss, args.out.join("model.sckp").display());
    }
    Ok(outcome)
}

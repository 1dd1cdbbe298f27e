//! `solo` command-line front end.

use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use solo_core::preprocess::PreprocessConfig;
use solo_core::tokenizer::{ByteTokenizer, Tokenizer, VocabTokenizer};

pub mod account;
pub mod ingest;
pub mod inspect;
pub mod pack;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "solo", version, about = "Image-and-text corpus pipeline and desk-scale trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode, resize and patchify a JSONL manifest into example shards.
    Ingest(ingest::IngestArgs),
    /// Count text, vision and special tokens for a mixture.
    Account(account::AccountArgs),
    /// Draw examples from shards by mixture weight and pack them.
    Pack(pack::PackArgs),
    /// Train the reference model on packed sequences.
    Train(train::TrainArgs),
    /// Print the layout of a packed file.
    Inspect(inspect::InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessFlags {
    /// Patch side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub patch_size: u32,
    /// Cap on the long side after resizing.
    #[arg(long, default_value_t = 1024)]
    pub max_resolution: u32,
}

impl PreprocessFlags {
    pub fn config(&self) -> Result<PreprocessConfig> {
        PreprocessConfig::new(self.patch_size, self.max_resolution).context("invalid preprocessing flags")
    }
}

/// Byte tokenizer unless a vocabulary file is given.
pub fn load_tokenizer(vocab: Option<&Path>) -> Result<Box<dyn Tokenizer>> {
    Ok(match vocab {
        Some(path) => Box::new(
            VocabTokenizer::from_file(path).with_context(|| format!("reading vocabulary {}", path.display()))?,
        ),
        None => Box::new(ByteTokenizer),
    })
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => ingest::run(&args).map(|_| ()),
        Command::Account(args) => account::run(&args),
        Command::Pack(args) => pack::run(&args).map(|_| ()),
        Command::Train(args) => train::run(&args).map(|_| ()),
        Command::Inspect(args) => inspect::run(&args, &mut std::io::stdout().lock()),
    }
}

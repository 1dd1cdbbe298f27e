use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use solo_core::corpus::read_examples;
use solo_core::encoding::TokenElement;
use solo_core::mixture::{plan_schedule, DatasetEntry, MixtureSpec, Modality};
use solo_core::packing::format::PackedWriter;
use solo_core::packing::{Example, PackMode, Packer, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Long documents may be split at text boundaries.
    Pretrain,
    /// Examples are never split; prompts are excluded from the loss.
    Supervised,
}

impl From<ModeArg> for PackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pretrain => PackMode::Pretrain,
            ModeArg::Supervised => PackMode::Supervised,
        }
    }
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// Directories of `.sexm` shards written by `ingest`.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Mixture spec; entries select shards by dataset name. Without it every
    /// shard is weighted by its example count.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Stage recorded in the implicit spec when `--spec` is absent.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Output `.spkd` file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub seq_len: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Pretrain)]
    pub mode: ModeArg,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the spec's text blend multiplier.
    #[arg(long)]
    pub text_blend_multiplier: Option<f64>,
    /// Number of examples to draw; defaults to the number available.
    #[arg(long)]
    pub examples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackSummary {
    pub examples: usize,
    pub sequences: usize,
    pub pad: usize,
}

struct Shards {
    patch_size: Option<u32>,
    by_name: BTreeMap<String, Vec<Example>>,
}

fn load_shards(dirs: &[PathBuf]) -> Result<Shards> {
    let mut shards = Shards {
        patch_size: None,
        by_name: BTreeMap::new(),
    };
    for dir in dirs {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading corpus directory {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|x| x == "sexm"));
        paths.sort();
        for path in paths {
            let (p, examples) = read_examples(&path).with_context(|| format!("reading {}", path.display()))?;
            match shards.patch_size {
                Some(q) if q != p => bail!("{} has patch size {p}, earlier shards have {q}", path.display()),
                _ => shards.patch_size = Some(p),
            }
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            shards.by_name.entry(name).or_default().extend(examples);
        }
    }
    Ok(shards)
}

fn implicit_spec(shards: &Shards, stage: u8) -> MixtureSpec {
    let entries = shards
        .by_name
        .iter()
        .map(|(name, examples)| {
            let has_image = examples
                .iter()
                .any(|e| e.elements.iter().any(|el| matches!(el, TokenElement::Patch(_))));
            let modality = if has_image { Modality::ImageText } else { Modality::TextOnly };
            DatasetEntry::new(name.clone(), PathBuf::new(), modality, examples.len() as f64)
        })
        .collect();
    MixtureSpec {
        stage,
        entries,
        text_blend_multiplier: 1.0,
        seed: 0,
    }
}

pub fn run(args: &PackArgs) -> Result<PackSummary> {
    let shards = load_shards(&args.corpus)?;
    let Some(patch_size) = shards.patch_size else {
        bail!("no .sexm shards found");
    };
    let mut spec = match &args.spec {
        Some(path) => MixtureSpec::from_file(path)?,
        None => implicit_spec(&shards, args.stage),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(m) = args.text_blend_multiplier {
        spec.text_blend_multiplier = m;
    }
    spec.validate()?;

    let weights = spec.effective_weights();
    let mut sources: Vec<&[Example]> = Vec::with_capacity(spec.entries.len());
    for (entry, &w) in spec.entries.iter().zip(&weights) {
        let examples = shards.by_name.get(&entry.name).map(Vec::as_slice).unwrap_or(&[]);
        if w > 0.0 && examples.is_empty() {
            bail!("dataset {} has weight {w} but no examples in the corpus", entry.name);
        }
        sources.push(examples);
    }
    let total = args.examples.unwrap_or_else(|| {
        sources
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(s, _)| s.len())
            .sum()
    });

    let mut packer = Packer::new(args.seq_len, args.mode.into())?;
    let mut writer = SpkdOut::create(&args.out, patch_size)?;
    let mut summary = PackSummary {
        examples: 0,
        sequences: 0,
        pad: 0,
    };
    for draw in plan_schedule(&spec, total)? {
        let src = sources[draw.dataset];
        let ex = &src[(draw.example_index % src.len() as u64) as usize];
        let closed = packer
            .push(ex)
            .with_context(|| format!("packing example {} of {}", draw.example_index, spec.entries[draw.dataset].name))?;
        for seq in closed {
            summary.pad += seq.pad_count();
            writer.write(&seq)?;
        }
        summary.examples += 1;
    }
    if let Some(seq) = packer.finish() {
        summary.pad += seq.pad_count();
        writer.write(&seq)?;
    }
    summary.sequences = writer.finish()?;
    let slots = summary.sequences * args.seq_len;
    log::info!(
        "packed {} examples into {} sequences of {} ({:.1}% fill)",
        summary.examples,
        summary.sequences,
        args.seq_len,
        if slots == 0 { 0.0 } else { 100.0 * (slots - summary.pad) as f64 / slots as f64 }
    );
    Ok(summary)
}

/// Packed file written under a temporary name and renamed on success.
struct SpkdOut {
    writer: PackedWriter<BufWriter<File>>,
    tmp: PathBuf,
    dest: PathBuf,
}

impl SpkdOut {
    fn create(dest: &Path, patch_size: u32) -> Result<Self> {
        let mut tmp = dest.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self {
            writer: PackedWriter::new(BufWriter::new(file), patch_size)?,
            tmp,
            dest: dest.to_owned(),
        })
    }

    fn write(&mut self, seq: &solo_core::packing::PackedSequence) -> Result<()> {
        self.writer.write(seq).with_context(|| format!("writing {}", self.dest.display()))
    }

    fn finish(self) -> Result<usize> {
        let n = self.writer.records();
        let buf = self.writer.finish()?;
        buf.into_inner()
            .map_err(|e| e.into_error())
            .and_then(|f| f.sync_all())
            .with_context(|| format!("writing {}", self.dest.display()))?;
        std::fs::rename(&self.tmp, &self.dest).with_context(|| format!("writing {}", self.dest.display()))?;
        Ok(n)
    }
}

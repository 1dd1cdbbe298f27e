use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{ArgGroup, Args};

use solo_core::mixture::{account_tokens, reference_account, stage_curriculum, MixtureSpec, TokenAccount};

use crate::{load_tokenizer, write_atomic, PreprocessFlags};

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["spec", "stage"])))]
pub struct AccountArgs {
    /// Mixture spec whose entries point at JSONL manifests.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Show the built-in reference counts for a curriculum stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: Option<u8>,
    #[command(flatten)]
    pub preprocess: PreprocessFlags,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn compute(args: &AccountArgs) -> Result<TokenAccount> {
    if let Some(stage) = args.stage {
        return Ok(reference_account(&stage_curriculum(stage)?));
    }
    let spec = MixtureSpec::from_file(args.spec.as_deref().expect("clap requires spec or stage"))?;
    let cfg = args.preprocess.config()?;
    let tok = load_tokenizer(args.vocab.as_deref())?;
    Ok(account_tokens(&spec.entries, &cfg, tok.as_ref())?)
}

pub fn render_table(account: &TokenAccount, out: &mut dyn Write) -> std::io::Result<()> {
    let report = account.report();
    let width = report.datasets.iter().map(|d| d.name.len()).max().unwrap_or(0).max(7);
    writeln!(
        out,
        "{:<width$} {:>10} {:>10} {:>16} {:>16} {:>14}",
        "dataset", "records", "images", "text", "vision", "special"
    )?;
    for d in report.datasets.iter().chain(std::iter::once(&report.total)) {
        writeln!(
            out,
            "{:<width$} {:>10} {:>10} {:>16} {:>16} {:>14}",
            d.name, d.records, d.images, d.text_tokens, d.vision_tokens, d.special_tokens
        )?;
    }
    writeln!(out, "text {:.2}%  vision {:.2}%", report.text_percent, report.vision_percent)
}

pub fn run(args: &AccountArgs) -> Result<()> {
    let account = compute(args)?;
    let json = serde_json::to_vec_pretty(&account.report())?;
    if let Some(path) = &args.out {
        write_atomic(path, &json)?;
    }
    let mut stdout = std::io::stdout().lock();
    if args.json {
        stdout.write_all(&json)?;
        writeln!(stdout)?;
    } else {
        render_table(&account, &mut stdout)?;
    }
    Ok(())
}

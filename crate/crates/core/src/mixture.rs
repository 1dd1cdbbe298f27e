//! Staged data mixtures: spec files, deterministic draw schedules and token
//! accounting.

use std::ops::Add;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{probe_dims, read_manifest, CorpusError, ManifestRecord};
use crate::preprocess::{resize_output_dims, PreprocessConfig};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("invalid mixture configuration: {0}")]
    Config(String),
    #[error("dataset {dataset}: {source}")]
    Ingestion {
        dataset: String,
        #[source]
        source: CorpusError,
    },
    #[error("cannot read mixture spec {path}: {reason}")]
    SpecFile { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    TextOnly,
    ImageText,
}

/// What a dataset contributes within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetRole {
    /// Image followed only by its fine-grained class name.
    LabelPrediction,
    Captioning,
    /// Rendered web pages paired with their markup.
    Markup,
    Supervised,
    TextBlend,
}

/// Published per-dataset token counts a template was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceCounts {
    pub text_tokens: u64,
    pub vision_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    #[serde(default)]
    pub path: PathBuf,
    pub modality: Modality,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<DatasetRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceCounts>,
}

impl DatasetEntry {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>, modality: Modality, weight: f64) -> Self {
        Self {
            name: name.into(),
            path: path.into(),
            modality,
            weight,
            role: None,
            reference: None,
        }
    }
}

fn default_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub stage: u8,
    pub entries: Vec<DatasetEntry>,
    /// Scales the weight of every text-only entry.
    #[serde(default = "default_multiplier")]
    pub text_blend_multiplier: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MixtureSpec {
    pub fn from_file(path: &Path) -> Result<Self, MixtureError> {
        let spec_err = |reason: String| MixtureError::SpecFile {
            path: path.to_owned(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| spec_err(e.to_string()))?;
        let mut spec: MixtureSpec = serde_json::from_str(&text).map_err(|e| spec_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for entry in &mut spec.entries {
            if entry.path.is_relative() && !entry.path.as_os_str().is_empty() {
                entry.path = base.join(&entry.path);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MixtureError> {
        if !(1..=3).contains(&self.stage) {
            return Err(MixtureError::Config(format!("unknown stage {}", self.stage)));
        }
        if !(self.text_blend_multiplier.is_finite() && self.text_blend_multiplier > 0.0) {
            return Err(MixtureError::Config(format!(
                "text blend multiplier must be positive, got {}",
                self.text_blend_multiplier
            )));
        }
        if let Some(e) = self.entries.iter().find(|e| !(e.weight.is_finite() && e.weight >= 0.0)) {
            return Err(MixtureError::Config(format!("dataset {} has weight {}", e.name, e.weight)));
        }
        if !self.effective_weights().iter().any(|&w| w > 0.0) {
            return Err(MixtureError::Config("no dataset has a positive weight".into()));
        }
        Ok(())
    }

    /// Entry weights after applying the text blend multiplier.
    pub fn effective_weights(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| match e.modality {
                Modality::TextOnly => e.weight * self.text_blend_multiplier,
                Modality::ImageText => e.weight,
            })
            .collect()
    }

    /// Normalized effective weights.
    pub fn proportions(&self) -> Vec<f64> {
        let w = self.effective_weights();
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }
}

/// One scheduled draw: the `example_index`-th example taken from entry `dataset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Draw {
    pub dataset: usize,
    pub example_index: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` that depends only on `(seed, step)`.
pub fn step_uniform(seed: u64, step: u64) -> f64 {
    let h = splitmix(splitmix(seed) ^ step);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Entry chosen at `step`; computable without replaying earlier steps.
pub fn dataset_at(spec: &MixtureSpec, step: u64) -> Result<usize, MixtureError> {
    spec.validate()?;
    Ok(select(&spec.effective_weights(), step_uniform(spec.seed, step)))
}

fn select(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Deterministic draw sequence following the effective weights.
///
/// Each step picks a dataset from a stateless hash of `(seed, step)`; examples
/// within a dataset are taken in order.
pub fn plan_schedule(spec: &MixtureSpec, total: usize) -> Result<Vec<Draw>, MixtureError> {
    spec.validate()?;
    let weights = spec.effective_weights();
    let mut taken = vec![0u64; weights.len()];
    Ok((0..total as u64)
        .map(|step| {
            let dataset = select(&weights, step_uniform(spec.seed, step));
            let example_index = taken[dataset];
            taken[dataset] += 1;
            Draw { dataset, example_index }
        })
        .collect())
}

/// Token counts for one dataset. Each image patch is one vision token; the
/// `<vision>`, `</vision>` and `<vrow_sep>` tokens are counted separately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTokens {
    pub name: String,
    pub records: u64,
    pub images: u64,
    pub text_tokens: u64,
    pub vision_tokens: u64,
    pub special_tokens: u64,
}

impl Add<&DatasetTokens> for DatasetTokens {
    type Output = DatasetTokens;

    fn add(mut self, rhs: &DatasetTokens) -> DatasetTokens {
        self.records += rhs.records;
        self.images += rhs.images;
        self.text_tokens += rhs.text_tokens;
        self.vision_tokens += rhs.vision_tokens;
        self.special_tokens += rhs.special_tokens;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAccount {
    pub datasets: Vec<DatasetTokens>,
}

impl TokenAccount {
    pub fn total(&self) -> DatasetTokens {
        let init = DatasetTokens {
            name: "total".into(),
            ..Default::default()
        };
        self.datasets.iter().fold(init, |acc, d| acc + d)
    }

    /// `(text %, vision %)` of text plus vision tokens; `(0, 0)` when empty.
    pub fn percentages(&self) -> (f64, f64) {
        let t = self.total();
        let all = (t.text_tokens + t.vision_tokens) as f64;
        if all == 0.0 {
            return (0.0, 0.0);
        }
        (
            100.0 * t.text_tokens as f64 / all,
            100.0 * t.vision_tokens as f64 / all,
        )
    }

    /// Concatenates the per-dataset rows of a disjoint account.
    pub fn merge(mut self, other: TokenAccount) -> TokenAccount {
        self.datasets.extend(other.datasets);
        self
    }

    pub fn report(&self) -> AccountReport {
        let (text_percent, vision_percent) = self.percentages();
        AccountReport {
            datasets: self.datasets.clone(),
            total: self.total(),
            text_percent,
            vision_percent,
        }
    }
}

/// Machine-readable form of a [`TokenAccount`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountReport {
    pub datasets: Vec<DatasetTokens>,
    pub total: DatasetTokens,
    pub text_percent: f64,
    pub vision_percent: f64,
}

/// Counts tokens of in-memory manifest records. Image paths are resolved
/// against `base_dir` and only their headers are read.
pub fn account_records<'a>(
    name: &str,
    records: impl IntoIterator<Item = &'a ManifestRecord>,
    base_dir: &Path,
    cfg: &PreprocessConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<DatasetTokens, CorpusError> {
    let mut row = DatasetTokens {
        name: name.to_owned(),
        ..Default::default()
    };
    for rec in records {
        row.records += 1;
        row.text_tokens += tokenizer.encode(&rec.text).len() as u64;
        if let Some(resp) = &rec.response {
            row.text_tokens += tokenizer.encode(resp).len() as u64;
        }
        if let Some(path) = rec.resolve_image(base_dir) {
            let out = resize_output_dims(probe_dims(&path)?, cfg)?;
            let p = cfg.patch_size() as u64;
            let (cols, rows) = (out.width as u64 / p, out.height as u64 / p);
            row.images += 1;
            row.vision_tokens += cols * rows;
            row.special_tokens += rows + 1;
        }
    }
    Ok(row)
}

/// Reads each entry's manifest and tallies its tokens.
pub fn account_tokens(
    entries: &[DatasetEntry],
    cfg: &PreprocessConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<TokenAccount, MixtureError> {
    let mut datasets = Vec::with_capacity(entries.len());
    for entry in entries {
        let wrap = |source| MixtureError::Ingestion {
            dataset: entry.name.clone(),
            source,
        };
        let records = read_manifest(&entry.path).map_err(wrap)?;
        let base = entry.path.parent().unwrap_or(Path::new(""));
        datasets.push(account_records(&entry.name, &records, base, cfg, tokenizer).map_err(wrap)?);
    }
    Ok(TokenAccount { datasets })
}

struct TemplateRow {
    name: &'static str,
    role: DatasetRole,
    text_tokens: u64,
    vision_tokens: u64,
}

const fn row(name: &'static str, role: DatasetRole, text_tokens: u64, vision_tokens: u64) -> TemplateRow {
    TemplateRow {
        name,
        role,
        text_tokens,
        vision_tokens,
    }
}

use DatasetRole::*;

const STAGE_1: &[TemplateRow] = &[
    row("imagenet21k", LabelPrediction, 212_745_573, 2_210_457_535),
    row("slimpajama", TextBlend, 4_340_877_587, 0),
];

// The published Capfusion row repeats its text count in the vision column; the
// vision count here is the row total minus text, which also reproduces the
// stage total.
const STAGE_2: &[TemplateRow] = &[
    row("capfusion", Captioning, 1_172_726_505, 5_491_625_358),
    row("websight", Markup, 1_087_060_511, 1_213_884_704),
    row("cc3m", Captioning, 76_092_147, 988_385_167),
    row("detailed-captions", Captioning, 44_788_200, 157_228_570),
    row("llavar", Supervised, 31_390_556, 86_058_228),
    row("dvqa", Supervised, 55_653_796, 39_200_000),
    row("ocr-vqa", Supervised, 21_161_018, 30_759_687),
    row("figureqa", Supervised, 24_803_256, 24_783_049),
    row("slimpajama", TextBlend, 4_300_998_161, 0),
];

const STAGE_3: &[TemplateRow] = &[
    row("allava-laion", Supervised, 176_660_898, 265_848_592),
    row("allava-vlflan", Supervised, 77_835_919, 66_741_458),
    row("llavar", Supervised, 31_390_556, 86_058_228),
    row("dvqa", Supervised, 55_653_796, 39_200_000),
    row("figureqa", Supervised, 24_803_256, 24_783_049),
    row("slimpajama", TextBlend, 430_688_442, 0),
];

/// Dataset roles for a pretraining stage.
///
/// Stage 1 pairs label prediction with a text blend, stage 2 scales up to
/// captions, markup and some supervised data, stage 3 anneals on high-quality
/// supervised data. Paths are left empty. Default weights are each dataset's
/// published token count so the template reproduces the reference token mix.
pub fn stage_curriculum(stage: u8) -> Result<MixtureSpec, MixtureError> {
    let rows = match stage {
        1 => STAGE_1,
        2 => STAGE_2,
        3 => STAGE_3,
        other => return Err(MixtureError::Config(format!("unknown stage {other}"))),
    };
    let entries = rows
        .iter()
        .map(|r| DatasetEntry {
            name: r.name.into(),
            path: PathBuf::new(),
            modality: if r.role == TextBlend {
                Modality::TextOnly
            } else {
                Modality::ImageText
            },
            weight: (r.text_tokens + r.vision_tokens) as f64,
            role: Some(r.role),
            reference: Some(ReferenceCounts {
                text_tokens: r.text_tokens,
                vision_tokens: r.vision_tokens,
            }),
        })
        .collect();
    Ok(MixtureSpec {
        stage,
        entries,
        text_blend_multiplier: 1.0,
        seed: 0,
    })
}

/// Token account implied by a template's reference counts.
pub fn reference_account(spec: &MixtureSpec) -> TokenAccount {
    TokenAccount {
        datasets: spec
            .entries
            .iter()
            .filter_map(|e| {
                e.reference.map(|r| DatasetTokens {
                    name: e.name.clone(),
                    text_tokens: r.text_tokens,
                    vision_tokens: r.vision_tokens,
                    ..Default::default()
                })
            })
            .collect(),
    }
}

/// One instruction-tuning source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub category: String,
    pub dataset: String,
    pub samples: u64,
}

/// The bundled instruction fine-tuning catalog.
pub fn instruction_catalog() -> Vec<CatalogEntry> {
    serde_json::from_str(include_str!("../data/instruction_catalog.json")).expect("bundled catalog parses")
}

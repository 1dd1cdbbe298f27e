use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::encoding::{ProjectorWeights, Vocabulary};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Text ids only; the three vision specials are appended to the table.
    pub text_vocab_size: u32,
    pub patch_size: u32,
    pub max_seq_len: usize,
    /// Reuse the token embedding table as the output head.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            text_vocab_size: 256,
            patch_size: 32,
            max_seq_len: 512,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_seq_len == 0 || self.text_vocab_size == 0 || self.patch_size == 0 {
            return bad("ffn_dim, max_seq_len, text_vocab_size and patch_size must be positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.text_vocab_size)
    }

    /// Output classes: text ids plus specials.
    pub fn output_size(&self) -> usize {
        self.vocab().embedding_rows()
    }

    pub fn patch_len(&self) -> usize {
        let p = self.patch_size as usize;
        p * p * 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `(text_vocab + 3) x d_model`
    pub token_embedding: Matrix,
    pub projector: ProjectorWeights,
    /// Indexed by position within a segment.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    /// `d_model x (text_vocab + 3)`; `None` when tied to the token embedding.
    pub head: Option<Matrix>,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![0.0; d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ffn_norm: vec![0.0; d],
                w1: Matrix::zeros(d, cfg.ffn_dim),
                b1: vec![0.0; cfg.ffn_dim],
                w2: Matrix::zeros(cfg.ffn_dim, d),
                b2: vec![0.0; d],
            })
            .collect();
        Self {
            token_embedding: Matrix::zeros(cfg.output_size(), d),
            projector: ProjectorWeights::zeros(cfg.patch_len(), d),
            position_embedding: Matrix::zeros(cfg.max_seq_len, d),
            layers,
            final_norm: vec![0.0; d],
            head: (!cfg.tie_embeddings).then(|| Matrix::zeros(d, cfg.output_size())),
        }
    }

    /// Uniform init with standard deviation `std` for weights, unit norm gains
    /// and zero biases. Residual output projections are scaled down by
    /// `sqrt(2 * n_layers)`.
    pub fn init(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let residual = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        for t in p.tensors_mut() {
            let leaf = t.name.rsplit('.').next().unwrap_or("");
            let scale = match leaf {
                "attn_norm" | "ffn_norm" | "final_norm" => {
                    t.data.fill(1.0);
                    continue;
                }
                "bias" | "b1" | "b2" => continue,
                "wo" | "w2" => residual,
                _ => std,
            };
            let half_width = scale * 3f64.sqrt();
            let dist = Uniform::new_inclusive(-half_width, half_width);
            t.data.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        p
    }

    /// Every tensor in a fixed order with a stable dotted name.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        push_m(&mut out, "token_embedding".into(), &self.token_embedding);
        push_m(&mut out, "projector.matrix".into(), &self.projector.matrix);
        push_v(&mut out, "projector.bias".into(), &self.projector.bias);
        push_m(&mut out, "position_embedding".into(), &self.position_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            push_v(&mut out, format!("layers.{i}.attn_norm"), &l.attn_norm);
            push_m(&mut out, format!("layers.{i}.wq"), &l.wq);
            push_m(&mut out, format!("layers.{i}.wk"), &l.wk);
            push_m(&mut out, format!("layers.{i}.wv"), &l.wv);
            push_m(&mut out, format!("layers.{i}.wo"), &l.wo);
            push_v(&mut out, format!("layers.{i}.ffn_norm"), &l.ffn_norm);
            push_m(&mut out, format!("layers.{i}.w1"), &l.w1);
            push_v(&mut out, format!("layers.{i}.b1"), &l.b1);
            push_m(&mut out, format!("layers.{i}.w2"), &l.w2);
            push_v(&mut out, format!("layers.{i}.b2"), &l.b2);
        }
        push_v(&mut out, "final_norm".into(), &self.final_norm);
        if let Some(h) = &self.head {
            push_m(&mut out, "head".into(), h);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let shape_m = |m: &Matrix| vec![m.rows(), m.cols()];
        macro_rules! m {
            ($name:expr, $m:expr) => {{
                let shape = shape_m(&$m);
                out.push(TensorMut { name: $name, shape, data: $m.data_mut() });
            }};
        }
        macro_rules! v {
            ($name:expr, $v:expr) => {{
                let shape = vec![$v.len()];
                out.push(TensorMut { name: $name, shape, data: $v.as_mut_slice() });
            }};
        }
        m!("token_embedding".into(), self.token_embedding);
        m!("projector.matrix".into(), self.projector.matrix);
        v!("projector.bias".into(), self.projector.bias);
        m!("position_embedding".into(), self.position_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            v!(format!("layers.{i}.attn_norm"), l.attn_norm);
            m!(format!("layers.{i}.wq"), l.wq);
            m!(format!("layers.{i}.wk"), l.wk);
            m!(format!("layers.{i}.wv"), l.wv);
            m!(format!("layers.{i}.wo"), l.wo);
            v!(format!("layers.{i}.ffn_norm"), l.ffn_norm);
            m!(format!("layers.{i}.w1"), l.w1);
            v!(format!("layers.{i}.b1"), l.b1);
            m!(format!("layers.{i}.w2"), l.w2);
            v!(format!("layers.{i}.b2"), l.b2);
        }
        v!("final_norm".into(), self.final_norm);
        if let Some(h) = self.head.as_mut() {
            m!("head".into(), *h);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expect = Self::zeros(cfg);
        let a = self.tensors();
        let b = expect.tensors();
        if a.len() != b.len() {
            return Err(ModelError::Shape(format!("{} tensors, config needs {}", a.len(), b.len())));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(ModelError::Shape(format!(
                    "{} {:?} does not match {} {:?}",
                    x.name, x.shape, y.name, y.shape
                )));
            }
        }
        Ok(())
    }
}

fn push_m<'a>(out: &mut Vec<TensorRef<'a>>, name: String, m: &'a Matrix) {
    out.push(TensorRef {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.data(),
    });
}

fn push_v<'a>(out: &mut Vec<TensorRef<'a>>, name: String, v: &'a [f64]) {
    out.push(TensorRef {
        name,
        shape: vec![v.len()],
        data: v,
    });
}

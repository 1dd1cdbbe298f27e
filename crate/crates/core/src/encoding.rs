//! Vision span layout and raw-patch projection into the embedding space.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::preprocess::PatchGrid;
use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("empty patch grid")]
    EmptyGrid,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("token id {id} out of range for vocabulary of {limit}")]
    Vocabulary { id: u32, limit: u32 },
    #[error("padding element cannot be embedded")]
    Padding,
}

/// Special tokens that delimit and structure a vision span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialToken {
    VisionBegin,
    VisionEnd,
    VrowSep,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 3] = [Self::VisionBegin, Self::VisionEnd, Self::VrowSep];

    pub fn code(self) -> u8 {
        match self {
            Self::VisionBegin => 0,
            Self::VisionEnd => 1,
            Self::VrowSep => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VisionBegin => "<vision>",
            Self::VisionEnd => "</vision>",
            Self::VrowSep => "<vrow_sep>",
        }
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Id layout: text ids `[0, text_vocab_size)`, then the three special tokens,
/// then a patch sentinel that never gets an embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    text_vocab_size: u32,
}

impl Vocabulary {
    pub fn new(text_vocab_size: u32) -> Self {
        assert!(text_vocab_size > 0, "text vocabulary must be non-empty");
        Self { text_vocab_size }
    }

    pub fn text_vocab_size(&self) -> u32 {
        self.text_vocab_size
    }

    pub fn special_id(&self, token: SpecialToken) -> u32 {
        self.text_vocab_size + token.code() as u32
    }

    pub fn patch_sentinel_id(&self) -> u32 {
        self.text_vocab_size + SpecialToken::ALL.len() as u32
    }

    /// Rows in the embedding table: text tokens plus specials.
    pub fn embedding_rows(&self) -> usize {
        self.text_vocab_size as usize + SpecialToken::ALL.len()
    }
}

/// One slot of a multimodal sequence.
///
/// Patches hold the raw `P x P x 3` bytes; normalization happens at embedding
/// time so that sequences serialize losslessly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TokenElement {
    Text(u32),
    Patch(Arc<[u8]>),
    Special(SpecialToken),
    Pad,
}

impl TokenElement {
    pub fn is_text(&self) -> bool {
        matches!(self, Self::Text(_))
    }

    pub fn is_pad(&self) -> bool {
        matches!(self, Self::Pad)
    }

    /// Embedding-table row for text and special elements.
    pub fn table_id(&self, vocab: &Vocabulary) -> Option<u32> {
        match self {
            Self::Text(id) => Some(*id),
            Self::Special(s) => Some(vocab.special_id(*s)),
            _ => None,
        }
    }
}

/// Linear map from a flattened patch to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    /// `(P*P*3) x d_model`
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectorWeights {
    pub fn zeros(patch_len: usize, d_model: usize) -> Self {
        Self {
            matrix: Matrix::zeros(patch_len, d_model),
            bias: vec![0.0; d_model],
        }
    }

    pub fn patch_len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d_model(&self) -> usize {
        self.matrix.cols()
    }

    fn check(&self) -> Result<(), EncodingError> {
        if self.bias.len() != self.matrix.cols() {
            return Err(EncodingError::Dimension(format!(
                "projector bias has {} entries, matrix has {} columns",
                self.bias.len(),
                self.matrix.cols()
            )));
        }
        Ok(())
    }

    /// `normalize_patch(patch) * matrix + bias`
    pub fn project(&self, patch: &[u8]) -> Result<Vec<f64>, EncodingError> {
        self.check()?;
        if patch.len() != self.patch_len() {
            return Err(EncodingError::Dimension(format!(
                "patch has {} values, projector expects {}",
                patch.len(),
                self.patch_len()
            )));
        }
        let x = normalize_patch(patch);
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.matrix.row(i)) {
                *o += xi * w;
            }
        }
        Ok(out)
    }
}

/// `<vision>`, the rows of patches with `<vrow_sep>` between consecutive rows,
/// then `</vision>`. Length is `rows * cols + rows + 1`.
pub fn layout_vision_span(grid: &PatchGrid) -> Result<Vec<TokenElement>, EncodingError> {
    if grid.is_empty() {
        return Err(EncodingError::EmptyGrid);
    }
    let mut out = Vec::with_capacity(grid.len() + grid.rows() + 1);
    out.push(TokenElement::Special(SpecialToken::VisionBegin));
    for r in 0..grid.rows() {
        if r > 0 {
            out.push(TokenElement::Special(SpecialToken::VrowSep));
        }
        for c in 0..grid.cols() {
            out.push(TokenElement::Patch(Arc::from(grid.patch(r, c))));
        }
    }
    out.push(TokenElement::Special(SpecialToken::VisionEnd));
    Ok(out)
}

/// Flattens `(row, col, channel)` and maps each byte `x` to `2x/255 - 1`.
pub fn normalize_patch(patch: &[u8]) -> Vec<f64> {
    patch.iter().map(|&x| x as f64 / 255.0 * 2.0 - 1.0).collect()
}

/// Projects every patch of the grid; returns an `N x d_model` matrix.
pub fn project_patches(grid: &PatchGrid, w: &ProjectorWeights) -> Result<Matrix, EncodingError> {
    let mut out = Matrix::zeros(grid.len(), w.d_model());
    for (i, patch) in grid.patches().iter().enumerate() {
        out.row_mut(i).copy_from_slice(&w.project(patch)?);
    }
    Ok(out)
}

/// Builds the input embedding matrix for a sequence.
///
/// Text and special elements look up `text_embeddings` (one row per id in
/// `vocab`), patches go through the projector. Padding is rejected.
pub fn embed_sequence(
    elements: &[TokenElement],
    text_embeddings: &Matrix,
    vocab: &Vocabulary,
    w: &ProjectorWeights,
) -> Result<Matrix, EncodingError> {
    if text_embeddings.rows() != vocab.embedding_rows() {
        return Err(EncodingError::Dimension(format!(
            "embedding table has {} rows, vocabulary needs {}",
            text_embeddings.rows(),
            vocab.embedding_rows()
        )));
    }
    if text_embeddings.cols() != w.d_model() {
        return Err(EncodingError::Dimension(format!(
            "embedding width {} differs from projector width {}",
            text_embeddings.cols(),
            w.d_model()
        )));
    }
    let mut out = Matrix::zeros(elements.len(), w.d_model());
    for (t, el) in elements.iter().enumerate() {
        match el {
            TokenElement::Text(id) if *id >= vocab.text_vocab_size() => {
                return Err(EncodingError::Vocabulary {
                    id: *id,
                    limit: vocab.text_vocab_size(),
                })
            }
            TokenElement::Text(_) | TokenElement::Special(_) => {
                let id = el.table_id(vocab).expect("text or special") as usize;
                out.row_mut(t).copy_from_slice(text_embeddings.row(id));
            }
            TokenElement::Patch(bytes) => out.row_mut(t).copy_from_slice(&w.project(bytes)?),
            TokenElement::Pad => return Err(EncodingError::Padding),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize, p: u32) -> PatchGrid {
        let len = (p * p * 3) as usize;
        let patches = (0..rows * cols)
            .map(|i| (0..len).map(|j| ((i * 7 + j) % 256) as u8).collect())
            .collect();
        PatchGrid::new(p, rows, cols, patches).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, patch_len: usize, d: usize, bias: bool) -> ProjectorWeights {
        let mut w = ProjectorWeights::zeros(patch_len, d);
        w.matrix.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        if bias {
            w.bias.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        w
    }

    #[test]
    fn single_patch_span() {
        let span = layout_vision_span(&grid(1, 1, 2)).unwrap();
        assert_eq!(span.len(), 3);
        assert_eq!(span[0], TokenElement::Special(SpecialToken::VisionBegin));
        assert!(matches!(span[1], TokenElement::Patch(_)));
        assert_eq!(span[2], TokenElement::Special(SpecialToken::VisionEnd));
    }

    #[test]
    fn two_by_two_span_order() {
        let g = grid(2, 2, 2);
        let span = layout_vision_span(&g).unwrap();
        let patch = |r, c| TokenElement::Patch(Arc::from(g.patch(r, c)));
        let expect = vec![
            TokenElement::Special(SpecialToken::VisionBegin),
            patch(0, 0),
            patch(0, 1),
            TokenElement::Special(SpecialToken::VrowSep),
            patch(1, 0),
            patch(1, 1),
            TokenElement::Special(SpecialToken::VisionEnd),
        ];
        assert_eq!(span, expect);
    }

    #[test]
    fn span_length_for_672_by_512() {
        assert_eq!(layout_vision_span(&grid(16, 21, 1)).unwrap().len(), 353);
    }

    #[test]
    fn normalization_endpoints() {
        assert!(normalize_patch(&[0; 12]).iter().all(|&v| v == -1.0));
        assert!(normalize_patch(&[255; 12]).iter().all(|&v| v == 1.0));
        let mid = normalize_patch(&[128])[0];
        assert!((mid - 0.003_921_568_627_451).abs() < 1e-12);
    }

    #[test]
    fn zero_projector_gives_zero_rows() {
        let g = grid(2, 3, 2);
        let out = project_patches(&g, &ProjectorWeights::zeros(12, 5)).unwrap();
        assert_eq!((out.rows(), out.cols()), (6, 5));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projector_returns_normalized_pixels() {
        let g = grid(1, 2, 2);
        let mut w = ProjectorWeights::zeros(12, 12);
        for i in 0..12 {
            w.matrix[(i, i)] = 1.0;
        }
        let out = project_patches(&g, &w).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), normalize_patch(&g.patches()[i]).as_slice());
        }
    }

    #[test]
    fn projection_matches_naive_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(1, 2, 4);
        let w = random_weights(&mut rng, 48, 7, true);
        let out = project_patches(&g, &w).unwrap();
        for (i, patch) in g.patches().iter().enumerate() {
            for j in 0..7 {
                let mut expect = w.bias[j];
                for (k, &byte) in patch.iter().enumerate() {
                    expect += (byte as f64 * 2.0 / 255.0 - 1.0) * w.matrix[(k, j)];
                }
                let got = out[(i, j)];
                assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1e-12), "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn projector_shape_mismatch() {
        let g = grid(1, 1, 2);
        let err = project_patches(&g, &ProjectorWeights::zeros(10, 4)).unwrap_err();
        assert!(matches!(err, EncodingError::Dimension(_)));
    }

    #[test]
    fn embed_mixed_sequence_matches_per_element_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = Vocabulary::new(10);
        let d = 6;
        let mut table = Matrix::zeros(vocab.embedding_rows(), d);
        table.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let w = random_weights(&mut rng, 12, d, true);
        let g = grid(2, 1, 2);
        let mut seq = vec![TokenElement::Text(3), TokenElement::Text(9)];
        seq.extend(layout_vision_span(&g).unwrap());
        seq.push(TokenElement::Text(0));
        let out = embed_sequence(&seq, &table, &vocab, &w).unwrap();
        assert_eq!(out.rows(), seq.len());
        for (t, el) in seq.iter().enumerate() {
            let expect: Vec<f64> = match el {
                TokenElement::Text(id) => table.row(*id as usize).to_vec(),
                TokenElement::Special(s) => table.row(10 + s.code() as usize).to_vec(),
                TokenElement::Patch(p) => (0..d)
                    .map(|j| {
                        w.bias[j]
                            + p.iter()
                                .enumerate()
                                .map(|(k, &b)| (b as f64 / 255.0 * 2.0 - 1.0) * w.matrix[(k, j)])
                                .sum::<f64>()
                    })
                    .collect(),
                TokenElement::Pad => unreachable!(),
            };
            for j in 0..d {
                assert!((out[(t, j)] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_text_is_plain_lookup() {
        let vocab = Vocabulary::new(4);
        let mut table = Matrix::zeros(7, 2);
        for (i, v) in table.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let seq = [TokenElement::Text(2), TokenElement::Text(0)];
        let out = embed_sequence(&seq, &table, &vocab, &ProjectorWeights::zeros(3, 2)).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_projector_span_interleaves_special_rows() {
        let vocab = Vocabulary::new(4);
        let mut table = Matrix::zeros(7, 2);
        table.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let span = layout_vision_span(&grid(2, 2, 1)).unwrap();
        let out = embed_sequence(&span, &table, &vocab, &ProjectorWeights::zeros(3, 2)).unwrap();
        for (t, el) in span.iter().enumerate() {
            let expect = if matches!(el, TokenElement::Patch(_)) { 0.0 } else { 1.0 };
            assert!(out.row(t).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn out_of_range_text_id() {
        let vocab = Vocabulary::new(4);
        let table = Matrix::zeros(7, 2);
        let err = embed_sequence(&[TokenElement::Text(4)], &table, &vocab, &ProjectorWeights::zeros(3, 2))
            .unwrap_err();
        assert_eq!(err, EncodingError::Vocabulary { id: 4, limit: 4 });
    }

    #[test]
    fn special_ids_are_distinct_and_outside_text_range() {
        let vocab = Vocabulary::new(256);
        let ids: Vec<u32> = SpecialToken::ALL.iter().map(|&s| vocab.special_id(s)).collect();
        assert_eq!(ids, vec![256, 257, 258]);
        assert_eq!(vocab.patch_sentinel_id(), 259);
        assert_eq!(vocab.embedding_rows(), 259);
    }

    proptest! {
        #[test]
        fn layout_length_law(rows in 1usize..=32, cols in 1usize..=32) {
            let span = layout_vision_span(&grid(rows, cols, 1)).unwrap();
            prop_assert_eq!(span.len(), rows * cols + rows + 1);
            let count = |tok| span.iter().filter(|e| **e == TokenElement::Special(tok)).count();
            prop_assert_eq!(count(SpecialToken::VisionBegin), 1);
            prop_assert_eq!(count(SpecialToken::VisionEnd), 1);
            prop_assert_eq!(count(SpecialToken::VrowSep), rows - 1);
        }

        #[test]
        fn projection_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(2, 2, 2);
            let w1 = random_weights(&mut rng, 12, 5, false);
            let w2 = random_weights(&mut rng, 12, 5, false);
            let mut combo = ProjectorWeights::zeros(12, 5);
            for ((c, a), b) in combo.matrix.data_mut().iter_mut().zip(w1.matrix.data()).zip(w2.matrix.data()) {
                *c = alpha * a + beta * b;
            }
            let lhs = project_patches(&g, &combo).unwrap();
            let p1 = project_patches(&g, &w1).unwrap();
            let p2 = project_patches(&g, &w2).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = alpha * p1.data()[i] + beta * p2.data()[i];
                let scale = rhs.abs().max(1e-9);
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-6 * scale.max(1.0));
            }
        }
    }
}

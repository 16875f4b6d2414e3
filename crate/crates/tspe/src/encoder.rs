//! Micro transformer encoder for short text lines.
//!
//! A pre-norm transformer with a learned CLS row prepended to the token
//! embeddings; the CLS row of the final layer is the line's embedding.
//! CLS and position embeddings start at zero, so an untrained encoder's
//! CLS is effectively a randomly projected bag of words — informative
//! enough for cosine ranking before any training has happened.
//!
//! Per-head projection matrices are separate parameters and head outputs
//! are summed after per-head output projections, which is equivalent to
//! the usual concat-heads-then-project form without column slicing.

use rand::prelude::*;
use rand_distr::Normal;

use crate::error::Result;
use crate::tensor::optim::LeafMap;
use crate::tensor::{Matrix, ParamSet, Tape, VarId};
use crate::text::Vocabulary;

/// Shape of the encoder (and of the decoder built on the same blocks).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum token positions (excluding the CLS row). Longer inputs are
    /// truncated with a warning.
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized data")
}

/// Register all encoder parameters under `prefix` (e.g. `"enc"`).
pub fn init_encoder_params(
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    vocab_size: usize,
    prefix: &str,
    rng: &mut impl Rng,
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let proj_std = 1.0 / (d as f64).sqrt();
    // unit-variance token rows: when the table doubles as a (possibly
    // frozen) tied output head, logits start at a healthy temperature
    params.insert(
        format!("{prefix}.tok_emb"),
        normal_matrix(rng, vocab_size, d, proj_std),
    );
    params.insert(format!("{prefix}.pos_emb"), Matrix::zeros(cfg.max_len, d));
    params.insert(format!("{prefix}.cls"), Matrix::zeros(1, d));
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            params.insert(
                format!("{prefix}.l{l}.att.wq.h{h}"),
                normal_matrix(rng, d, dh, proj_std),
            );
            params.insert(
                format!("{prefix}.l{l}.att.wk.h{h}"),
                normal_matrix(rng, d, dh, proj_std),
            );
            params.insert(
                format!("{prefix}.l{l}.att.wv.h{h}"),
                normal_matrix(rng, d, dh, proj_std),
            );
            params.insert(
                format!("{prefix}.l{l}.att.wo.h{h}"),
                normal_matrix(rng, dh, d, 1.0 / (dh as f64).sqrt()),
            );
        }
        params.insert(format!("{prefix}.l{l}.ln1.g"), ones(1, d));
        params.insert(format!("{prefix}.l{l}.ln1.b"), Matrix::zeros(1, d));
        params.insert(
            format!("{prefix}.l{l}.ff.w1"),
            normal_matrix(rng, d, cfg.d_ff, proj_std),
        );
        params.insert(format!("{prefix}.l{l}.ff.b1"), Matrix::zeros(1, cfg.d_ff));
        params.insert(
            format!("{prefix}.l{l}.ff.w2"),
            normal_matrix(rng, cfg.d_ff, d, 1.0 / (cfg.d_ff as f64).sqrt()),
        );
        params.insert(format!("{prefix}.l{l}.ff.b2"), Matrix::zeros(1, d));
        params.insert(format!("{prefix}.l{l}.ln2.g"), ones(1, d));
        params.insert(format!("{prefix}.l{l}.ln2.b"), Matrix::zeros(1, d));
    }
    params.insert(format!("{prefix}.lnf.g"), ones(1, d));
    params.insert(format!("{prefix}.lnf.b"), Matrix::zeros(1, d));
}

fn ones(rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.fill(1.0);
    m
}

const LN_EPS: f64 = 1e-5;

/// One bidirectional self-attention block (pre-norm), shared with the
/// decoder's building blocks via the mask argument.
pub(crate) fn self_attention_block(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &EncoderConfig,
    name: &str,
    x: VarId,
    mask: Option<&Matrix>,
) -> Result<VarId> {
    let dh = cfg.head_dim();
    let g1 = leaves.get(tape, &format!("{name}.ln1.g"))?;
    let b1 = leaves.get(tape, &format!("{name}.ln1.b"))?;
    let xn = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let mut acc: Option<VarId> = None;
    for h in 0..cfg.n_heads {
        let wq = leaves.get(tape, &format!("{name}.att.wq.h{h}"))?;
        let wk = leaves.get(tape, &format!("{name}.att.wk.h{h}"))?;
        let wv = leaves.get(tape, &format!("{name}.att.wv.h{h}"))?;
        let wo = leaves.get(tape, &format!("{name}.att.wo.h{h}"))?;
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = match mask {
            Some(m) => tape.softmax_rows_masked(scaled, m.clone())?,
            None => tape.softmax_rows(scaled),
        };
        let ctx = tape.matmul(probs, v)?;
        let out = tape.matmul(ctx, wo)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, out)?,
            None => out,
        });
    }
    tape.add(x, acc.expect("n_heads >= 1"))
}

/// Feed-forward sublayer with pre-norm and residual.
pub(crate) fn feed_forward_block(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    name: &str,
    x: VarId,
) -> Result<VarId> {
    let g2 = leaves.get(tape, &format!("{name}.ln2.g"))?;
    let b2 = leaves.get(tape, &format!("{name}.ln2.b"))?;
    let xn = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let w1 = leaves.get(tape, &format!("{name}.ff.w1"))?;
    let bb1 = leaves.get(tape, &format!("{name}.ff.b1"))?;
    let w2 = leaves.get(tape, &format!("{name}.ff.w2"))?;
    let bb2 = leaves.get(tape, &format!("{name}.ff.b2"))?;
    let h = tape.matmul(xn, w1)?;
    let h = tape.add_row_broadcast(h, bb1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row_broadcast(h, bb2)?;
    tape.add(x, h)
}

/// Truncate ids to the encoder's window, warning when text is dropped.
fn clamp_ids<'a>(cfg: &EncoderConfig, ids: &'a [usize]) -> &'a [usize] {
    if ids.len() > cfg.max_len {
        log::warn!(
            "truncating {}-token line to the {}-token encoder window",
            ids.len(),
            cfg.max_len
        );
        &ids[..cfg.max_len]
    } else {
        ids
    }
}

/// Build the encoder forward pass; returns the (t+1) x d output rows with
/// the CLS row first.
pub fn encoder_graph(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
) -> Result<VarId> {
    let ids = clamp_ids(cfg, ids);
    let cls = leaves.get(tape, &format!("{prefix}.cls"))?;
    let mut x = if ids.is_empty() {
        cls
    } else {
        let tok_table = leaves.get(tape, &format!("{prefix}.tok_emb"))?;
        let pos_table = leaves.get(tape, &format!("{prefix}.pos_emb"))?;
        let toks = tape.embed(tok_table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embed(pos_table, &positions)?;
        let summed = tape.add(toks, pos)?;
        tape.concat_rows(&[cls, summed])?
    };
    for l in 0..cfg.n_layers {
        let name = format!("{prefix}.l{l}");
        x = self_attention_block(tape, leaves, cfg, &name, x, None)?;
        x = feed_forward_block(tape, leaves, &name, x)?;
    }
    let g = leaves.get(tape, &format!("{prefix}.lnf.g"))?;
    let b = leaves.get(tape, &format!("{prefix}.lnf.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Build the encoder and slice out the CLS row (1 x d).
pub fn encoder_cls_graph(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
) -> Result<VarId> {
    let rows = encoder_graph(tape, leaves, cfg, prefix, ids)?;
    tape.slice_rows(rows, 0, 1)
}

/// Encode a line outside a training graph; returns the 1 x d CLS vector.
pub fn encode_cls(
    params: &ParamSet,
    cfg: &EncoderConfig,
    prefix: &str,
    ids: &[usize],
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new(params);
    let cls = encoder_cls_graph(&mut tape, &mut leaves, cfg, prefix, ids)?;
    Ok(tape.value(cls).clone())
}

/// Encode a text line by tokenizing against `vocab` first.
pub fn encode_text(
    params: &ParamSet,
    cfg: &EncoderConfig,
    prefix: &str,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Matrix> {
    encode_cls(params, cfg, prefix, &vocab.encode(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 8,
        }
    }

    fn setup() -> (ParamSet, EncoderConfig) {
        let cfg = tiny_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        init_encoder_params(&mut params, &cfg, 20, "enc", &mut rng);
        (params, cfg)
    }

    #[test]
    fn cls_shape_and_finiteness() {
        let (params, cfg) = setup();
        let cls = encode_cls(&params, &cfg, "enc", &[5, 6, 7]).unwrap();
        assert_eq!(cls.shape(), (1, 16));
        assert!(cls.is_finite());
    }

    #[test]
    fn deterministic_across_calls() {
        let (params, cfg) = setup();
        let a = encode_cls(&params, &cfg, "enc", &[5, 9, 11]).unwrap();
        let b = encode_cls(&params, &cfg, "enc", &[5, 9, 11]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn empty_line_encodes_to_the_cls_only_path() {
        let (params, cfg) = setup();
        let cls = encode_cls(&params, &cfg, "enc", &[]).unwrap();
        assert_eq!(cls.shape(), (1, 16));
        assert!(cls.is_finite());
    }

    #[test]
    fn different_token_sets_give_different_cls() {
        let (params, cfg) = setup();
        let a = encode_cls(&params, &cfg, "enc", &[5, 6]).unwrap();
        let b = encode_cls(&params, &cfg, "enc", &[7, 8]).unwrap();
        let diff = a.sub(&b).unwrap().frobenius_norm();
        assert!(diff > 1e-6, "distinct inputs collapsed to one embedding");
    }

    #[test]
    fn untrained_cls_ranks_token_overlap() {
        // With zero CLS/position init, cosine similarity of untrained CLS
        // vectors tracks bag-of-words overlap.
        let (params, cfg) = setup();
        let probe = encode_cls(&params, &cfg, "enc", &[5, 6, 7]).unwrap();
        let near = encode_cls(&params, &cfg, "enc", &[5, 6, 8]).unwrap();
        let far = encode_cls(&params, &cfg, "enc", &[15, 16, 17]).unwrap();
        let sim_near = crate::tensor::cosine(probe.row(0), near.row(0));
        let sim_far = crate::tensor::cosine(probe.row(0), far.row(0));
        assert!(
            sim_near > sim_far,
            "overlap {sim_near} should beat disjoint {sim_far}"
        );
    }

    #[test]
    fn overlong_input_is_truncated_not_rejected() {
        let (params, cfg) = setup();
        let long: Vec<usize> = (5..19).collect(); // 14 tokens, window is 8
        let cls = encode_cls(&params, &cfg, "enc", &long).unwrap();
        let clipped = encode_cls(&params, &cfg, "enc", &long[..8]).unwrap();
        assert_eq!(cls.data(), clipped.data());
    }

    #[test]
    fn gradients_flow_to_embeddings() {
        let (params, cfg) = setup();
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&params);
        let cls = encoder_cls_graph(&mut tape, &mut leaves, &cfg, "enc", &[5, 6]).unwrap();
        // squared-norm loss via hadamard + contraction with ones
        let sq = tape.hadamard(cls, cls).unwrap();
        let ones = tape.leaf(Matrix::from_vec(16, 1, vec![1.0; 16]).unwrap());
        let loss = tape.matmul(sq, ones).unwrap();
        tape.backward(loss).unwrap();
        let (name, id) = tape
            .param_leaves()
            .iter()
            .find(|(n, _)| n == "enc.tok_emb")
            .cloned()
            .unwrap();
        let g = tape.grad(id).expect("embedding gradient");
        assert_eq!(name, "enc.tok_emb");
        assert!(g.frobenius_norm() > 0.0);
        // only the used rows receive gradient
        assert_eq!(g.row(10), vec![0.0; 16]);
    }
}

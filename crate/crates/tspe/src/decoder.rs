//! Prefix-conditioned causal decoder with cross-attention.
//!
//! The decoder consumes `[soft prefix rows, BOS, tokens...]`: the prefix
//! rows are continuous vectors supplied by the pipeline stage (pooled
//! attention contexts), not embedded tokens. Every block runs masked
//! self-attention, then cross-attention over a memory matrix (encoded
//! subtitles, projected frames, or enriched event history), then a
//! feed-forward sublayer. Output logits tie the weights of the token
//! embedding table.
//!
//! Loss positions covering the prefix are masked out: the prefix steers,
//! only real tokens are scored.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::optim::LeafMap;
use crate::tensor::softmax_rows;
use crate::tensor::{Matrix, ParamSet, Tape, VarId};
use crate::text::{BOS, EOS};

/// Decoders reuse the encoder's shape description.
pub type DecoderConfig = EncoderConfig;

/// Leaf-name scheme for one decoder instance.
///
/// `ns` owns the blocks, positional table and final norm; `emb` names
/// the token-embedding leaf, which lives in an encoder namespace when
/// both sides share one vocabulary table. Sharing makes the tied output
/// head and the encoder read the same vectors, so a circuit that copies
/// a token out of encoded context works even for tokens never seen in a
/// training target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderNames {
    pub ns: String,
    pub emb: String,
}

impl DecoderNames {
    /// Decoder with its own token table at `{ns}.tok_emb`.
    pub fn own(ns: &str) -> Self {
        DecoderNames {
            ns: ns.to_string(),
            emb: format!("{ns}.tok_emb"),
        }
    }

    /// Decoder borrowing the token table registered at `emb_leaf`.
    pub fn tied(ns: &str, emb_leaf: &str) -> Self {
        DecoderNames {
            ns: ns.to_string(),
            emb: emb_leaf.to_string(),
        }
    }
}

/// Additive causal mask: position i may attend to j <= i.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

/// Register decoder parameters under `ns` (e.g. `"dec"`), with an own
/// token table at `{ns}.tok_emb`.
pub fn init_decoder_params(
    params: &mut ParamSet,
    cfg: &DecoderConfig,
    vocab_size: usize,
    ns: &str,
    rng: &mut impl Rng,
) {
    init_decoder_body(params, cfg, Some(vocab_size), ns, rng);
}

/// Register decoder parameters without a token table; the graph builders
/// are then pointed at an existing table via [`DecoderNames::tied`].
pub fn init_decoder_params_tied(
    params: &mut ParamSet,
    cfg: &DecoderConfig,
    ns: &str,
    rng: &mut impl Rng,
) {
    init_decoder_body(params, cfg, None, ns, rng);
}

fn init_decoder_body(
    params: &mut ParamSet,
    cfg: &DecoderConfig,
    vocab_size: Option<usize>,
    ns: &str,
    rng: &mut impl Rng,
) {
    use rand_distr::Normal;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let normal = |rng: &mut dyn RngCore, rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized data")
    };
    let ones = |cols: usize| {
        let mut m = Matrix::zeros(1, cols);
        m.fill(1.0);
        m
    };
    let proj_std = 1.0 / (d as f64).sqrt();
    if let Some(v) = vocab_size {
        // unit-variance rows keep the tied output head at a healthy
        // softmax temperature from the first step
        params.insert(format!("{ns}.tok_emb"), normal(rng, v, d, proj_std));
    }
    params.insert(format!("{ns}.pos_emb"), Matrix::zeros(cfg.max_len, d));
    for l in 0..cfg.n_layers {
        for kind in ["att", "cross"] {
            for h in 0..cfg.n_heads {
                params.insert(
                    format!("{ns}.l{l}.{kind}.wq.h{h}"),
                    normal(rng, d, dh, proj_std),
                );
                params.insert(
                    format!("{ns}.l{l}.{kind}.wk.h{h}"),
                    normal(rng, d, dh, proj_std),
                );
                params.insert(
                    format!("{ns}.l{l}.{kind}.wv.h{h}"),
                    normal(rng, d, dh, proj_std),
                );
                params.insert(
                    format!("{ns}.l{l}.{kind}.wo.h{h}"),
                    normal(rng, dh, d, 1.0 / (dh as f64).sqrt()),
                );
            }
        }
        params.insert(format!("{ns}.l{l}.ln1.g"), ones(d));
        params.insert(format!("{ns}.l{l}.ln1.b"), Matrix::zeros(1, d));
        params.insert(format!("{ns}.l{l}.lnc.g"), ones(d));
        params.insert(format!("{ns}.l{l}.lnc.b"), Matrix::zeros(1, d));
        params.insert(format!("{ns}.l{l}.ff.w1"), normal(rng, d, cfg.d_ff, proj_std));
        params.insert(format!("{ns}.l{l}.ff.b1"), Matrix::zeros(1, cfg.d_ff));
        params.insert(
            format!("{ns}.l{l}.ff.w2"),
            normal(rng, cfg.d_ff, d, 1.0 / (cfg.d_ff as f64).sqrt()),
        );
        params.insert(format!("{ns}.l{l}.ff.b2"), Matrix::zeros(1, d));
        params.insert(format!("{ns}.l{l}.ln2.g"), ones(d));
        params.insert(format!("{ns}.l{l}.ln2.b"), Matrix::zeros(1, d));
    }
    params.insert(format!("{ns}.lnf.g"), ones(d));
    params.insert(format!("{ns}.lnf.b"), Matrix::zeros(1, d));
}

/// Freeze everything except the top `trainable_depth` blocks and the
/// final norm. Depth at or above the layer count leaves all parameters
/// trainable; smaller depths also freeze the embeddings (and with them
/// the tied output head).
pub fn freeze_decoder_below(
    params: &mut ParamSet,
    cfg: &DecoderConfig,
    names: &DecoderNames,
    trainable_depth: usize,
) {
    if trainable_depth >= cfg.n_layers {
        return;
    }
    let ns = &names.ns;
    params.freeze_prefix(&names.emb);
    params.freeze_prefix(&format!("{ns}.pos_emb"));
    let cutoff = cfg.n_layers - trainable_depth;
    for l in 0..cutoff {
        params.freeze_prefix(&format!("{ns}.l{l}."));
    }
}

const LN_EPS: f64 = 1e-5;

fn cross_attention_block(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &DecoderConfig,
    name: &str,
    x: VarId,
    memory: VarId,
) -> Result<VarId> {
    let dh = cfg.head_dim();
    let g = leaves.get(tape, &format!("{name}.lnc.g"))?;
    let b = leaves.get(tape, &format!("{name}.lnc.b"))?;
    let xn = tape.layer_norm(x, g, b, LN_EPS)?;
    let mut acc: Option<VarId> = None;
    for h in 0..cfg.n_heads {
        let wq = leaves.get(tape, &format!("{name}.cross.wq.h{h}"))?;
        let wk = leaves.get(tape, &format!("{name}.cross.wk.h{h}"))?;
        let wv = leaves.get(tape, &format!("{name}.cross.wv.h{h}"))?;
        let wo = leaves.get(tape, &format!("{name}.cross.wo.h{h}"))?;
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax_rows(scaled);
        let ctx = tape.matmul(probs, v)?;
        let out = tape.matmul(ctx, wo)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, out)?,
            None => out,
        });
    }
    tape.add(x, acc.expect("n_heads >= 1"))
}

/// Build the decoder forward pass and return logits, one row per input
/// position (prefix rows included), vocab-wide columns.
pub fn decoder_logits_graph(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &DecoderConfig,
    names: &DecoderNames,
    prefix_rows: Option<VarId>,
    token_ids: &[usize],
    memory: Option<VarId>,
) -> Result<VarId> {
    if token_ids.is_empty() {
        return Err(Error::EmptyClip("decoder needs at least the BOS token".into()));
    }
    let prefix_len = prefix_rows.map(|p| tape.value(p).rows()).unwrap_or(0);
    let total = prefix_len + token_ids.len();
    if total > cfg.max_len {
        return Err(Error::Config(format!(
            "decoder sequence of {total} rows exceeds the {}-position window",
            cfg.max_len
        )));
    }
    let ns = &names.ns;
    let tok_table = leaves.get(tape, &names.emb)?;
    let pos_table = leaves.get(tape, &format!("{ns}.pos_emb"))?;
    let toks = tape.embed(tok_table, token_ids)?;
    let stacked = match prefix_rows {
        Some(p) => tape.concat_rows(&[p, toks])?,
        None => toks,
    };
    let positions: Vec<usize> = (0..total).collect();
    let pos = tape.embed(pos_table, &positions)?;
    let mut x = tape.add(stacked, pos)?;
    let mask = causal_mask(total);
    for l in 0..cfg.n_layers {
        let name = format!("{ns}.l{l}");
        x = crate::encoder::self_attention_block(tape, leaves, cfg, &name, x, Some(&mask))?;
        if let Some(mem) = memory {
            x = cross_attention_block(tape, leaves, cfg, &name, x, mem)?;
        }
        x = crate::encoder::feed_forward_block(tape, leaves, &name, x)?;
    }
    let g = leaves.get(tape, &format!("{ns}.lnf.g"))?;
    let b = leaves.get(tape, &format!("{ns}.lnf.b"))?;
    let x = tape.layer_norm(x, g, b, LN_EPS)?;
    // weight-tied head: logits = x * tok_emb^T
    tape.matmul_nt(x, tok_table)
}

/// Teacher-forced loss for one target sequence.
///
/// The decoder reads `[prefix, BOS, target...]`; the row at BOS predicts
/// the first target token, each target row predicts its successor, and
/// the last row predicts EOS. Prefix rows are masked out of the loss.
pub fn decoder_loss_graph(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &DecoderConfig,
    names: &DecoderNames,
    prefix_rows: Option<VarId>,
    target_ids: &[usize],
    memory: Option<VarId>,
) -> Result<VarId> {
    let mut input = Vec::with_capacity(target_ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target_ids);
    let prefix_len = prefix_rows.map(|p| tape.value(p).rows()).unwrap_or(0);
    let logits = decoder_logits_graph(tape, leaves, cfg, names, prefix_rows, &input, memory)?;
    let total = prefix_len + input.len();
    let mut targets = vec![0usize; total];
    let mut mask = vec![false; total];
    for (i, tgt) in target_ids.iter().enumerate() {
        targets[prefix_len + i] = *tgt;
        mask[prefix_len + i] = true;
    }
    targets[total - 1] = EOS;
    mask[total - 1] = true;
    tape.cross_entropy(logits, &targets, &mask)
}

/// Decoding controls.
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// 1 samples greedily; k > 1 samples from the k most likely tokens.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 16,
            top_k: 1,
            seed: 0,
        }
    }
}

/// Autoregressive generation. Returns generated token ids without BOS/EOS.
pub fn generate(
    params: &ParamSet,
    cfg: &DecoderConfig,
    names: &DecoderNames,
    prefix_rows: Option<&Matrix>,
    memory: Option<&Matrix>,
    vocab_size: usize,
    opts: &GenerateOptions,
) -> Result<Vec<usize>> {
    if opts.top_k == 0 || opts.top_k > vocab_size {
        return Err(Error::Config(format!(
            "top_k must be in 1..={vocab_size}, got {}",
            opts.top_k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tokens = vec![BOS];
    let prefix_len = prefix_rows.map(|p| p.rows()).unwrap_or(0);
    let mut out = Vec::new();
    for _ in 0..opts.max_new_tokens {
        if prefix_len + tokens.len() >= cfg.max_len {
            break;
        }
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(params);
        let p = prefix_rows.map(|m| tape.leaf(m.clone()));
        let mem = memory.map(|m| tape.leaf(m.clone()));
        let logits = decoder_logits_graph(&mut tape, &mut leaves, cfg, names, p, &tokens, mem)?;
        let lv = tape.value(logits);
        let last = lv.row(lv.rows() - 1);
        let next = pick_token(last, opts.top_k, &mut rng);
        if next == EOS {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

fn pick_token(logits: &[f64], top_k: usize, rng: &mut ChaCha8Rng) -> usize {
    if top_k == 1 {
        return crate::tensor::argmax(logits);
    }
    // rank indices by logit, keep the top k, renormalize, sample
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
    let kept = &order[..top_k];
    let row: Vec<f64> = kept.iter().map(|i| logits[*i]).collect();
    let probs = softmax_rows(&Matrix::row_vec(row));
    let draw: f64 = rng.random();
    let mut cum = 0.0;
    for (slot, p) in probs.data().iter().enumerate() {
        cum += p;
        if draw < cum {
            return kept[slot];
        }
    }
    kept[top_k - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamW;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> DecoderConfig {
        DecoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 16,
        }
    }

    fn setup(vocab: usize) -> (ParamSet, DecoderConfig) {
        let cfg = tiny_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_decoder_params(&mut params, &cfg, vocab, "dec", &mut rng);
        (params, cfg)
    }

    fn names() -> DecoderNames {
        DecoderNames::own("dec")
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert!(m.get(0, 1).is_infinite());
        assert!(m.get(1, 2).is_infinite());
        assert_eq!(m.get(2, 2), 0.0);
    }

    #[test]
    fn logit_shape_covers_prefix_and_tokens() {
        let (params, cfg) = setup(12);
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&params);
        let prefix = tape.leaf(Matrix::zeros(2, 16));
        let mem = tape.leaf(Matrix::zeros(3, 16));
        let logits = decoder_logits_graph(
            &mut tape,
            &mut leaves,
            &cfg,
            &names(),
            Some(prefix),
            &[BOS, 5, 6],
            Some(mem),
        )
        .unwrap();
        assert_eq!(tape.value(logits).shape(), (5, 12));
    }

    #[test]
    fn future_tokens_do_not_leak_into_past_logits() {
        let (params, cfg) = setup(12);
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let mut leaves = LeafMap::new(&params);
            let logits =
                decoder_logits_graph(&mut tape, &mut leaves, &cfg, &names(), None, ids, None)
                    .unwrap();
            tape.value(logits).clone()
        };
        let a = run(&[BOS, 5, 6]);
        let b = run(&[BOS, 5, 7]); // differs only at the last position
        for c in 0..12 {
            assert_eq!(a.get(0, c).to_bits(), b.get(0, c).to_bits());
            assert_eq!(a.get(1, c).to_bits(), b.get(1, c).to_bits());
        }
    }

    #[test]
    fn prefix_changes_the_first_prediction() {
        let (params, cfg) = setup(12);
        let run = |prefix: Matrix| {
            let mut tape = Tape::new();
            let mut leaves = LeafMap::new(&params);
            let p = tape.leaf(prefix);
            let logits = decoder_logits_graph(
                &mut tape,
                &mut leaves,
                &cfg,
                &names(),
                Some(p),
                &[BOS],
                None,
            )
            .unwrap();
            let lv = tape.value(logits);
            lv.row(lv.rows() - 1).to_vec()
        };
        let mut hot = Matrix::zeros(1, 16);
        hot.fill(0.8);
        let a = run(Matrix::zeros(1, 16));
        let b = run(hot);
        assert_ne!(a, b, "soft prefix had no effect on logits");
    }

    #[test]
    fn loss_masks_prefix_positions() {
        // Loss must be identical whether computed with a prefix of zeros
        // via masking or with explicit position accounting; here we just
        // check it is finite and positive and that an empty target errors.
        let (params, cfg) = setup(12);
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&params);
        let prefix = tape.leaf(Matrix::zeros(2, 16));
        let loss = decoder_loss_graph(
            &mut tape,
            &mut leaves,
            &cfg,
            &names(),
            Some(prefix),
            &[5, 6, 7],
            None,
        )
        .unwrap();
        assert!(tape.value(loss).scalar() > 0.0);
    }

    #[test]
    fn overfits_one_sequence() {
        let (mut params, cfg) = setup(12);
        let mut opt = AdamW::new(3e-3, 0.0);
        let target = [5usize, 6, 7, 8];
        for _ in 0..150 {
            let mut tape = Tape::new();
            let mut leaves = LeafMap::new(&params);
            let loss =
                decoder_loss_graph(&mut tape, &mut leaves, &cfg, &names(), None, &target, None)
                    .unwrap();
            tape.backward(loss).unwrap();
            opt.step(&mut params, &tape).unwrap();
        }
        let out = generate(
            &params,
            &cfg,
            &names(),
            None,
            None,
            12,
            &GenerateOptions {
                max_new_tokens: 8,
                top_k: 1,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(out, target.to_vec());
    }

    #[test]
    fn generation_is_deterministic_for_a_seed() {
        let (params, cfg) = setup(12);
        let opts = GenerateOptions {
            max_new_tokens: 6,
            top_k: 3,
            seed: 99,
        };
        let a = generate(&params, &cfg, &names(), None, None, 12, &opts).unwrap();
        let b = generate(&params, &cfg, &names(), None, None, 12, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_k_zero_or_oversized_is_rejected() {
        let (params, cfg) = setup(12);
        for k in [0usize, 13] {
            let err = generate(
                &params,
                &cfg,
                &names(),
                None,
                None,
                12,
                &GenerateOptions {
                    max_new_tokens: 2,
                    top_k: k,
                    seed: 0,
                },
            );
            assert!(err.is_err(), "top_k {k} should be rejected");
        }
    }

    #[test]
    fn freezing_below_depth_one_leaves_top_layer_trainable() {
        let (mut params, cfg) = setup(12);
        freeze_decoder_below(&mut params, &cfg, &names(), 1);
        assert!(params.get("dec.tok_emb").unwrap().frozen);
        assert!(params.get("dec.l0.ff.w1").unwrap().frozen);
        assert!(!params.get("dec.l1.ff.w1").unwrap().frozen);
        assert!(!params.get("dec.lnf.g").unwrap().frozen);
    }

    #[test]
    fn tied_decoder_trains_through_the_shared_table() {
        let cfg = tiny_cfg();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        crate::encoder::init_encoder_params(&mut params, &cfg, 12, "enc", &mut rng);
        init_decoder_params_tied(&mut params, &cfg, "dec", &mut rng);
        assert!(params.get("dec.tok_emb").is_none());
        let tied = DecoderNames::tied("dec", "enc.tok_emb");
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&params);
        let loss =
            decoder_loss_graph(&mut tape, &mut leaves, &cfg, &tied, None, &[5, 6], None).unwrap();
        tape.backward(loss).unwrap();
        // the shared table feeds both the input embedding and the tied
        // head, so it must collect gradient from a decoder-only graph
        let (_, id) = tape
            .param_leaves()
            .iter()
            .find(|(n, _)| n == "enc.tok_emb")
            .cloned()
            .unwrap();
        assert!(tape.grad(id).unwrap().frobenius_norm() > 0.0);
    }
}

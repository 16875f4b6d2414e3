//! Clip-level stage: locate an interaction inside one clip and describe
//! the event around it.
//!
//! For a clip of `t` seconds the stage holds `t` subtitle CLS embeddings
//! and `t` projected frame features. The interaction's visual feature,
//! projected the same way as the frames, queries both sequences; the two
//! weight rows are averaged into one fused attention `A`, and `A` pools
//! frames and subtitles into two soft prefix tokens that steer the
//! decoder. The decoder also cross-attends over the concatenated
//! subtitle and frame rows.
//!
//! Training is teacher forcing on gold descriptions; the fuse mode
//! doubles as the ablation switch (text-only drops visual attention,
//! visual-only drops textual attention, uniform drops both).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decoder::{
    self, freeze_decoder_below, init_decoder_params, init_decoder_params_tied, DecoderConfig,
    DecoderNames, GenerateOptions,
};
use crate::encoder::{self, init_encoder_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::attention::attention_weights_graph;
use crate::tensor::optim::LeafMap;
use crate::tensor::{AdamW, Matrix, ParamSet, Tape, VarId};
use crate::text::Vocabulary;

/// How the textual and visual attention rows combine into `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseMode {
    /// `A = (A_s + A_v) / 2`, the full pipeline.
    Both,
    /// `A = A_s`; the visual attention branch is removed.
    TextOnly,
    /// `A = A_v`; the textual attention branch is removed.
    VisualOnly,
    /// Both branches removed; `A` is a uniform row.
    Uniform,
}

impl FuseMode {
    pub fn uses_text(self) -> bool {
        matches!(self, FuseMode::Both | FuseMode::TextOnly)
    }

    pub fn uses_visual(self) -> bool {
        matches!(self, FuseMode::Both | FuseMode::VisualOnly)
    }
}

/// Clip-stage architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStageCfg {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Raw frame / interaction feature width before projection.
    pub frame_dim: usize,
    pub fuse: FuseMode,
    /// Share the query/key projections between the textual and visual
    /// attention branches (the default); `false` gives the visual branch
    /// its own pair.
    pub share_projections: bool,
    /// Use one token table for the encoder and the decoder (including
    /// its tied output head). On by default: the decoder can then learn
    /// a single copy circuit that surfaces tokens out of encoded
    /// subtitles, instead of one alignment per vocabulary entry.
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_tie() -> bool {
    true
}

impl Default for LocalStageCfg {
    fn default() -> Self {
        LocalStageCfg {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            frame_dim: 32,
            fuse: FuseMode::Both,
            share_projections: true,
            tie_embeddings: true,
        }
    }
}

impl LocalStageCfg {
    fn validate(&self) -> Result<()> {
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder width {} must match decoder width {} (shared prefix and memory)",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        if self.frame_dim == 0 {
            return Err(Error::Config("frame feature width must be positive".into()));
        }
        Ok(())
    }
}

/// Clip-stage model: configuration, vocabulary, and all parameters.
pub struct LocalModel {
    pub cfg: LocalStageCfg,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

impl LocalModel {
    /// Leaf-name scheme for this model's decoder.
    pub fn decoder_names(&self) -> DecoderNames {
        decoder_names(&self.cfg)
    }
}

fn decoder_names(cfg: &LocalStageCfg) -> DecoderNames {
    if cfg.tie_embeddings {
        DecoderNames::tied("dec", "enc.tok_emb")
    } else {
        DecoderNames::own("dec")
    }
}

/// Initialize fresh clip-stage parameters.
pub fn init_local_model(cfg: LocalStageCfg, vocab: Vocabulary, seed: u64) -> Result<LocalModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, &cfg.encoder, vocab.len(), "enc", &mut rng);
    if cfg.tie_embeddings {
        init_decoder_params_tied(&mut params, &cfg.decoder, "dec", &mut rng);
    } else {
        init_decoder_params(&mut params, &cfg.decoder, vocab.len(), "dec", &mut rng);
    }
    let d = cfg.encoder.d_model;
    let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized data")
    };
    params.insert(
        "local.proj.frame",
        normal(&mut rng, cfg.frame_dim, d, 1.0 / (cfg.frame_dim as f64).sqrt()),
    );
    let att_std = 1.0 / (d as f64).sqrt();
    params.insert("local.att.wq", normal(&mut rng, d, d, att_std));
    params.insert("local.att.wk", normal(&mut rng, d, d, att_std));
    params.insert("local.att.wv", normal(&mut rng, d, d, att_std));
    if !cfg.share_projections {
        params.insert("local.att.wq_v", normal(&mut rng, d, d, att_std));
        params.insert("local.att.wk_v", normal(&mut rng, d, d, att_std));
    }
    Ok(LocalModel { cfg, vocab, params })
}

/// Attention of the projected interaction feature over subtitle CLS rows.
pub fn subtitle_attention(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    q: VarId,
    subtitle_cls: VarId,
) -> Result<VarId> {
    let wq = leaves.get(tape, "local.att.wq")?;
    let wk = leaves.get(tape, "local.att.wk")?;
    attention_weights_graph(tape, q, subtitle_cls, wq, wk)
}

/// Attention of the projected interaction feature over projected frames.
pub fn frame_attention(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    share_projections: bool,
    q: VarId,
    frames_proj: VarId,
) -> Result<VarId> {
    let (wq_name, wk_name) = if share_projections {
        ("local.att.wq", "local.att.wk")
    } else {
        ("local.att.wq_v", "local.att.wk_v")
    };
    let wq = leaves.get(tape, wq_name)?;
    let wk = leaves.get(tape, wk_name)?;
    attention_weights_graph(tape, q, frames_proj, wq, wk)
}

/// The two modality weight rows (when their branch is enabled) and the
/// fused row actually used for pooling.
pub struct FusedAttention {
    pub text: Option<VarId>,
    pub visual: Option<VarId>,
    pub fused: VarId,
}

/// Combine modality weights according to the fuse mode.
pub fn fuse_attention(
    tape: &mut Tape,
    mode: FuseMode,
    text: Option<VarId>,
    visual: Option<VarId>,
    t: usize,
) -> Result<VarId> {
    let need = |side: Option<VarId>, what: &str| {
        side.ok_or_else(|| Error::Config(format!("fuse mode needs the {what} attention row")))
    };
    match mode {
        FuseMode::Both => {
            let s = tape.add(need(text, "textual")?, need(visual, "visual")?)?;
            Ok(tape.scale(s, 0.5))
        }
        FuseMode::TextOnly => need(text, "textual"),
        FuseMode::VisualOnly => need(visual, "visual"),
        FuseMode::Uniform => {
            if t == 0 {
                return Err(Error::EmptyClip("attention over zero timesteps".into()));
            }
            let mut row = Matrix::zeros(1, t);
            row.fill(1.0 / t as f64);
            Ok(tape.leaf(row))
        }
    }
}

/// Everything the decoder consumes for one clip.
pub struct LocalForward {
    pub attention: FusedAttention,
    /// Two soft tokens: fused-pooled frames, then fused-pooled subtitles.
    pub prefix: VarId,
    /// Cross-attention memory: subtitle CLS rows then projected frames.
    pub memory: VarId,
}

/// Build the clip forward pass given embedded inputs.
///
/// `subtitle_cls` is t x d, `frames_raw` t x frame_dim, `f_iv` the
/// 1 x frame_dim interaction feature (projected with the same matrix as
/// the frames), and `h_is` the 1 x d pooled embedding of the
/// interaction phrase, which queries the subtitle side.
pub fn local_forward_graph(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &LocalStageCfg,
    subtitle_cls: VarId,
    frames_raw: VarId,
    f_iv: VarId,
    h_is: VarId,
) -> Result<LocalForward> {
    let t = tape.value(frames_raw).rows();
    if tape.value(subtitle_cls).rows() != t {
        return Err(Error::Alignment(format!(
            "{} subtitle rows against {t} frame rows",
            tape.value(subtitle_cls).rows()
        )));
    }
    let proj = leaves.get(tape, "local.proj.frame")?;
    let frames_proj = tape.matmul(frames_raw, proj)?;
    let q_vis = tape.matmul(f_iv, proj)?;
    let text = if cfg.fuse.uses_text() {
        Some(subtitle_attention(tape, leaves, h_is, subtitle_cls)?)
    } else {
        None
    };
    let visual = if cfg.fuse.uses_visual() {
        Some(frame_attention(tape, leaves, cfg.share_projections, q_vis, frames_proj)?)
    } else {
        None
    };
    let fused = fuse_attention(tape, cfg.fuse, text, visual, t)?;
    let wv = leaves.get(tape, "local.att.wv")?;
    let frames_v = tape.matmul(frames_proj, wv)?;
    let subs_v = tape.matmul(subtitle_cls, wv)?;
    let h_v = tape.attend(fused, frames_v)?;
    let h_s = tape.attend(fused, subs_v)?;
    let prefix = tape.concat_rows(&[h_v, h_s])?;
    let memory = tape.concat_rows(&[subtitle_cls, frames_proj])?;
    Ok(LocalForward {
        attention: FusedAttention { text, visual, fused },
        prefix,
        memory,
    })
}

/// One clip-stage training or inference item, fully tokenized.
#[derive(Debug, Clone)]
pub struct LocalInstance {
    pub movie_id: String,
    pub event_id: String,
    pub sub_ids: Vec<Vec<usize>>,
    pub phrase_ids: Vec<usize>,
    pub frames: Matrix,
    pub f_iv: Matrix,
    pub target: Vec<usize>,
    pub planted: Option<usize>,
    pub gold: String,
    pub topic: String,
    pub phrase: String,
    pub subject: String,
    pub object: String,
    /// Precomputed subtitle CLS rows; filled when the encoder is frozen
    /// so training graphs skip the encoder entirely.
    pub cached_cls: Option<Matrix>,
    /// Precomputed phrase CLS row under the same freeze contract.
    pub cached_phrase_cls: Option<Matrix>,
}

/// Collect instances (one per annotated event) for the given movies.
pub fn prepare_local_instances(
    model: &LocalModel,
    corpus: &Corpus,
    movie_ids: &[String],
) -> Result<Vec<LocalInstance>> {
    let mut out = Vec::new();
    for movie_id in movie_ids {
        let movie = corpus.movie(movie_id)?;
        for clip in &movie.clips {
            let frames = corpus.frames(clip)?;
            let inter = corpus.interaction_features(clip)?;
            if frames.cols() != model.cfg.frame_dim {
                return Err(Error::Alignment(format!(
                    "{}/{}: frame width {} does not match the configured {}",
                    movie_id,
                    clip.clip_id,
                    frames.cols(),
                    model.cfg.frame_dim
                )));
            }
            for ev in &clip.events {
                let ia = &clip.interactions[ev.interaction_index];
                out.push(LocalInstance {
                    movie_id: movie_id.clone(),
                    event_id: ev.event_id.clone(),
                    sub_ids: clip
                        .subtitles
                        .iter()
                        .map(|s| model.vocab.encode(s))
                        .collect(),
                    phrase_ids: model.vocab.encode(&ia.phrase),
                    frames: frames.clone(),
                    f_iv: inter.row_matrix(ia.visual_feature_index),
                    target: model.vocab.encode(&ev.description),
                    planted: clip.planted_timestep,
                    gold: ev.description.clone(),
                    topic: ev.topic.clone(),
                    phrase: ia.phrase.clone(),
                    subject: ia.subject.clone(),
                    object: ia.object.clone(),
                    cached_cls: None,
                    cached_phrase_cls: None,
                })
            }
        }
    }
    Ok(out)
}

/// Precompute subtitle CLS rows for every instance. Only valid while the
/// encoder stays frozen; training with a trainable encoder must leave
/// the cache empty so gradients reach it.
pub fn cache_subtitle_cls(model: &LocalModel, instances: &mut [LocalInstance]) -> Result<()> {
    for inst in instances.iter_mut() {
        let mut rows = Vec::with_capacity(inst.sub_ids.len());
        for ids in &inst.sub_ids {
            rows.push(encoder::encode_cls(
                &model.params,
                &model.cfg.encoder,
                "enc",
                ids,
            )?);
        }
        let rows_ref: Vec<Vec<f64>> = rows.iter().map(|m| m.row(0).to_vec()).collect();
        inst.cached_cls = Some(Matrix::from_rows(&rows_ref)?);
        inst.cached_phrase_cls = Some(encoder::encode_cls(
            &model.params,
            &model.cfg.encoder,
            "enc",
            &inst.phrase_ids,
        )?);
    }
    Ok(())
}

/// Build the full clip graph for one instance (encoder included unless
/// the CLS cache is filled).
pub fn instance_forward(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &LocalStageCfg,
    inst: &LocalInstance,
) -> Result<LocalForward> {
    let subtitle_cls = match &inst.cached_cls {
        Some(m) => tape.leaf(m.clone()),
        None => {
            let mut rows = Vec::with_capacity(inst.sub_ids.len());
            for ids in &inst.sub_ids {
                rows.push(encoder::encoder_cls_graph(
                    tape,
                    leaves,
                    &cfg.encoder,
                    "enc",
                    ids,
                )?);
            }
            tape.concat_rows(&rows)?
        }
    };
    let h_is = match &inst.cached_phrase_cls {
        Some(m) => tape.leaf(m.clone()),
        None => encoder::encoder_cls_graph(tape, leaves, &cfg.encoder, "enc", &inst.phrase_ids)?,
    };
    let frames = tape.leaf(inst.frames.clone());
    let f_iv = tape.leaf(inst.f_iv.clone());
    local_forward_graph(tape, leaves, cfg, subtitle_cls, frames, f_iv, h_is)
}

/// Teacher-forced loss for one instance.
pub fn instance_loss(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &LocalStageCfg,
    inst: &LocalInstance,
) -> Result<VarId> {
    instance_loss_with(tape, leaves, cfg, inst, true)
}

/// Loss with an optional hole where the cross-attention memory goes.
/// Training drops the memory on a random fraction of instances so the
/// decoder cannot lean on raw memory rows alone; every signal then has
/// to survive the pooled prefix, which keeps gradient on the attention.
fn instance_loss_with(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &LocalStageCfg,
    inst: &LocalInstance,
    use_memory: bool,
) -> Result<VarId> {
    let fwd = instance_forward(tape, leaves, cfg, inst)?;
    decoder::decoder_loss_graph(
        tape,
        leaves,
        &cfg.decoder,
        &decoder_names(cfg),
        Some(fwd.prefix),
        &inst.target,
        use_memory.then_some(fwd.memory),
    )
}

/// Training controls for the clip stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLocalCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub freeze_encoder: bool,
    /// How many decoder blocks stay trainable, counted from the top.
    pub trainable_decoder_depth: usize,
    /// Fraction of training instances whose decoder memory is hidden,
    /// leaving only the prefix. Inference always sees the full memory.
    #[serde(default)]
    pub memory_dropout: f64,
    pub seed: u64,
}

impl Default for TrainLocalCfg {
    fn default() -> Self {
        TrainLocalCfg {
            steps: 200,
            batch_size: 4,
            lr: 1e-5,
            weight_decay: 0.01,
            freeze_encoder: false,
            trainable_decoder_depth: 5,
            memory_dropout: 0.0,
            seed: 0,
        }
    }
}

/// Per-step mean losses from a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Train the clip stage on the listed movies with teacher forcing.
pub fn train_local(
    model: &mut LocalModel,
    corpus: &Corpus,
    movie_ids: &[String],
    tcfg: &TrainLocalCfg,
) -> Result<TrainLog> {
    if tcfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&tcfg.memory_dropout) {
        return Err(Error::Config(format!(
            "memory dropout must be in [0,1], got {}",
            tcfg.memory_dropout
        )));
    }
    let mut instances = prepare_local_instances(model, corpus, movie_ids)?;
    if instances.is_empty() {
        return Err(Error::Data(
            "no clip-stage training instances in the selected movies".into(),
        ));
    }
    if tcfg.freeze_encoder {
        model.params.freeze_prefix("enc.");
        cache_subtitle_cls(model, &mut instances)?;
    }
    let names = model.decoder_names();
    freeze_decoder_below(
        &mut model.params,
        &model.cfg.decoder,
        &names,
        tcfg.trainable_decoder_depth,
    );
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut cursor = instances.len(); // trigger a shuffle on first use
    let mut losses = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&model.params);
        let mut total: Option<VarId> = None;
        for idx in &batch {
            let use_memory =
                tcfg.memory_dropout == 0.0 || rng.random::<f64>() >= tcfg.memory_dropout;
            let loss = instance_loss_with(
                &mut tape,
                &mut leaves,
                &model.cfg,
                &instances[*idx],
                use_memory,
            )?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let mean = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let loss_value = tape.value(mean).get(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss_value} at step {step}; try a lower learning rate"
            )));
        }
        tape.backward(mean)?;
        opt.step(&mut model.params, &tape)?;
        losses.push(loss_value);
        if step % 50 == 0 {
            log::info!("clip stage step {step}: loss {loss_value:.4}");
        }
    }
    Ok(TrainLog { losses })
}

/// The fused (and per-modality) weights for one clip, as plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub fused: Vec<f64>,
    pub text: Option<Vec<f64>>,
    pub visual: Option<Vec<f64>>,
}

/// Evaluate the clip attention for one instance without generating.
pub fn instance_attention(model: &LocalModel, inst: &LocalInstance) -> Result<AttentionWeights> {
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new(&model.params);
    let fwd = instance_forward(&mut tape, &mut leaves, &model.cfg, inst)?;
    let row = |id: VarId| tape.value(id).row(0).to_vec();
    Ok(AttentionWeights {
        fused: row(fwd.attention.fused),
        text: fwd.attention.text.map(row),
        visual: fwd.attention.visual.map(row),
    })
}

/// One generated event description with its attention diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPrediction {
    pub event_id: String,
    pub prediction: String,
    pub gold: String,
    pub topic: String,
    pub phrase: String,
    pub subject: String,
    pub object: String,
    pub fused_attention: Vec<f64>,
    pub planted_timestep: Option<usize>,
}

/// Generate one event description from a prepared instance.
pub fn generate_event(
    model: &LocalModel,
    inst: &LocalInstance,
    opts: &GenerateOptions,
) -> Result<LocalPrediction> {
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new(&model.params);
    let fwd = instance_forward(&mut tape, &mut leaves, &model.cfg, inst)?;
    let prefix = tape.value(fwd.prefix).clone();
    let memory = tape.value(fwd.memory).clone();
    let fused = tape.value(fwd.attention.fused).row(0).to_vec();
    let ids = decoder::generate(
        &model.params,
        &model.cfg.decoder,
        &model.decoder_names(),
        Some(&prefix),
        Some(&memory),
        model.vocab.len(),
        opts,
    )?;
    Ok(LocalPrediction {
        event_id: inst.event_id.clone(),
        prediction: model.vocab.decode(&ids),
        gold: inst.gold.clone(),
        topic: inst.topic.clone(),
        phrase: inst.phrase.clone(),
        subject: inst.subject.clone(),
        object: inst.object.clone(),
        fused_attention: fused,
        planted_timestep: inst.planted,
    })
}

/// Generate descriptions for every event of the listed movies.
pub fn infer_local(
    model: &LocalModel,
    corpus: &Corpus,
    movie_ids: &[String],
    opts: &GenerateOptions,
) -> Result<Vec<LocalPrediction>> {
    let instances = prepare_local_instances(model, corpus, movie_ids)?;
    instances
        .iter()
        .map(|inst| generate_event(model, inst, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_local_corpus, corpus_vocabulary, LocalCorpusCfg};

    fn tiny_cfg() -> LocalStageCfg {
        LocalStageCfg {
            encoder: EncoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_len: 24,
            },
            decoder: DecoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_len: 24,
            },
            frame_dim: 16,
            fuse: FuseMode::Both,
            share_projections: true,
            tie_embeddings: true,
        }
    }

    fn tiny_corpus() -> Corpus {
        gen_local_corpus(
            &LocalCorpusCfg {
                n_clips: 12,
                n_movies: 3,
                t: 5,
                n_clusters: 4,
                feature_dim: 16,
                noise_sigma: 0.1,
                text_hard_frac: 0.25,
                visual_hard_frac: 0.25,
            },
            41,
        )
        .unwrap()
    }

    fn tiny_model(corpus: &Corpus, fuse: FuseMode) -> LocalModel {
        let vocab = corpus_vocabulary(corpus);
        let mut cfg = tiny_cfg();
        cfg.fuse = fuse;
        init_local_model(cfg, vocab, 7).unwrap()
    }

    fn all_ids(corpus: &Corpus) -> Vec<String> {
        corpus.movies.iter().map(|m| m.movie_id.clone()).collect()
    }

    #[test]
    fn forward_shapes_and_row_stochastic_weights() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus, FuseMode::Both);
        let instances = prepare_local_instances(&model, &corpus, &all_ids(&corpus)).unwrap();
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&model.params);
        let fwd = instance_forward(&mut tape, &mut leaves, &model.cfg, &instances[0]).unwrap();
        let t = instances[0].frames.rows();
        assert_eq!(tape.value(fwd.prefix).shape(), (2, 16));
        assert_eq!(tape.value(fwd.memory).shape(), (2 * t, 16));
        for id in [
            fwd.attention.text.unwrap(),
            fwd.attention.visual.unwrap(),
            fwd.attention.fused,
        ] {
            let row = tape.value(id);
            assert_eq!(row.shape(), (1, t));
            let sum: f64 = row.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
        }
    }

    #[test]
    fn fused_row_is_the_exact_average() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus, FuseMode::Both);
        let instances = prepare_local_instances(&model, &corpus, &all_ids(&corpus)).unwrap();
        for inst in instances.iter().take(4) {
            let w = instance_attention(&model, inst).unwrap();
            let (text, visual) = (w.text.unwrap(), w.visual.unwrap());
            for j in 0..w.fused.len() {
                let expect = (text[j] + visual[j]) * 0.5;
                assert_eq!(w.fused[j].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn single_modality_modes_pass_through() {
        let corpus = tiny_corpus();
        let text_model = tiny_model(&corpus, FuseMode::TextOnly);
        let instances =
            prepare_local_instances(&text_model, &corpus, &all_ids(&corpus)).unwrap();
        let w = instance_attention(&text_model, &instances[0]).unwrap();
        assert!(w.visual.is_none());
        assert_eq!(w.fused, w.text.unwrap());

        let vis_model = tiny_model(&corpus, FuseMode::VisualOnly);
        let w = instance_attention(&vis_model, &instances[0]).unwrap();
        assert!(w.text.is_none());
        assert_eq!(w.fused, w.visual.unwrap());
    }

    #[test]
    fn uniform_mode_spreads_weight_evenly() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus, FuseMode::Uniform);
        let instances = prepare_local_instances(&model, &corpus, &all_ids(&corpus)).unwrap();
        let w = instance_attention(&model, &instances[0]).unwrap();
        assert!(w.text.is_none() && w.visual.is_none());
        let t = w.fused.len();
        for v in &w.fused {
            assert_eq!(*v, 1.0 / t as f64);
        }
    }

    #[test]
    fn fuse_without_required_branch_errors() {
        let mut tape = Tape::new();
        let err = fuse_attention(&mut tape, FuseMode::Both, None, None, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn permuting_timesteps_permutes_attention_bitwise() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus, FuseMode::Both);
        let instances = prepare_local_instances(&model, &corpus, &all_ids(&corpus)).unwrap();
        let inst = &instances[0];
        let t = inst.frames.rows();
        let perm: Vec<usize> = (0..t).rev().collect();
        let mut permuted = inst.clone();
        permuted.sub_ids = perm.iter().map(|j| inst.sub_ids[*j].clone()).collect();
        permuted.frames = Matrix::from_rows(
            &perm.iter().map(|j| inst.frames.row(*j).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let base = instance_attention(&model, inst).unwrap();
        let moved = instance_attention(&model, &permuted).unwrap();
        for (new_pos, old_pos) in perm.iter().enumerate() {
            assert_eq!(
                moved.fused[new_pos].to_bits(),
                base.fused[*old_pos].to_bits()
            );
        }
        // pooled prefix must not change at all
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&model.params);
        let fwd_a = instance_forward(&mut tape, &mut leaves, &model.cfg, inst).unwrap();
        let prefix_a = tape.value(fwd_a.prefix).clone();
        let mut tape = Tape::new();
        let mut leaves = LeafMap::new(&model.params);
        let fwd_b = instance_forward(&mut tape, &mut leaves, &model.cfg, &permuted).unwrap();
        let prefix_b = tape.value(fwd_b.prefix).clone();
        for (a, b) in prefix_a.data().iter().zip(prefix_b.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_runs_and_loss_decreases() {
        let corpus = tiny_corpus();
        let mut model = tiny_model(&corpus, FuseMode::Both);
        let log = train_local(
            &mut model,
            &corpus,
            &all_ids(&corpus),
            &TrainLocalCfg {
                steps: 200,
                batch_size: 4,
                lr: 3e-3,
                weight_decay: 0.01,
                freeze_encoder: true,
                trainable_decoder_depth: 5,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(log.losses.len(), 200);
        assert!(log.losses.iter().all(|l| l.is_finite()));
        let head: f64 = log.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = log.losses[195..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < 0.8 * head,
            "loss failed to drop: head {head:.3} tail {tail:.3}"
        );
    }

    #[test]
    fn zero_lr_training_changes_nothing() {
        let corpus = tiny_corpus();
        let mut model = tiny_model(&corpus, FuseMode::Both);
        let before: Vec<(String, Vec<u64>)> = model
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        train_local(
            &mut model,
            &corpus,
            &all_ids(&corpus),
            &TrainLocalCfg {
                steps: 5,
                batch_size: 2,
                lr: 0.0,
                weight_decay: 0.01,
                freeze_encoder: false,
                trainable_decoder_depth: 5,
                seed: 1,
            },
        )
        .unwrap();
        let after: Vec<(String, Vec<u64>)> = model
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_movie_list_errors() {
        let corpus = tiny_corpus();
        let mut model = tiny_model(&corpus, FuseMode::Both);
        let err = train_local(&mut model, &corpus, &[], &TrainLocalCfg::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn inference_covers_every_event_with_normalized_attention() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus, FuseMode::Both);
        let preds = infer_local(
            &model,
            &corpus,
            &all_ids(&corpus),
            &GenerateOptions::default(),
        )
        .unwrap();
        let n_events: usize = corpus
            .movies
            .iter()
            .flat_map(|m| &m.clips)
            .map(|c| c.events.len())
            .sum();
        assert_eq!(preds.len(), n_events);
        for p in &preds {
            let sum: f64 = p.fused_attention.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.planted_timestep.is_some());
        }
    }

    #[test]
    fn tied_model_has_one_token_table_and_untied_has_two() {
        let corpus = tiny_corpus();
        let vocab = corpus_vocabulary(&corpus);
        let tied = init_local_model(tiny_cfg(), vocab.clone(), 7).unwrap();
        assert!(tied.params.get("enc.tok_emb").is_some());
        assert!(tied.params.get("dec.tok_emb").is_none());
        let mut untied_cfg = tiny_cfg();
        untied_cfg.tie_embeddings = false;
        let untied = init_local_model(untied_cfg, vocab, 7).unwrap();
        assert!(untied.params.get("dec.tok_emb").is_some());
        // both variants must produce a finite loss end to end
        for model in [&tied, &untied] {
            let instances =
                prepare_local_instances(model, &corpus, &all_ids(&corpus)).unwrap();
            let mut tape = Tape::new();
            let mut leaves = LeafMap::new(&model.params);
            let loss = instance_loss(&mut tape, &mut leaves, &model.cfg, &instances[0]).unwrap();
            assert!(tape.value(loss).scalar().is_finite());
        }
    }

    #[test]
    fn frozen_encoder_cache_matches_live_encoder() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus, FuseMode::Both);
        let mut instances =
            prepare_local_instances(&model, &corpus, &all_ids(&corpus)).unwrap();
        let live = instance_attention(&model, &instances[0]).unwrap();
        cache_subtitle_cls(&model, &mut instances).unwrap();
        let cached = instance_attention(&model, &instances[0]).unwrap();
        for (a, b) in live.fused.iter().zip(cached.fused.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

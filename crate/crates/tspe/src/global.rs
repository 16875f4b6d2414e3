//! Movie-level stage: attribute each event to its most associated
//! predecessor and decode the reason behind it.
//!
//! Events are embedded as the encoder CLS of their knowledge-enriched
//! description. For event `i`, the preceding events are prefiltered to
//! the top-K most cosine-similar, one attention row over the survivors
//! weighs them, and the weighted value sum becomes a single soft prefix
//! token for the reason decoder. The decoder additionally cross-attends
//! over all previous event embeddings and the current clip's subtitle
//! rows; frames are never read at this level.
//!
//! The four context switches (`use_kg`, `use_prev_events`,
//! `use_subtitle`, `use_event_prefix`) each remove exactly one source of
//! signal, which is what the ablation runner sweeps.

use std::collections::BTreeMap;

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
use crate::kg::enrich_event;
use crate::tensor::attention::attention_weights_graph;
use crate::tensor::optim::LeafMap;
use crate::tensor::{argmax, cosine, AdamW, Matrix, ParamSet, Tape, VarId};
use crate::text::Vocabulary;

/// Movie-stage architecture and context switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStageCfg {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// How many previous events survive the similarity prefilter.
    pub prefilter_k: usize,
    /// One token table for encoder, decoder, and tied output head.
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
    /// Embed events from knowledge-enriched text; `false` falls back to
    /// the raw descriptions.
    pub use_kg: bool,
    /// Give the decoder access to previous events (attention prefix and
    /// cross-attention memory).
    pub use_prev_events: bool,
    /// Put the current clip's subtitle rows into the memory.
    pub use_subtitle: bool,
    /// Pool the previous events into the soft prefix token; `false`
    /// leaves them reachable through the memory only.
    pub use_event_prefix: bool,
}

fn default_tie() -> bool {
    true
}

impl Default for GlobalStageCfg {
    fn default() -> Self {
        GlobalStageCfg {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            prefilter_k: 10,
            tie_embeddings: true,
            use_kg: true,
            use_prev_events: true,
            use_subtitle: true,
            use_event_prefix: true,
        }
    }
}

impl GlobalStageCfg {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder width {} must match decoder width {} (shared prefix and memory)",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        if self.prefilter_k == 0 {
            return Err(Error::Config("prefilter needs room for at least one event".into()));
        }
        if !self.use_prev_events && !self.use_subtitle {
            return Err(Error::Config(
                "dropping both previous events and subtitles leaves no context to decode from"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Movie-stage model: configuration, vocabulary, and all parameters.
pub struct GlobalModel {
    pub cfg: GlobalStageCfg,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

impl GlobalModel {
    /// Leaf-name scheme for this model's decoder.
    pub fn decoder_names(&self) -> DecoderNames {
        decoder_names(&self.cfg)
    }
}

fn decoder_names(cfg: &GlobalStageCfg) -> DecoderNames {
    if cfg.tie_embeddings {
        DecoderNames::tied("dec", "enc.tok_emb")
    } else {
        DecoderNames::own("dec")
    }
}

/// Initialize fresh movie-stage parameters. The attention projections
/// live under `global.att.*` and are independent of the clip stage.
pub fn init_global_model(cfg: GlobalStageCfg, vocab: Vocabulary, seed: u64) -> Result<GlobalModel> {
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
    let att_std = 1.0 / (d as f64).sqrt();
    let normal = |rng: &mut ChaCha8Rng, std: f64| {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..d * d).map(|_| dist.sample(rng)).collect();
        Matrix::from_vec(d, d, data).expect("sized data")
    };
    params.insert("global.att.wq", normal(&mut rng, att_std));
    params.insert("global.att.wk", normal(&mut rng, att_std));
    params.insert("global.att.wv", normal(&mut rng, att_std));
    Ok(GlobalModel { cfg, vocab, params })
}

/// Keep the indices of the `k` previous events most cosine-similar to
/// the current one, in their original story order. Ties prefer the
/// earlier event; fewer than `k` candidates are all kept.
pub fn prefilter_events(current: &[f64], previous: &Matrix, k: usize) -> Vec<usize> {
    let n = previous.rows();
    if n <= k {
        return (0..n).collect();
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|i| (i, cosine(current, previous.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = scored[..k].iter().map(|(i, _)| *i).collect();
    kept.sort_unstable();
    kept
}

/// One attention row of the current event over the kept previous events.
///
/// An empty candidate list is the no-history signal: the caller should
/// decode against subtitle context alone.
pub fn event_attention(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    h_current: VarId,
    prev_rows: &[VarId],
) -> Result<VarId> {
    if prev_rows.is_empty() {
        return Err(Error::EmptyClip(
            "no previous events to attend over; decode with subtitle context only".into(),
        ));
    }
    let keys = if prev_rows.len() == 1 {
        prev_rows[0]
    } else {
        tape.concat_rows(prev_rows)?
    };
    let wq = leaves.get(tape, "global.att.wq")?;
    let wk = leaves.get(tape, "global.att.wk")?;
    attention_weights_graph(tape, h_current, keys, wq, wk)
}

/// Pool the kept previous events into the single soft prefix token
/// `weights · (prev · W_v)`.
pub fn build_event_prefix(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    weights: VarId,
    prev_rows: &[VarId],
) -> Result<VarId> {
    if prev_rows.is_empty() {
        return Err(Error::EmptyClip("no previous events to pool".into()));
    }
    let prev = if prev_rows.len() == 1 {
        prev_rows[0]
    } else {
        tape.concat_rows(prev_rows)?
    };
    let wv = leaves.get(tape, "global.att.wv")?;
    let values = tape.matmul(prev, wv)?;
    tape.attend(weights, values)
}

/// The current event's attention over its kept predecessors, as plain
/// numbers with the mapping back to story positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAttention {
    /// Row-stochastic weights over `kept_indices`.
    pub weights: Vec<f64>,
    /// Story positions of the kept events, strictly increasing, all
    /// before the current event.
    pub kept_indices: Vec<usize>,
}

impl EventAttention {
    /// Story position of the highest-weighted predecessor.
    pub fn predicted_cause(&self) -> usize {
        self.kept_indices[argmax(&self.weights)]
    }
}

/// One movie-stage training or inference item, fully tokenized.
///
/// `prev_ids` covers every earlier event of the movie in story order,
/// whether or not those events carry reasons themselves.
#[derive(Debug, Clone)]
pub struct GlobalInstance {
    pub movie_id: String,
    pub event_id: String,
    /// Position of this event in the movie's story order.
    pub event_index: usize,
    /// Token ids of the (enriched) current event text.
    pub event_ids: Vec<usize>,
    /// Token ids of the (enriched) texts of all earlier events.
    pub prev_ids: Vec<Vec<usize>>,
    /// Token ids of the current clip's subtitle lines.
    pub sub_ids: Vec<Vec<usize>>,
    /// Gold reason tokens (training target).
    pub target: Vec<usize>,
    pub gold: String,
    /// Story position of the planted cause, when the corpus records one.
    pub planted_cause_index: Option<usize>,
    /// CLS caches, filled only while the encoder stays frozen.
    pub cached_event_cls: Option<Matrix>,
    pub cached_prev_cls: Option<Matrix>,
    pub cached_sub_cls: Option<Matrix>,
}

/// Collect one instance per reason-bearing event of the listed movies.
///
/// `overrides` swaps gold event descriptions for externally produced
/// ones (the end-to-end path feeds clip-stage generations through here);
/// keys are event ids, misses fall back to the annotation.
pub fn prepare_global_instances(
    model: &GlobalModel,
    corpus: &Corpus,
    movie_ids: &[String],
    overrides: Option<&BTreeMap<String, String>>,
) -> Result<Vec<GlobalInstance>> {
    let mut out = Vec::new();
    for movie_id in movie_ids {
        let movie = corpus.movie(movie_id)?;
        let order = movie.ordered_events();
        // embed text per event: enriched or raw, gold or overridden
        let mut texts = Vec::with_capacity(order.len());
        for pos in &order {
            let ev = movie.event(*pos);
            let ia = &movie.clips[pos.0].interactions[ev.interaction_index];
            let description = overrides
                .and_then(|m| m.get(&ev.event_id))
                .unwrap_or(&ev.description);
            let text = if model.cfg.use_kg {
                enrich_event(description, &ia.subject, &ia.object, &corpus.store).enriched_text
            } else {
                description.clone()
            };
            texts.push(text);
        }
        let position_of = |event_id: &str| -> Option<usize> {
            order
                .iter()
                .position(|p| movie.event(*p).event_id == event_id)
        };
        for (i, pos) in order.iter().enumerate() {
            let ev = movie.event(*pos);
            let reason = match &ev.reason {
                Some(r) => r.clone(),
                None => continue,
            };
            let planted = match &ev.planted_cause_event_id {
                Some(id) => Some(position_of(id).ok_or_else(|| {
                    Error::Data(format!(
                        "{movie_id}/{}: planted cause {id} is not an event of this movie",
                        ev.event_id
                    ))
                })?),
                None => None,
            };
            if let Some(c) = planted {
                if c >= i {
                    return Err(Error::Data(format!(
                        "{movie_id}/{}: planted cause at position {c} does not precede {i}",
                        ev.event_id
                    )));
                }
            }
            let clip = &movie.clips[pos.0];
            out.push(GlobalInstance {
                movie_id: movie_id.clone(),
                event_id: ev.event_id.clone(),
                event_index: i,
                event_ids: model.vocab.encode(&texts[i]),
                prev_ids: texts[..i].iter().map(|t| model.vocab.encode(t)).collect(),
                sub_ids: clip
                    .subtitles
                    .iter()
                    .map(|s| model.vocab.encode(s))
                    .collect(),
                target: model.vocab.encode(&reason),
                gold: reason,
                planted_cause_index: planted,
                cached_event_cls: None,
                cached_prev_cls: None,
                cached_sub_cls: None,
            });
        }
    }
    Ok(out)
}

/// Precompute every CLS row the forward pass needs. Only valid while the
/// encoder stays frozen. Repeated texts (an event reappears as context
/// for each of its successors) are encoded once.
pub fn cache_event_cls(model: &GlobalModel, instances: &mut [GlobalInstance]) -> Result<()> {
    let mut memo: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    let mut cls_of = |ids: &Vec<usize>| -> Result<Vec<f64>> {
        if let Some(row) = memo.get(ids) {
            return Ok(row.clone());
        }
        let row = encoder::encode_cls(&model.params, &model.cfg.encoder, "enc", ids)?
            .row(0)
            .to_vec();
        memo.insert(ids.clone(), row.clone());
        Ok(row)
    };
    for inst in instances.iter_mut() {
        inst.cached_event_cls = Some(Matrix::from_rows(&[cls_of(&inst.event_ids)?])?);
        if !inst.prev_ids.is_empty() {
            let rows: Vec<Vec<f64>> = inst
                .prev_ids
                .iter()
                .map(&mut cls_of)
                .collect::<Result<_>>()?;
            inst.cached_prev_cls = Some(Matrix::from_rows(&rows)?);
        }
        let rows: Vec<Vec<f64>> = inst.sub_ids.iter().map(&mut cls_of).collect::<Result<_>>()?;
        inst.cached_sub_cls = Some(Matrix::from_rows(&rows)?);
    }
    Ok(())
}

/// Everything the reason decoder consumes for one event.
pub struct GlobalForward {
    /// Attention over the kept previous events; absent without history
    /// or when the event prefix is switched off.
    pub attention: Option<VarId>,
    pub kept_indices: Vec<usize>,
    /// The soft prefix token, present exactly when `attention` is.
    pub prefix: Option<VarId>,
    /// Cross-attention memory: all previous event rows, then subtitle
    /// rows; absent when both context sources are empty.
    pub memory: Option<VarId>,
}

/// Build the movie-stage graph for one instance (encoder included
/// unless the CLS caches are filled).
pub fn instance_forward(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &GlobalStageCfg,
    inst: &GlobalInstance,
) -> Result<GlobalForward> {
    let prev_rows: Vec<VarId> = if cfg.use_prev_events {
        match &inst.cached_prev_cls {
            Some(m) => (0..m.rows()).map(|i| tape.leaf(m.row_matrix(i))).collect(),
            None => inst
                .prev_ids
                .iter()
                .map(|ids| encoder::encoder_cls_graph(tape, leaves, &cfg.encoder, "enc", ids))
                .collect::<Result<_>>()?,
        }
    } else {
        Vec::new()
    };
    let (attention, kept_indices, prefix) = if cfg.use_event_prefix && !prev_rows.is_empty() {
        let h_current = match &inst.cached_event_cls {
            Some(m) => tape.leaf(m.clone()),
            None => encoder::encoder_cls_graph(tape, leaves, &cfg.encoder, "enc", &inst.event_ids)?,
        };
        let prev_vals: Vec<Vec<f64>> = prev_rows
            .iter()
            .map(|id| tape.value(*id).row(0).to_vec())
            .collect();
        let kept = prefilter_events(
            tape.value(h_current).row(0),
            &Matrix::from_rows(&prev_vals)?,
            cfg.prefilter_k,
        );
        let kept_rows: Vec<VarId> = kept.iter().map(|i| prev_rows[*i]).collect();
        let a = event_attention(tape, leaves, h_current, &kept_rows)?;
        let p = build_event_prefix(tape, leaves, a, &kept_rows)?;
        (Some(a), kept, Some(p))
    } else {
        (None, Vec::new(), None)
    };
    let mut parts: Vec<VarId> = Vec::new();
    if !prev_rows.is_empty() {
        parts.push(tape.concat_rows(&prev_rows)?);
    }
    if cfg.use_subtitle {
        let subs = match &inst.cached_sub_cls {
            Some(m) => tape.leaf(m.clone()),
            None => {
                let rows: Vec<VarId> = inst
                    .sub_ids
                    .iter()
                    .map(|ids| encoder::encoder_cls_graph(tape, leaves, &cfg.encoder, "enc", ids))
                    .collect::<Result<_>>()?;
                tape.concat_rows(&rows)?
            }
        };
        parts.push(subs);
    }
    let memory = match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(tape.concat_rows(&parts)?),
    };
    Ok(GlobalForward {
        attention,
        kept_indices,
        prefix,
        memory,
    })
}

/// Teacher-forced loss on the gold reason for one instance.
pub fn instance_loss(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &GlobalStageCfg,
    inst: &GlobalInstance,
) -> Result<VarId> {
    instance_loss_with(tape, leaves, cfg, inst, true)
}

/// Loss with an optional hole where the cross-attention memory goes.
/// Training drops the memory on a random fraction of instances so the
/// reason has to be decodable from the pooled event prefix, which keeps
/// gradient on the event attention. Events whose only context is the
/// memory (no history, or the prefix switched off) always keep it.
fn instance_loss_with(
    tape: &mut Tape,
    leaves: &mut LeafMap,
    cfg: &GlobalStageCfg,
    inst: &GlobalInstance,
    use_memory: bool,
) -> Result<VarId> {
    let fwd = instance_forward(tape, leaves, cfg, inst)?;
    let memory = if use_memory || fwd.prefix.is_none() {
        fwd.memory
    } else {
        None
    };
    decoder::decoder_loss_graph(
        tape,
        leaves,
        &cfg.decoder,
        &decoder_names(cfg),
        fwd.prefix,
        &inst.target,
        memory,
    )
}

/// Evaluate the event attention for one instance without generating.
/// `None` when the event has no history or the prefix is switched off.
pub fn instance_attention(
    model: &GlobalModel,
    inst: &GlobalInstance,
) -> Result<Option<EventAttention>> {
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new(&model.params);
    let fwd = instance_forward(&mut tape, &mut leaves, &model.cfg, inst)?;
    Ok(fwd.attention.map(|id| EventAttention {
        weights: tape.value(id).row(0).to_vec(),
        kept_indices: fwd.kept_indices,
    }))
}

/// Training controls for the movie stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainGlobalCfg {
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

impl Default for TrainGlobalCfg {
    fn default() -> Self {
        TrainGlobalCfg {
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
pub use crate::local::TrainLog;

/// Train the movie stage on the listed movies with teacher forcing.
/// Events without gold reasons never become instances, so they only
/// appear as context for their successors.
pub fn train_global(
    model: &mut GlobalModel,
    corpus: &Corpus,
    movie_ids: &[String],
    tcfg: &TrainGlobalCfg,
) -> Result<TrainLog> {
    model.cfg.validate()?;
    if tcfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&tcfg.memory_dropout) {
        return Err(Error::Config(format!(
            "memory dropout must be in [0,1], got {}",
            tcfg.memory_dropout
        )));
    }
    let mut instances = prepare_global_instances(model, corpus, movie_ids, None)?;
    if instances.is_empty() {
        return Err(Error::Data(
            "no reason-bearing events in the selected movies".into(),
        ));
    }
    if tcfg.freeze_encoder {
        model.params.freeze_prefix("enc.");
        cache_event_cls(model, &mut instances)?;
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
            let loss = instance_loss(&mut tape, &mut leaves, &model.cfg, &instances[*idx])?;
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
            log::info!("movie stage step {step}: loss {loss_value:.4}");
        }
    }
    Ok(TrainLog { losses })
}

/// One generated reason with its attribution diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrediction {
    pub event_id: String,
    pub prediction: String,
    pub gold: String,
    /// Attention over the kept previous events, when history exists.
    pub attention: Option<Vec<f64>>,
    pub kept_indices: Vec<usize>,
    /// Story position of the highest-weighted predecessor.
    pub predicted_cause_index: Option<usize>,
    pub planted_cause_index: Option<usize>,
}

/// Generate one reason from a prepared instance.
pub fn generate_reason(
    model: &GlobalModel,
    inst: &GlobalInstance,
    opts: &GenerateOptions,
) -> Result<GlobalPrediction> {
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new(&model.params);
    let fwd = instance_forward(&mut tape, &mut leaves, &model.cfg, inst)?;
    let prefix = fwd.prefix.map(|id| tape.value(id).clone());
    let memory = fwd.memory.map(|id| tape.value(id).clone());
    let attention = fwd.attention.map(|id| tape.value(id).row(0).to_vec());
    let ids = decoder::generate(
        &model.params,
        &model.cfg.decoder,
        &model.decoder_names(),
        prefix.as_ref(),
        memory.as_ref(),
        model.vocab.len(),
        opts,
    )?;
    let predicted = attention
        .as_ref()
        .map(|w| fwd.kept_indices[argmax(w)]);
    Ok(GlobalPrediction {
        event_id: inst.event_id.clone(),
        prediction: model.vocab.decode(&ids),
        gold: inst.gold.clone(),
        attention,
        kept_indices: fwd.kept_indices,
        predicted_cause_index: predicted,
        planted_cause_index: inst.planted_cause_index,
    })
}

/// Generate reasons for every reason-bearing event of the listed
/// movies. `overrides` as in [`prepare_global_instances`]: supply
/// clip-stage generations there for the end-to-end path.
pub fn infer_global(
    model: &GlobalModel,
    corpus: &Corpus,
    movie_ids: &[String],
    opts: &GenerateOptions,
    overrides: Option<&BTreeMap<String, String>>,
) -> Result<Vec<GlobalPrediction>> {
    let mut instances = prepare_global_instances(model, corpus, movie_ids, overrides)?;
    cache_event_cls(model, &mut instances)?;
    instances
        .iter()
        .map(|inst| generate_reason(model, inst, opts))
        .collect()
}

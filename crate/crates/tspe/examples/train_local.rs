//! Train the clip stage on a synthetic corpus and watch the fused
//! attention lock onto the planted timestep.
//!
//! Run with `cargo run --release --example train_local`.

use tspe::corpus::{corpus_vocabulary, gen_local_corpus, split_dataset, LocalCorpusCfg};
use tspe::decoder::GenerateOptions;
use tspe::encoder::EncoderConfig;
use tspe::local::{TrainLog, 
    infer_local, init_local_model, instance_attention, prepare_local_instances, train_local,
    FuseMode, LocalModel, LocalStageCfg, TrainLocalCfg,
};
use tspe::tensor::argmax;
use tspe::Result;

fn planted_accuracy(
    model: &LocalModel,
    corpus: &tspe::corpus::Corpus,
    ids: &[String],
    label: &str,
) -> Result<f64> {
    let instances = prepare_local_instances(model, corpus, ids)?;
    let (mut hits, mut text_hits, mut vis_hits) = (0usize, 0usize, 0usize);
    let mut planted_mass = 0.0;
    let mut max_mass = 0.0;
    for inst in &instances {
        let w = instance_attention(model, inst)?;
        let planted = inst.planted.expect("synthetic clips are planted");
        if argmax(&w.fused) == planted {
            hits += 1;
        }
        if w.text.map(|t| argmax(&t) == planted).unwrap_or(false) {
            text_hits += 1;
        }
        if w.visual.map(|v| argmax(&v) == planted).unwrap_or(false) {
            vis_hits += 1;
        }
        planted_mass += w.fused[planted];
        max_mass += w.fused.iter().cloned().fold(f64::MIN, f64::max);
    }
    let n = instances.len() as f64;
    println!(
        "  {label}: fused {:.1}%  text {:.1}%  visual {:.1}%  planted mass {:.2}  mean max {:.2}",
        100.0 * hits as f64 / n,
        100.0 * text_hits as f64 / n,
        100.0 * vis_hits as f64 / n,
        planted_mass / n,
        max_mass / n
    );
    Ok(hits as f64 / n)
}

fn main() -> Result<()> {
    env_logger::init();
    let corpus_cfg = LocalCorpusCfg::default();
    let corpus = gen_local_corpus(&corpus_cfg, 0)?;
    let split = split_dataset(&corpus.movies, (0.7, 0.1, 0.2), 0)?;
    println!(
        "corpus: {} clips over {} movies (train {} / val {} / test {} movies)",
        corpus_cfg.n_clips,
        corpus_cfg.n_movies,
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let vocab = corpus_vocabulary(&corpus);
    let stage_cfg = LocalStageCfg {
        encoder: EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            d_ff: 64,
            max_len: 24,
        },
        decoder: EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            d_ff: 64,
            max_len: 24,
        },
        frame_dim: corpus_cfg.feature_dim,
        fuse: FuseMode::Both,
        share_projections: true,
        tie_embeddings: true,
    };
    let mut model = init_local_model(stage_cfg, vocab, 0)?;

    let untrained = planted_accuracy(&model, &corpus, &split.test, "test ")?;
    println!("untrained planted-timestep accuracy (test): {:.1}%", 100.0 * untrained);

    let tcfg = TrainLocalCfg {
        steps: 500,
        batch_size: 16,
        lr: 3e-3,
        weight_decay: 0.01,
        freeze_encoder: true,
        trainable_decoder_depth: 5,
        seed: 0,
    };
    let started = std::time::Instant::now();
    let mut log = TrainLog { losses: vec![] };
    for round in 0..12 {
        let mut cfg_round = tcfg.clone();
        cfg_round.seed = round as u64;
        let part = train_local(&mut model, &corpus, &split.train, &cfg_round)?;
        log.losses.extend(part.losses);
        planted_accuracy(&model, &corpus, &split.train, "train")?;
        let acc = planted_accuracy(&model, &corpus, &split.test, "test ")?;
        println!(
            "after {} steps: test accuracy {:.1}%  (loss {:.3}, {:.0}s)",
            (round + 1) * tcfg.steps,
            100.0 * acc,
            log.losses.last().unwrap(),
            started.elapsed().as_secs_f64()
        );
    }

    let trained = planted_accuracy(&model, &corpus, &split.test, "test ")?;
    println!("trained planted-timestep accuracy (test): {:.1}%", 100.0 * trained);

    let preds = infer_local(&model, &corpus, &split.test, &GenerateOptions::default())?;
    for p in preds.iter().take(3) {
        println!("\nevent {}", p.event_id);
        println!("  gold:      {}", p.gold);
        println!("  predicted: {}", p.prediction);
        let best = argmax(&p.fused_attention);
        println!(
            "  attention argmax {} vs planted {:?}",
            best, p.planted_timestep
        );
    }
    Ok(())
}

//! Run artifacts: model checkpoints, loss curves, and JSON reports.
//!
//! Every writer here is a pure function of its inputs — no timestamps,
//! no hostnames, no float formatting that depends on locale — so two
//! runs with the same configuration and seed produce byte-identical
//! files. Checkpoints use a small length-prefixed binary layout with the
//! stage configuration embedded as JSON, the vocabulary as a token list,
//! and every parameter as little-endian f64s in name order.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::global::{GlobalModel, GlobalStageCfg};
use crate::local::{LocalModel, LocalStageCfg};
use crate::tensor::{Matrix, ParamSet};
use crate::text::Vocabulary;

const MAGIC: &[u8; 4] = b"TSPM";
const VERSION: u32 = 1;
const STAGE_LOCAL: u8 = 0;
const STAGE_GLOBAL: u8 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

// -- little-endian primitives ----------------------------------------------

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    write_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("model file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| bad(format!("unreasonable length {v} in model file")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| bad("non-UTF8 string in model file"))
    }
}

// -- checkpoint layout ------------------------------------------------------

fn encode_model(stage: u8, cfg_json: &[u8], vocab: &Vocabulary, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(stage);
    write_bytes(&mut out, cfg_json);
    write_u64(&mut out, vocab.len() as u64);
    for tok in vocab.tokens() {
        write_bytes(&mut out, tok.as_bytes());
    }
    write_u64(&mut out, params.len() as u64);
    for (name, param) in params.iter() {
        write_bytes(&mut out, name.as_bytes());
        write_u64(&mut out, param.value.rows() as u64);
        write_u64(&mut out, param.value.cols() as u64);
        for v in param.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_model(buf: &[u8], want_stage: u8) -> Result<(Vec<u8>, Vocabulary, ParamSet)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a model file (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported model file version {version}")));
    }
    let stage = r.take(1)?[0];
    if stage != want_stage {
        let name = |s| if s == STAGE_LOCAL { "clip" } else { "movie" };
        return Err(bad(format!(
            "this is a {}-stage checkpoint, expected {}-stage",
            name(stage),
            name(want_stage)
        )));
    }
    let cfg_json = r.bytes()?.to_vec();
    let n_tokens = r.len()?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(r.string()?);
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let n_params = r.len()?;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let rows = r.len()?;
        let cols = r.len()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("parameter shape overflow in model file"))?;
        let raw = r.take(8 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after model file payload"));
    }
    Ok((cfg_json, vocab, params))
}

/// Write a clip-stage checkpoint.
pub fn save_local_model(path: &Path, model: &LocalModel) -> Result<()> {
    let cfg_json = serde_json::to_vec(&model.cfg)?;
    fs::write(
        path,
        encode_model(STAGE_LOCAL, &cfg_json, &model.vocab, &model.params),
    )?;
    Ok(())
}

/// Read a clip-stage checkpoint.
pub fn load_local_model(path: &Path) -> Result<LocalModel> {
    let buf = read_file(path)?;
    let (cfg_json, vocab, params) = decode_model(&buf, STAGE_LOCAL)?;
    let cfg: LocalStageCfg = serde_json::from_slice(&cfg_json)?;
    Ok(LocalModel { cfg, vocab, params })
}

/// Write a movie-stage checkpoint.
pub fn save_global_model(path: &Path, model: &GlobalModel) -> Result<()> {
    let cfg_json = serde_json::to_vec(&model.cfg)?;
    fs::write(
        path,
        encode_model(STAGE_GLOBAL, &cfg_json, &model.vocab, &model.params),
    )?;
    Ok(())
}

/// Read a movie-stage checkpoint.
pub fn load_global_model(path: &Path) -> Result<GlobalModel> {
    let buf = read_file(path)?;
    let (cfg_json, vocab, params) = decode_model(&buf, STAGE_GLOBAL)?;
    let cfg: GlobalStageCfg = serde_json::from_slice(&cfg_json)?;
    Ok(GlobalModel { cfg, vocab, params })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

// -- text artifacts ---------------------------------------------------------

/// Write per-step losses as a two-column CSV with a header row.
pub fn write_losses_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Serialize any value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Read and deserialize a JSON artifact.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_vocabulary, gen_local_corpus, LocalCorpusCfg};
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::global::init_global_model;
    use crate::local::{init_local_model, FuseMode};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn small_vocab() -> Vocabulary {
        let corpus = gen_local_corpus(
            &LocalCorpusCfg {
                n_clips: 6,
                n_movies: 2,
                t: 4,
                n_clusters: 3,
                feature_dim: 8,
                noise_sigma: 0.1,
                text_hard_frac: 0.0,
                visual_hard_frac: 0.0,
            },
            3,
        )
        .unwrap();
        corpus_vocabulary(&corpus)
    }

    fn small_local() -> LocalModel {
        let cfg = LocalStageCfg {
            encoder: EncoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_len: 24,
            },
            decoder: DecoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_len: 24,
            },
            frame_dim: 8,
            fuse: FuseMode::Both,
            share_projections: false,
            tie_embeddings: true,
        };
        init_local_model(cfg, small_vocab(), 11).unwrap()
    }

    #[test]
    fn local_checkpoint_round_trips_bit_exactly() {
        let dir = tmp();
        let path = dir.path().join("model.bin");
        let model = small_local();
        save_local_model(&path, &model).unwrap();
        let loaded = load_local_model(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.vocab.tokens(), model.vocab.tokens());
        assert_eq!(loaded.params.len(), model.params.len());
        for ((an, ap), (bn, bp)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(an, bn);
            assert_eq!(ap.value.shape(), bp.value.shape());
            for (x, y) in ap.value.data().iter().zip(bp.value.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tmp();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let model = small_local();
        save_local_model(&a, &model).unwrap();
        save_local_model(&b, &model).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn global_checkpoint_round_trips() {
        let dir = tmp();
        let path = dir.path().join("model.bin");
        let cfg = GlobalStageCfg {
            encoder: EncoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_len: 48,
            },
            decoder: DecoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_len: 48,
            },
            ..GlobalStageCfg::default()
        };
        let model = init_global_model(cfg, small_vocab(), 4).unwrap();
        save_global_model(&path, &model).unwrap();
        let loaded = load_global_model(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.params.len(), model.params.len());
    }

    #[test]
    fn stage_mixups_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("model.bin");
        save_local_model(&path, &small_local()).unwrap();
        match load_global_model(&path) {
            Err(err) => {
                assert!(matches!(err, Error::Data(_)), "{err}");
                assert!(err.to_string().contains("clip-stage"));
            }
            Ok(_) => panic!("a clip-stage checkpoint loaded as a movie-stage model"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("model.bin");
        fs::write(&path, b"MEOW").unwrap();
        assert!(matches!(load_local_model(&path), Err(Error::Data(_))));

        save_local_model(&path, &small_local()).unwrap();
        let intact = fs::read(&path).unwrap();

        let mut truncated = intact.clone();
        truncated.truncate(intact.len() / 2);
        fs::write(&path, &truncated).unwrap();
        assert!(matches!(load_local_model(&path), Err(Error::Data(_))));

        let mut padded = intact;
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        assert!(matches!(load_local_model(&path), Err(Error::Data(_))));
    }

    #[test]
    fn losses_csv_layout_is_stable() {
        let dir = tmp();
        let path = dir.path().join("losses.csv");
        write_losses_csv(&path, &[1.5, 0.25]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "step,loss\n0,1.5\n1,0.25\n"
        );
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let dir = tmp();
        let path = dir.path().join("report.json");
        let value = serde_json::json!({"rows": [1, 2, 3], "name": "run"});
        write_json(&path, &value).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        let back: serde_json::Value = read_json(&path).unwrap();
        assert_eq!(back, value);
    }
}

//! Annotation data model, corpus I/O, dataset splitting, and synthetic
//! corpora with planted ground truth.
//!
//! A corpus directory holds one JSON file per movie, TSPF feature files
//! referenced from the clips, and a `triples.jsonl` knowledge store.
//!
//! The two generators exist to make attention quality measurable: the
//! clip generator records which timestep actually carries the interaction
//! (`planted_timestep`), and the movie generator records which earlier
//! event actually caused each reason-bearing event
//! (`planted_cause_event_id`). Both run self-audits so a bad construction
//! fails at generation time, not deep inside a training run.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::kg::{anonymize_event, Relation, Triple, TripleStore};
use crate::tensor::Matrix;
use crate::text::tokenize;

/// One interaction between two characters within a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionAnnotation {
    pub subject: String,
    pub object: String,
    pub phrase: String,
    /// Row into the clip's interaction feature file.
    pub visual_feature_index: usize,
}

/// One annotated event: an interaction plus its topic, optionally with a
/// gold reason and (for synthetic data) the planted cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub event_id: String,
    pub interaction_index: usize,
    pub description: String,
    pub topic: String,
    #[serde(default)]
    pub reason: Option<String>,
    #[serde(default)]
    pub planted_cause_event_id: Option<String>,
}

/// One scene-segmented clip with per-second subtitles and feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub start_s: u32,
    pub end_s: u32,
    pub subtitles: Vec<String>,
    pub frame_feature_file: String,
    pub interaction_feature_file: String,
    pub interactions: Vec<InteractionAnnotation>,
    pub events: Vec<EventAnnotation>,
    #[serde(default)]
    pub planted_timestep: Option<usize>,
}

impl ClipRecord {
    /// Timestep count (one subtitle and one frame per second).
    pub fn t(&self) -> usize {
        (self.end_s - self.start_s) as usize
    }
}

/// One movie: ordered clips plus its character roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovieRecord {
    pub movie_id: String,
    pub characters: Vec<String>,
    pub clips: Vec<ClipRecord>,
}

impl MovieRecord {
    /// All events of the movie in story order as (clip index, event index).
    pub fn ordered_events(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ci, clip) in self.clips.iter().enumerate() {
            for ei in 0..clip.events.len() {
                out.push((ci, ei));
            }
        }
        out
    }

    pub fn event(&self, pos: (usize, usize)) -> &EventAnnotation {
        &self.clips[pos.0].events[pos.1]
    }

    /// Load one movie JSON and validate it, reading referenced feature
    /// files relative to the JSON's directory for alignment checks.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let movie: MovieRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut feats = BTreeMap::new();
        for clip in &movie.clips {
            for file in [&clip.frame_feature_file, &clip.interaction_feature_file] {
                if !feats.contains_key(file) {
                    feats.insert(file.clone(), features::read_tspf(&base.join(file))?);
                }
            }
        }
        validate_movie(&movie, &feats)?;
        Ok(movie)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn validate_movie(movie: &MovieRecord, feats: &BTreeMap<String, Matrix>) -> Result<()> {
    let m = &movie.movie_id;
    let mut prev_end: Option<u32> = None;
    let mut clip_ids = HashSet::new();
    let mut event_order: Vec<&str> = Vec::new();
    for clip in &movie.clips {
        let at = format!("{m}/{}", clip.clip_id);
        if !clip_ids.insert(&clip.clip_id) {
            return Err(Error::Data(format!("{at}: duplicate clip id")));
        }
        if clip.end_s <= clip.start_s {
            return Err(Error::Data(format!(
                "{at}: end_s {} not after start_s {}",
                clip.end_s, clip.start_s
            )));
        }
        if let Some(pe) = prev_end {
            if clip.start_s < pe {
                return Err(Error::Data(format!(
                    "{at}: starts at {} before previous clip ends at {pe}",
                    clip.start_s
                )));
            }
        }
        prev_end = Some(clip.end_s);
        let t = clip.t();
        if clip.subtitles.len() != t {
            return Err(Error::Alignment(format!(
                "{at}: {} subtitles for a {t}-second clip",
                clip.subtitles.len()
            )));
        }
        let frames = feats.get(&clip.frame_feature_file).ok_or_else(|| {
            Error::Data(format!("{at}: missing frame file {}", clip.frame_feature_file))
        })?;
        if frames.rows() != t {
            return Err(Error::Alignment(format!(
                "{at}: frame file {} has {} rows for a {t}-second clip",
                clip.frame_feature_file,
                frames.rows()
            )));
        }
        let inter = feats.get(&clip.interaction_feature_file).ok_or_else(|| {
            Error::Data(format!(
                "{at}: missing interaction feature file {}",
                clip.interaction_feature_file
            ))
        })?;
        for (i, ia) in clip.interactions.iter().enumerate() {
            if ia.phrase.trim().is_empty() {
                return Err(Error::Data(format!("{at}: interaction {i} has empty phrase")));
            }
            if ia.visual_feature_index >= inter.rows() {
                return Err(Error::Alignment(format!(
                    "{at}: interaction {i} feature index {} out of range for {} rows",
                    ia.visual_feature_index,
                    inter.rows()
                )));
            }
        }
        for ev in &clip.events {
            if ev.interaction_index >= clip.interactions.len() {
                return Err(Error::Data(format!(
                    "{at}: event {} names interaction {} of {}",
                    ev.event_id,
                    ev.interaction_index,
                    clip.interactions.len()
                )));
            }
            event_order.push(&ev.event_id);
        }
        if let Some(r) = clip.planted_timestep {
            if r >= t {
                return Err(Error::Data(format!(
                    "{at}: planted timestep {r} out of range for t={t}"
                )));
            }
        }
    }
    // planted causes must name an earlier event of the same movie
    for clip in &movie.clips {
        for ev in &clip.events {
            if let Some(cause) = &ev.planted_cause_event_id {
                let idx_self = event_order.iter().position(|e| *e == ev.event_id);
                let idx_cause = event_order.iter().position(|e| e == cause);
                match (idx_self, idx_cause) {
                    (Some(s), Some(c)) if c < s => {}
                    (_, None) => {
                        return Err(Error::Data(format!(
                            "{m}/{}: planted cause {cause} does not exist",
                            ev.event_id
                        )));
                    }
                    _ => {
                        return Err(Error::Data(format!(
                            "{m}/{}: planted cause {cause} is not an earlier event",
                            ev.event_id
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// A corpus held fully in memory: movies, knowledge store, and the
/// feature matrices keyed by file name.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub movies: Vec<MovieRecord>,
    pub store: TripleStore,
    pub features: BTreeMap<String, Matrix>,
}

impl Corpus {
    pub fn frames(&self, clip: &ClipRecord) -> Result<&Matrix> {
        self.features
            .get(&clip.frame_feature_file)
            .ok_or_else(|| Error::Data(format!("missing feature file {}", clip.frame_feature_file)))
    }

    pub fn interaction_features(&self, clip: &ClipRecord) -> Result<&Matrix> {
        self.features.get(&clip.interaction_feature_file).ok_or_else(|| {
            Error::Data(format!(
                "missing feature file {}",
                clip.interaction_feature_file
            ))
        })
    }

    pub fn movie(&self, movie_id: &str) -> Result<&MovieRecord> {
        self.movies
            .iter()
            .find(|m| m.movie_id == movie_id)
            .ok_or_else(|| Error::Data(format!("no movie {movie_id} in corpus")))
    }

    pub fn validate(&self) -> Result<()> {
        for movie in &self.movies {
            validate_movie(movie, &self.features)?;
        }
        Ok(())
    }

    /// Write the corpus directory: `{movie_id}.json` per movie, all
    /// feature files, and `triples.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for movie in &self.movies {
            movie.save(&dir.join(format!("{}.json", movie.movie_id)))?;
        }
        for (name, m) in &self.features {
            features::write_tspf(&dir.join(name), m)?;
        }
        self.store.save(&dir.join("triples.jsonl"))?;
        Ok(())
    }

    /// Read a corpus directory written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mut movie_paths = Vec::new();
        for entry in fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read corpus dir {}: {e}", dir.display())))?
        {
            let path = entry?.path();
            if path.extension().map(|e| e == "json").unwrap_or(false) {
                movie_paths.push(path);
            }
        }
        movie_paths.sort();
        if movie_paths.is_empty() {
            return Err(Error::Data(format!(
                "no movie JSON files in {}",
                dir.display()
            )));
        }
        let mut movies = Vec::new();
        let mut feats = BTreeMap::new();
        for path in movie_paths {
            let movie = MovieRecord::load(&path)?;
            for clip in &movie.clips {
                for file in [&clip.frame_feature_file, &clip.interaction_feature_file] {
                    if !feats.contains_key(file) {
                        feats.insert(file.clone(), features::read_tspf(&dir.join(file))?);
                    }
                }
            }
            movies.push(movie);
        }
        let store_path = dir.join("triples.jsonl");
        let store = if store_path.exists() {
            TripleStore::load(&store_path)?
        } else {
            TripleStore::builtin()
        };
        Ok(Corpus {
            movies,
            store,
            features: feats,
        })
    }
}

/// Movie-id lists for the three dataset parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "validation" => Ok(&self.validation),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected train, validation, or test"
            ))),
        }
    }
}

/// Split whole movies into train/validation/test.
///
/// Counts come from the largest-remainder method so that, e.g., 51
/// movies at ratios (35/51, 7/51, 9/51) give exactly 35/7/9. Every part
/// with a nonzero ratio receives at least one movie. Deterministic for a
/// given seed.
pub fn split_dataset(
    movies: &[MovieRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {a} {b} {c}"
        )));
    }
    let nonzero = [a, b, c].iter().filter(|r| **r > 0.0).count();
    let n = movies.len();
    if n < nonzero {
        return Err(Error::Config(format!(
            "{n} movies cannot fill {nonzero} nonzero split parts"
        )));
    }
    let mut counts = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    for (i, r) in [a, b, c].iter().enumerate() {
        let quota = r * n as f64;
        counts[i] = quota.floor() as usize;
        remainders.push((i, quota - quota.floor()));
    }
    let assigned: usize = counts.iter().sum();
    remainders.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for k in 0..(n - assigned) {
        counts[remainders[k % 3].0] += 1;
    }
    // guarantee nonzero parts are non-empty by stealing from the largest
    for i in 0..3 {
        if [a, b, c][i] > 0.0 && counts[i] == 0 {
            let biggest = (0..3).max_by_key(|j| counts[*j]).unwrap();
            counts[biggest] -= 1;
            counts[i] += 1;
        }
    }
    let mut ids: Vec<String> = movies.iter().map(|m| m.movie_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train = ids[..counts[0]].to_vec();
    let validation = ids[counts[0]..counts[0] + counts[1]].to_vec();
    let test = ids[counts[0] + counts[1]..].to_vec();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

// ---------------------------------------------------------------------------
// word material for the generators

const NAMES: [&str; 20] = [
    "mira", "liam", "tessa", "owen", "ruby", "eli", "nina", "cole", "ada", "finn", "lena",
    "theo", "isla", "hugo", "vera", "milo", "june", "oskar", "pia", "remy",
];

const VERBS: [&str; 16] = [
    "argues", "waves", "salutes", "comforts", "teases", "warns", "thanks", "scolds",
    "praises", "quizzes", "nudges", "consoles", "briefs", "dares", "greets", "hushes",
];

const ADVERBS: [&str; 16] = [
    "fiercely", "warmly", "stiffly", "gently", "playfully", "sternly", "sweetly", "sharply",
    "loudly", "quietly", "eagerly", "softly", "briskly", "boldly", "shyly", "dryly",
];

const PHRASE_NOUNS: [&str; 16] = [
    "dispute", "welcome", "ceremony", "grief", "prank", "danger", "favor", "mistake",
    "triumph", "puzzle", "detour", "sorrow", "mission", "wager", "arrival", "secret",
];

const CONTENT: [[&str; 6]; 16] = [
    ["harbor", "lantern", "ledger", "compass", "anchor", "tide"],
    ["orchard", "thicket", "meadow", "sapling", "harvest", "furrow"],
    ["violin", "ballad", "chorus", "encore", "melody", "rehearsal"],
    ["courtroom", "verdict", "witness", "gavel", "statute", "appeal"],
    ["bakery", "frosting", "oven", "sourdough", "pastry", "crumb"],
    ["observatory", "comet", "nebula", "telescope", "eclipse", "orbit"],
    ["workshop", "chisel", "lathe", "varnish", "blueprint", "hinge"],
    ["glacier", "summit", "crevasse", "avalanche", "basecamp", "ridge"],
    ["market", "stall", "barter", "copper", "saffron", "caravan"],
    ["library", "margin", "index", "parchment", "archive", "folio"],
    ["stadium", "whistle", "huddle", "scrimmage", "playoff", "jersey"],
    ["garden", "trellis", "compost", "seedling", "mulch", "thorn"],
    ["ferry", "mooring", "deckhand", "buoy", "gangway", "galley"],
    ["circus", "trapeze", "juggler", "ringmaster", "acrobat", "tent"],
    ["mine", "shaft", "pickaxe", "ore", "cavern", "lamp"],
    ["chapel", "steeple", "hymn", "candle", "sermon", "pew"],
];

/// Deterministic pronounceable pseudo-word for index `i`; distinct inputs
/// give distinct words. Used where a corpus needs more unique word
/// material than the curated pools provide (movie-level themes).
pub fn pseudo_word(i: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllable = |k: usize| format!("{}{}", ONSETS[k % 12], VOWELS[(k / 12) % 5]);
    let mut word = String::new();
    let mut rest = i;
    loop {
        word.push_str(&syllable(rest % 60));
        rest /= 60;
        if rest == 0 {
            break;
        }
        rest -= 1; // bijective base-60 so "ba" and "baba" never collide
    }
    word.push('n'); // coda keeps pseudo-words out of the curated pools
    word
}

fn standard_normal_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// clip-level generator (planted timestep)

/// Configuration for the clip-level synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCorpusCfg {
    pub n_clips: usize,
    pub n_movies: usize,
    /// Timesteps per clip.
    pub t: usize,
    /// Interaction/topic clusters to draw from.
    pub n_clusters: usize,
    /// Raw frame feature width.
    pub feature_dim: usize,
    /// Gaussian noise added to the planted frame row.
    pub noise_sigma: f64,
    /// Fraction of clips containing a near-miss subtitle sharing 2 of 3
    /// interaction-phrase tokens.
    pub text_hard_frac: f64,
    /// Fraction of clips whose planted frame row is drawn from an
    /// unrelated cluster, so only the subtitle side identifies it.
    pub visual_hard_frac: f64,
}

impl Default for LocalCorpusCfg {
    fn default() -> Self {
        LocalCorpusCfg {
            n_clips: 500,
            n_movies: 20,
            t: 8,
            n_clusters: 12,
            feature_dim: 32,
            noise_sigma: 0.1,
            text_hard_frac: 0.15,
            visual_hard_frac: 0.15,
        }
    }
}

impl LocalCorpusCfg {
    fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(Error::Config(format!("t must be at least 2, got {}", self.t)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if self.n_clips == 0 || self.n_movies == 0 || self.n_clips < self.n_movies {
            return Err(Error::Config(format!(
                "need clips >= movies >= 1, got {} clips over {} movies",
                self.n_clips, self.n_movies
            )));
        }
        if self.n_clusters < 2 || self.n_clusters > VERBS.len() {
            return Err(Error::Config(format!(
                "cluster count must be in 2..={}, got {}",
                VERBS.len(),
                self.n_clusters
            )));
        }
        if !(0.0..=1.0).contains(&self.text_hard_frac)
            || !(0.0..=1.0).contains(&self.visual_hard_frac)
            || self.text_hard_frac + self.visual_hard_frac > 1.0
        {
            return Err(Error::Config(
                "hard-clip fractions must be in [0,1] and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// Generate a clip corpus where every clip has a planted timestep: the
/// subtitle at that timestep carries all three interaction-phrase tokens
/// plus the topic's content words, and (outside visually hard clips) the
/// frame row there equals the interaction's visual feature plus noise.
pub fn gen_local_corpus(cfg: &LocalCorpusCfg, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    // fixed per-cluster base vectors for distractor frames
    let cluster_base: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| standard_normal_row(&mut rng, cfg.feature_dim))
        .collect();

    let mut movies: Vec<MovieRecord> = (0..cfg.n_movies)
        .map(|m| MovieRecord {
            movie_id: format!("lm{m:03}"),
            characters: (0..4).map(|k| NAMES[(m * 3 + k) % NAMES.len()].to_string()).collect(),
            clips: Vec::new(),
        })
        .collect();
    let mut features = BTreeMap::new();

    for i in 0..cfg.n_clips {
        let m = i % cfg.n_movies;
        let clip_idx = movies[m].clips.len();
        let roster = movies[m].characters.clone();
        let cluster = rng.random_range(0..cfg.n_clusters);
        let r = rng.random_range(0..cfg.t);
        let hard_draw: f64 = rng.random();
        let text_hard = hard_draw < cfg.text_hard_frac;
        let visual_hard = !text_hard && hard_draw < cfg.text_hard_frac + cfg.visual_hard_frac;

        let subj = roster[rng.random_range(0..roster.len())].clone();
        let obj = loop {
            let o = roster[rng.random_range(0..roster.len())].clone();
            if o != subj {
                break o;
            }
        };
        let phrase = format!(
            "{} {} {}",
            VERBS[cluster], ADVERBS[cluster], PHRASE_NOUNS[cluster]
        );
        // the clip's topic: 3 of the cluster's 6 content words
        let mut pool: Vec<&str> = CONTENT[cluster].to_vec();
        pool.shuffle(&mut rng);
        let content: Vec<&str> = pool[..3].to_vec();

        let confuser_pos = if text_hard {
            // a near miss elsewhere in the clip: 2 of 3 phrase tokens
            let mut p = rng.random_range(0..cfg.t);
            while p == r {
                p = rng.random_range(0..cfg.t);
            }
            Some(p)
        } else {
            None
        };

        let mut subtitles = Vec::with_capacity(cfg.t);
        let mut frame_rows = Vec::with_capacity(cfg.t);
        // the interaction's visual feature sits near its cluster's base
        // direction, so attention can learn to read the cluster off it
        let f_iv: Vec<f64> = cluster_base[cluster]
            .iter()
            .map(|v| v + 0.5 * rng.sample::<f64, _>(noise))
            .collect();
        // every line carries a globally unique place tag; the event
        // description quotes the planted line's tag, so describing an
        // event correctly requires actually reading the right line
        let tag = |j: usize| pseudo_word(i * cfg.t + j);
        // every line shares one shape; the planted line stands out only
        // through its relation to the interaction, never through syntax
        for j in 0..cfg.t {
            if j == r {
                subtitles.push(format!(
                    "{subj} {} {} {} {obj} about the {} {} {} at {}",
                    VERBS[cluster],
                    ADVERBS[cluster],
                    PHRASE_NOUNS[cluster],
                    content[0],
                    content[1],
                    content[2],
                    tag(j)
                ));
                let row: Vec<f64> = if visual_hard {
                    // misleading visuals: the frame under the planted
                    // line belongs to some unrelated cluster, with the
                    // same perturbation statistics as every other row
                    let wrong = (cluster + 1 + rng.random_range(0..cfg.n_clusters - 1))
                        % cfg.n_clusters;
                    cluster_base[wrong]
                        .iter()
                        .map(|v| v + 0.5 * rng.sample::<f64, _>(noise))
                        .collect()
                } else {
                    f_iv.iter()
                        .map(|v| v + cfg.noise_sigma * rng.sample::<f64, _>(noise))
                        .collect()
                };
                frame_rows.push(row);
            } else if Some(j) == confuser_pos {
                // near miss: shares verb and adverb but not the phrase
                // noun, and talks about a disjoint topic subset
                let (d1, d2) = (&subj, &obj);
                let far_cluster = (cluster + 1 + rng.random_range(0..cfg.n_clusters - 1))
                    % cfg.n_clusters;
                let mut other: Vec<&str> = pool[3..].to_vec();
                other.shuffle(&mut rng);
                subtitles.push(format!(
                    "{d1} {} {} {} {d2} about the {} {} {} at {}",
                    VERBS[cluster],
                    ADVERBS[cluster],
                    PHRASE_NOUNS[far_cluster],
                    other[0],
                    other[1],
                    other[2],
                    tag(j)
                ));
                let base = &cluster_base[far_cluster];
                // every non-planted row is perturbed at the same 0.5
                // scale the interaction feature itself uses, so no row
                // stands out by perturbation size alone
                frame_rows.push(
                    base.iter()
                        .map(|v| v + 0.5 * rng.sample::<f64, _>(noise))
                        .collect(),
                );
            } else {
                let other_cluster = loop {
                    let c = rng.random_range(0..cfg.n_clusters);
                    if c != cluster {
                        break c;
                    }
                };
                // the same two speakers carry the whole scene: names
                // then shift every line's score equally and cancel in
                // the softmax instead of adding per-line noise
                let (d1, d2) = (&subj, &obj);
                let mut oc: Vec<&str> = CONTENT[other_cluster].to_vec();
                oc.shuffle(&mut rng);
                subtitles.push(format!(
                    "{d1} {} {} {} {d2} about the {} {} {} at {}",
                    VERBS[other_cluster],
                    ADVERBS[other_cluster],
                    PHRASE_NOUNS[other_cluster],
                    oc[0],
                    oc[1],
                    oc[2],
                    tag(j)
                ));
                let base = &cluster_base[other_cluster];
                frame_rows.push(
                    base.iter()
                        .map(|v| v + 0.5 * rng.sample::<f64, _>(noise))
                        .collect(),
                );
            }
        }

        let movie_id = movies[m].movie_id.clone();
        let clip_id = format!("c{clip_idx:03}");
        let frame_file = format!("{movie_id}_{clip_id}.frames.tspf");
        let inter_file = format!("{movie_id}_{clip_id}.inter.tspf");
        features.insert(frame_file.clone(), Matrix::from_rows(&frame_rows)?);
        features.insert(inter_file.clone(), Matrix::from_rows(&[f_iv])?);

        // scene first, interaction second: the decoder must name the
        // place tag and topic before any interaction token gives the
        // cluster away, so the prefix is its only early evidence; the
        // phrase appears contiguously so interaction stripping leaves
        // the topic
        let description = format!(
            "at {} over the {} {} {} {subj} {} {} {} {obj}",
            tag(r),
            content[0],
            content[1],
            content[2],
            VERBS[cluster],
            ADVERBS[cluster],
            PHRASE_NOUNS[cluster]
        );
        let topic = format!(
            "at {} over the {} {} {}",
            tag(r),
            content[0],
            content[1],
            content[2]
        );
        let start_s = (clip_idx * cfg.t) as u32;
        movies[m].clips.push(ClipRecord {
            clip_id: clip_id.clone(),
            start_s,
            end_s: start_s + cfg.t as u32,
            subtitles,
            frame_feature_file: frame_file,
            interaction_feature_file: inter_file,
            interactions: vec![InteractionAnnotation {
                subject: subj,
                object: obj,
                phrase,
                visual_feature_index: 0,
            }],
            events: vec![EventAnnotation {
                event_id: format!("{movie_id}_{clip_id}_e0"),
                interaction_index: 0,
                description,
                topic,
                reason: None,
                planted_cause_event_id: None,
            }],
            planted_timestep: Some(r),
        });
    }

    let corpus = Corpus {
        movies,
        store: TripleStore::builtin(),
        features,
    };
    corpus.validate()?;
    let audit = audit_local_corpus(&corpus)?;
    if audit.unique_overlap_frac < 0.99 {
        return Err(Error::Data(format!(
            "generator audit failed: planted timestep uniquely maximizes phrase overlap on only {:.1}% of clips",
            100.0 * audit.unique_overlap_frac
        )));
    }
    Ok(corpus)
}

/// Generator self-audit results for a clip corpus.
#[derive(Debug, Clone)]
pub struct LocalAudit {
    /// Fraction of clips where the planted subtitle strictly maximizes
    /// token overlap with the interaction phrase.
    pub unique_overlap_frac: f64,
    pub clips: usize,
}

pub fn audit_local_corpus(corpus: &Corpus) -> Result<LocalAudit> {
    let mut unique = 0usize;
    let mut total = 0usize;
    for movie in &corpus.movies {
        for clip in &movie.clips {
            let r = match clip.planted_timestep {
                Some(r) => r,
                None => continue,
            };
            total += 1;
            let phrase: BTreeSet<String> =
                tokenize(&clip.interactions[0].phrase).into_iter().collect();
            let overlap = |text: &str| {
                let toks: BTreeSet<String> = tokenize(text).into_iter().collect();
                phrase.intersection(&toks).count()
            };
            let planted = overlap(&clip.subtitles[r]);
            let best_other = clip
                .subtitles
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != r)
                .map(|(_, s)| overlap(s))
                .max()
                .unwrap_or(0);
            if planted > best_other {
                unique += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no planted clips to audit".into()));
    }
    Ok(LocalAudit {
        unique_overlap_frac: unique as f64 / total as f64,
        clips: total,
    })
}

// ---------------------------------------------------------------------------
// movie-level generator (planted cause)

/// Configuration for the movie-level synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCorpusCfg {
    pub n_movies: usize,
    pub events_per_movie: usize,
    /// Inclusive range of how many events back the planted cause sits.
    pub cause_lag: (usize, usize),
    /// Fraction of non-first events that carry a gold reason.
    pub reason_frac: f64,
    /// Frame feature width (the movie stage never reads frames, but the
    /// schema requires aligned files).
    pub feature_dim: usize,
}

impl Default for GlobalCorpusCfg {
    fn default() -> Self {
        GlobalCorpusCfg {
            n_movies: 12,
            events_per_movie: 8,
            cause_lag: (1, 4),
            reason_frac: 0.8,
            feature_dim: 8,
        }
    }
}

impl GlobalCorpusCfg {
    fn validate(&self) -> Result<()> {
        if self.n_movies == 0 || self.events_per_movie < 2 {
            return Err(Error::Config(
                "need at least 1 movie with 2 events each".into(),
            ));
        }
        if self.cause_lag.0 < 1 || self.cause_lag.0 > self.cause_lag.1 {
            return Err(Error::Config(format!(
                "cause lag range must satisfy 1 <= lo <= hi, got {:?}",
                self.cause_lag
            )));
        }
        if !(0.0..=1.0).contains(&self.reason_frac) {
            return Err(Error::Config(format!(
                "reason fraction must be in [0,1], got {}",
                self.reason_frac
            )));
        }
        Ok(())
    }
}

/// Generate a movie corpus with planted causality.
///
/// Every event gets a globally unique theme (pseudo-word verb plus six
/// nouns), so raw descriptions of any two events are token-disjoint
/// apart from glue words. A reason-bearing event names an earlier event
/// as its cause; the store gains one triple whose template is the
/// anonymized cause and whose tail carries the effect's content words —
/// the bridge that makes cause and effect similar after enrichment.
pub fn gen_global_corpus(cfg: &GlobalCorpusCfg, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = TripleStore::builtin();
    let mut features = BTreeMap::new();
    let mut movies = Vec::with_capacity(cfg.n_movies);
    let mut triple_counter = 0usize;

    for m in 0..cfg.n_movies {
        let movie_id = format!("gm{m:03}");
        let roster: Vec<String> = (0..4)
            .map(|k| NAMES[(m * 5 + k * 2) % NAMES.len()].to_string())
            .collect();
        // theme material per event: verb + 6 nouns, globally unique
        let theme_words: Vec<(String, Vec<String>)> = (0..cfg.events_per_movie)
            .map(|e| {
                let g = m * cfg.events_per_movie + e;
                let verb = pseudo_word(7 * g);
                let nouns = (0..6).map(|k| pseudo_word(7 * g + 1 + k)).collect();
                (verb, nouns)
            })
            .collect();

        struct PlannedEvent {
            subj: String,
            obj: String,
            content: Vec<String>,
            extra: Vec<String>,
            description: String,
            topic: String,
        }
        let mut planned = Vec::with_capacity(cfg.events_per_movie);
        for e in 0..cfg.events_per_movie {
            // one protagonist pair carries the whole movie: name overlap
            // between any two events is then constant, so only the
            // planted content bridge can move a similarity ranking
            let subj = roster[0].clone();
            let obj = roster[1].clone();
            let (verb, nouns) = &theme_words[e];
            let mut order: Vec<usize> = (0..6).collect();
            order.shuffle(&mut rng);
            let content: Vec<String> = order[..3].iter().map(|k| nouns[*k].clone()).collect();
            let extra: Vec<String> = order[3..5].iter().map(|k| nouns[*k].clone()).collect();
            let description = format!(
                "{subj} {verb} {obj} about the {} {} {}",
                content[0], content[1], content[2]
            );
            let topic = format!("about the {} {} {}", content[0], content[1], content[2]);
            planned.push(PlannedEvent {
                subj,
                obj,
                content,
                extra,
                description,
                topic,
            });
        }

        // choose planted causes; each event causes at most one effect so
        // every bridge template stays unique in the store
        let mut used_as_cause = vec![false; cfg.events_per_movie];
        let mut cause_of: Vec<Option<usize>> = vec![None; cfg.events_per_movie];
        for e in 1..cfg.events_per_movie {
            if rng.random::<f64>() >= cfg.reason_frac {
                continue;
            }
            let lo = cfg.cause_lag.0.min(e);
            let hi = cfg.cause_lag.1.min(e);
            if lo < 1 {
                continue;
            }
            let lag0 = rng.random_range(lo..=hi);
            // scan the lag window for an unused cause, nearest to lag0 first
            let mut chosen = None;
            for delta in 0..=(hi - lo) {
                for cand in [lag0.saturating_sub(delta), lag0 + delta] {
                    if cand >= lo && cand <= hi && !used_as_cause[e - cand] {
                        chosen = Some(e - cand);
                        break;
                    }
                }
                if chosen.is_some() {
                    break;
                }
            }
            if let Some(c) = chosen {
                used_as_cause[c] = true;
                cause_of[e] = Some(c);
            }
        }

        let mut clips = Vec::with_capacity(cfg.events_per_movie);
        for e in 0..cfg.events_per_movie {
            let p = &planned[e];
            let clip_id = format!("c{e:03}");
            let event_id = format!("{movie_id}_{clip_id}_e0");
            let (reason, planted_cause, hint) = if e == 0 {
                // subtitle-grounded reason with no history behind it
                let reason = format!(
                    "because they mention the {} {}",
                    p.extra[0], p.extra[1]
                );
                let hint = format!("they mention the {} {}", p.extra[0], p.extra[1]);
                (Some(reason), None, hint)
            } else if let Some(c) = cause_of[e] {
                let cause = &planned[c];
                let reason = format!(
                    "because of the {} {} {}",
                    cause.content[0], cause.content[1], cause.content[2]
                );
                let hint = format!(
                    "{} recalls the {} {}",
                    p.subj, cause.content[0], cause.content[1]
                );
                let cause_event_id = format!("{movie_id}_c{c:03}_e0");
                // bridge triple: anonymized cause template -> effect words
                let anon = anonymize_event(&cause.description, &cause.subj, &cause.obj);
                store.insert(Triple {
                    template: anon.template,
                    relation: Relation::ALL[triple_counter % 9],
                    tail: format!(
                        "may pursue the {} {} {}",
                        p.content[0], p.content[1], p.content[2]
                    ),
                });
                triple_counter += 1;
                (Some(reason), Some(cause_event_id), hint)
            } else {
                (None, None, "the scene settles for a moment".to_string())
            };

            let frame_file = format!("{movie_id}_{clip_id}.frames.tspf");
            let inter_file = format!("{movie_id}_{clip_id}.inter.tspf");
            let frame_rows: Vec<Vec<f64>> = (0..2)
                .map(|_| standard_normal_row(&mut rng, cfg.feature_dim))
                .collect();
            features.insert(frame_file.clone(), Matrix::from_rows(&frame_rows)?);
            features.insert(
                inter_file.clone(),
                Matrix::from_rows(&[standard_normal_row(&mut rng, cfg.feature_dim)])?,
            );

            let start_s = (e * 2) as u32;
            let (verb, _) = &theme_words[e];
            clips.push(ClipRecord {
                clip_id,
                start_s,
                end_s: start_s + 2,
                subtitles: vec![
                    format!(
                        "{} and {} talk about the {} {} {}",
                        p.subj, p.obj, p.content[0], p.content[1], p.content[2]
                    ),
                    hint,
                ],
                frame_feature_file: frame_file,
                interaction_feature_file: inter_file,
                interactions: vec![InteractionAnnotation {
                    subject: p.subj.clone(),
                    object: p.obj.clone(),
                    phrase: format!("{verb} with"),
                    visual_feature_index: 0,
                }],
                events: vec![EventAnnotation {
                    event_id,
                    interaction_index: 0,
                    description: p.description.clone(),
                    topic: p.topic.clone(),
                    reason,
                    planted_cause_event_id: planted_cause,
                }],
                planted_timestep: None,
            });
        }
        movies.push(MovieRecord {
            movie_id,
            characters: roster,
            clips,
        });
    }

    let corpus = Corpus {
        movies,
        store,
        features,
    };
    corpus.validate()?;
    let audit = audit_global_corpus(&corpus)?;
    if audit.bridged_frac < 1.0 {
        return Err(Error::Data(format!(
            "generator audit failed: enrichment bridges only {:.1}% of planted pairs",
            100.0 * audit.bridged_frac
        )));
    }
    Ok(corpus)
}

/// Generator self-audit results for a movie corpus.
#[derive(Debug, Clone)]
pub struct GlobalAudit {
    /// Fraction of planted (cause, effect) pairs whose audit-encoder
    /// cosine rises after enrichment.
    pub bridged_frac: f64,
    pub pairs: usize,
}

/// Audit every planted pair: under the frozen bag-of-words audit
/// encoder, enriching the cause must raise its cosine with the effect.
pub fn audit_global_corpus(corpus: &Corpus) -> Result<GlobalAudit> {
    // wide enough that cross-token interference cannot flip a comparison
    let audit_enc = AuditEncoder::new(4096);
    let mut bridged = 0usize;
    let mut pairs = 0usize;
    for movie in &corpus.movies {
        let order = movie.ordered_events();
        for pos in &order {
            let ev = movie.event(*pos);
            let cause_id = match &ev.planted_cause_event_id {
                Some(c) => c,
                None => continue,
            };
            pairs += 1;
            let cause_pos = order
                .iter()
                .find(|p| movie.event(**p).event_id == *cause_id)
                .ok_or_else(|| Error::Data(format!("planted cause {cause_id} missing")))?;
            let cause = movie.event(*cause_pos);
            let cause_clip = &movie.clips[cause_pos.0];
            let ia = &cause_clip.interactions[cause.interaction_index];
            let enriched = crate::kg::enrich_event(
                &cause.description,
                &ia.subject,
                &ia.object,
                &corpus.store,
            );
            let effect_vec = audit_enc.embed(&ev.description);
            let raw = crate::tensor::cosine(&audit_enc.embed(&cause.description), &effect_vec);
            let inflated =
                crate::tensor::cosine(&audit_enc.embed(&enriched.enriched_text), &effect_vec);
            if inflated > raw {
                bridged += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Data("no planted cause pairs to audit".into()));
    }
    Ok(GlobalAudit {
        bridged_frac: bridged as f64 / pairs as f64,
        pairs,
    })
}

/// Build the token vocabulary over every text field of the corpus,
/// including knowledge-store templates, tails, and relation names, so
/// enriched text and held-out material stay representable.
pub fn corpus_vocabulary(corpus: &Corpus) -> crate::text::Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for movie in &corpus.movies {
        for name in &movie.characters {
            texts.push(name);
        }
        for clip in &movie.clips {
            for line in &clip.subtitles {
                texts.push(line);
            }
            for ia in &clip.interactions {
                texts.push(&ia.subject);
                texts.push(&ia.object);
                texts.push(&ia.phrase);
            }
            for ev in &clip.events {
                texts.push(&ev.description);
                texts.push(&ev.topic);
                if let Some(reason) = &ev.reason {
                    texts.push(reason);
                }
            }
        }
    }
    for triple in corpus.store.triples() {
        texts.push(&triple.template);
        texts.push(&triple.tail);
        texts.push(triple.relation.as_str());
    }
    crate::text::Vocabulary::build(texts)
}

// ---------------------------------------------------------------------------
// frozen audit encoder

/// Training-free text embedder used only by audits: each token hashes to
/// a fixed pseudo-random direction and a text embeds as the sum of its
/// token directions. Independent of the learned encoder by construction.
pub struct AuditEncoder {
    dim: usize,
}

impl AuditEncoder {
    pub fn new(dim: usize) -> Self {
        AuditEncoder { dim }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for tok in tokenize(text) {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&tok) ^ 0x5eed_a0d1_700e_cafe);
            for slot in acc.iter_mut() {
                *slot += rng.sample::<f64, _>(StandardNormal);
            }
        }
        acc
    }
}

/// Stable 64-bit FNV-1a; the std hasher is not guaranteed stable across
/// releases, and audit embeddings must never drift.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_local_cfg() -> LocalCorpusCfg {
        LocalCorpusCfg {
            n_clips: 40,
            n_movies: 8,
            t: 6,
            n_clusters: 8,
            feature_dim: 16,
            noise_sigma: 0.1,
            text_hard_frac: 0.3,
            visual_hard_frac: 0.3,
        }
    }

    fn small_global_cfg() -> GlobalCorpusCfg {
        GlobalCorpusCfg {
            n_movies: 6,
            events_per_movie: 6,
            cause_lag: (1, 3),
            reason_frac: 0.8,
            feature_dim: 8,
        }
    }

    #[test]
    fn local_corpus_is_deterministic() {
        let a = gen_local_corpus(&small_local_cfg(), 7).unwrap();
        let b = gen_local_corpus(&small_local_cfg(), 7).unwrap();
        assert_eq!(a.movies, b.movies);
        let fa: Vec<_> = a.features.values().map(|m| m.data().to_vec()).collect();
        let fb: Vec<_> = b.features.values().map(|m| m.data().to_vec()).collect();
        assert_eq!(fa, fb);
    }

    #[test]
    fn local_corpus_different_seeds_differ() {
        let a = gen_local_corpus(&small_local_cfg(), 7).unwrap();
        let b = gen_local_corpus(&small_local_cfg(), 8).unwrap();
        assert_ne!(a.movies, b.movies);
    }

    #[test]
    fn local_planted_overlap_is_unique_max_everywhere() {
        let corpus = gen_local_corpus(&small_local_cfg(), 3).unwrap();
        let audit = audit_local_corpus(&corpus).unwrap();
        assert_eq!(audit.clips, 40);
        assert!(audit.unique_overlap_frac >= 0.99, "{audit:?}");
    }

    #[test]
    fn zero_sigma_plants_the_exact_interaction_feature() {
        let mut cfg = small_local_cfg();
        cfg.noise_sigma = 0.0;
        cfg.visual_hard_frac = 0.0;
        cfg.text_hard_frac = 0.0;
        let corpus = gen_local_corpus(&cfg, 5).unwrap();
        for movie in &corpus.movies {
            for clip in &movie.clips {
                let r = clip.planted_timestep.unwrap();
                let frames = corpus.frames(clip).unwrap();
                let inter = corpus.interaction_features(clip).unwrap();
                assert_eq!(frames.row(r), inter.row(0), "{}", clip.clip_id);
            }
        }
    }

    #[test]
    fn invalid_local_cfg_is_rejected() {
        let mut cfg = small_local_cfg();
        cfg.t = 1;
        assert!(gen_local_corpus(&cfg, 0).is_err());
        let mut cfg = small_local_cfg();
        cfg.noise_sigma = -0.5;
        assert!(gen_local_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn corpus_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_local_corpus(&small_local_cfg(), 11).unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.movies, corpus.movies);
        assert_eq!(back.store.triples(), corpus.store.triples());
        for (name, m) in &corpus.features {
            // values pass through f32 storage
            let restored = back.features.get(name).unwrap();
            for (a, b) in m.data().iter().zip(restored.data().iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn movie_with_wrong_frame_rows_fails_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_local_corpus(&small_local_cfg(), 2).unwrap();
        corpus.save(dir.path()).unwrap();
        // truncate one frame file to the wrong row count
        let clip = &corpus.movies[0].clips[0];
        let frames = corpus.frames(clip).unwrap();
        let chopped = Matrix::from_rows(
            &(0..frames.rows() - 1)
                .map(|r| frames.row(r).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        features::write_tspf(&dir.path().join(&clip.frame_feature_file), &chopped).unwrap();
        let err = MovieRecord::load(&dir.path().join(format!("{}.json", corpus.movies[0].movie_id)))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&clip.clip_id), "{msg}");
        assert!(msg.contains("rows"), "{msg}");
    }

    #[test]
    fn split_sizes_use_largest_remainder() {
        let movies: Vec<MovieRecord> = (0..51)
            .map(|i| MovieRecord {
                movie_id: format!("m{i:03}"),
                characters: vec![],
                clips: vec![],
            })
            .collect();
        let split =
            split_dataset(&movies, (35.0 / 51.0, 7.0 / 51.0, 9.0 / 51.0), 0).unwrap();
        assert_eq!(split.train.len(), 35);
        assert_eq!(split.validation.len(), 7);
        assert_eq!(split.test.len(), 9);
        // disjoint and exhaustive
        let mut all: Vec<&String> = split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 51);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let movies: Vec<MovieRecord> = (0..10)
            .map(|i| MovieRecord {
                movie_id: format!("m{i}"),
                characters: vec![],
                clips: vec![],
            })
            .collect();
        let a = split_dataset(&movies, (0.6, 0.2, 0.2), 4).unwrap();
        let b = split_dataset(&movies, (0.6, 0.2, 0.2), 4).unwrap();
        let c = split_dataset(&movies, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_movies_for_nonzero_parts_errors() {
        let movies: Vec<MovieRecord> = (0..2)
            .map(|i| MovieRecord {
                movie_id: format!("m{i}"),
                characters: vec![],
                clips: vec![],
            })
            .collect();
        assert!(split_dataset(&movies, (0.4, 0.3, 0.3), 0).is_err());
    }

    #[test]
    fn bad_ratios_error() {
        let movies = vec![MovieRecord {
            movie_id: "m0".into(),
            characters: vec![],
            clips: vec![],
        }];
        assert!(split_dataset(&movies, (0.5, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn global_corpus_is_deterministic() {
        let a = gen_global_corpus(&small_global_cfg(), 13).unwrap();
        let b = gen_global_corpus(&small_global_cfg(), 13).unwrap();
        assert_eq!(a.movies, b.movies);
        assert_eq!(a.store.triples(), b.store.triples());
    }

    #[test]
    fn global_corpus_audit_bridges_every_pair() {
        let corpus = gen_global_corpus(&small_global_cfg(), 1).unwrap();
        let audit = audit_global_corpus(&corpus).unwrap();
        assert!(audit.pairs > 10, "expected a healthy pair count, got {}", audit.pairs);
        assert_eq!(audit.bridged_frac, 1.0);
    }

    #[test]
    fn cause_lag_of_one_means_immediate_predecessor() {
        let mut cfg = small_global_cfg();
        cfg.cause_lag = (1, 1);
        cfg.reason_frac = 1.0;
        let corpus = gen_global_corpus(&cfg, 9).unwrap();
        for movie in &corpus.movies {
            let order = movie.ordered_events();
            for (i, pos) in order.iter().enumerate() {
                let ev = movie.event(*pos);
                if let Some(cause) = &ev.planted_cause_event_id {
                    let cause_idx = order
                        .iter()
                        .position(|p| movie.event(*p).event_id == *cause)
                        .unwrap();
                    assert_eq!(cause_idx + 1, i);
                }
            }
        }
    }

    #[test]
    fn cause_and_effect_descriptions_are_token_disjoint_apart_from_glue() {
        let corpus = gen_global_corpus(&small_global_cfg(), 21).unwrap();
        let glue: BTreeSet<&str> = ["about", "the"].into_iter().collect();
        for movie in &corpus.movies {
            let order = movie.ordered_events();
            for pos in &order {
                let ev = movie.event(*pos);
                let Some(cause_id) = &ev.planted_cause_event_id else {
                    continue;
                };
                let cause_pos = order
                    .iter()
                    .find(|p| movie.event(**p).event_id == *cause_id)
                    .unwrap();
                let cause = movie.event(*cause_pos);
                let a: BTreeSet<String> = tokenize(&ev.description)
                    .into_iter()
                    .filter(|t| !glue.contains(t.as_str()))
                    .collect();
                let b: BTreeSet<String> = tokenize(&cause.description)
                    .into_iter()
                    .filter(|t| !glue.contains(t.as_str()))
                    .collect();
                let shared: Vec<&String> = a.intersection(&b).collect();
                // only roster names may repeat between the two
                for tok in shared {
                    assert!(
                        movie.characters.contains(tok),
                        "non-name token {tok} shared between cause and effect"
                    );
                }
            }
        }
    }

    #[test]
    fn first_event_reasons_are_subtitle_grounded() {
        let corpus = gen_global_corpus(&small_global_cfg(), 2).unwrap();
        for movie in &corpus.movies {
            let clip = &movie.clips[0];
            let reason = clip.events[0].reason.as_ref().unwrap();
            let reason_tokens: Vec<String> = tokenize(reason)
                .into_iter()
                .filter(|t| t != "because")
                .collect();
            let sub_tokens: BTreeSet<String> =
                tokenize(&clip.subtitles.join(" ")).into_iter().collect();
            for tok in reason_tokens {
                assert!(sub_tokens.contains(&tok), "{tok} not in subtitles");
            }
        }
    }

    #[test]
    fn pseudo_words_are_unique_and_lowercase_alpha() {
        let mut seen = HashSet::new();
        for i in 0..5000 {
            let w = pseudo_word(i);
            assert!(w.chars().all(|c| c.is_ascii_lowercase()), "{w}");
            assert!(seen.insert(w), "collision at {i}");
        }
    }

    #[test]
    fn audit_encoder_is_stable_and_order_insensitive() {
        let enc = AuditEncoder::new(32);
        let a = enc.embed("harbor lantern ledger");
        let b = enc.embed("ledger harbor lantern");
        let c = enc.embed("harbor lantern ledger");
        assert_eq!(a, c);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let d = enc.embed("violin ballad chorus");
        let sim = crate::tensor::cosine(&a, &d);
        assert!(sim.abs() < 0.5, "disjoint texts too similar: {sim}");
    }
}

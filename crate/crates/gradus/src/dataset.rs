//! Dataset manifests, corpus validation and a synthetic-corpus generator.
//!
//! Real collections are consumed only through the manifest adapter; the
//! synthetic generator exists so the whole pipeline is testable at desk
//! scale with a controllable latent difficulty axis: harder classes get
//! denser columns, wider pitch spans and more simultaneous noteheads.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootleg::{self, BootlegScore, Column, STAFF_POSITIONS};
use crate::eval;
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest is not valid JSON: {0}")]
    Parse(String),
    #[error("manifest declares {0} classes; at least 1 required")]
    NoClasses(usize),
    #[error("piece `{piece_id}` has label {label}, out of range for {k} classes")]
    LabelOutOfRange {
        piece_id: String,
        label: usize,
        k: usize,
    },
    #[error("duplicate piece id `{0}`")]
    DuplicatePieceId(String),
    #[error("invalid synthetic parameters: {0}")]
    BadSynthParams(String),
    #[error(transparent)]
    Bootleg(#[from] bootleg::BootlegError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PieceEntry {
    pub piece_id: String,
    /// Path to the piece's `.bsc`, relative to the manifest file.
    pub path: String,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composer: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub pieces: Vec<PieceEntry>,
    /// Directory the piece paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &PieceEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pieces.iter().map(|p| p.label).collect()
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes == 0 {
            return Err(DatasetError::NoClasses(0));
        }
        let mut seen = BTreeSet::new();
        for piece in &self.pieces {
            if piece.label >= self.num_classes {
                return Err(DatasetError::LabelOutOfRange {
                    piece_id: piece.piece_id.clone(),
                    label: piece.label,
                    k: self.num_classes,
                });
            }
            if !seen.insert(piece.piece_id.clone()) {
                return Err(DatasetError::DuplicatePieceId(piece.piece_id.clone()));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse(e.to_string()))?;
    manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(
    manifest: &DatasetManifest,
    path: impl AsRef<Path>,
) -> Result<(), DatasetError> {
    let json =
        serde_json::to_string_pretty(manifest).map_err(|e| DatasetError::Parse(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Controls of the synthetic difficulty axis. With all gains zero every
/// class draws from the same distribution; positive gains make notehead
/// density, pitch span and chord size grow monotonically with the class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_pieces: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub w_min: usize,
    pub w_max: usize,
    pub density_gain: f64,
    pub range_gain: f64,
    pub polyphony_gain: f64,
    /// Probability of perturbing a label by one level.
    pub label_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_pieces: 100,
            num_classes: 3,
            seed: 0,
            w_min: 32,
            w_max: 96,
            density_gain: 2.0,
            range_gain: 1.0,
            polyphony_gain: 1.0,
            label_noise: 0.0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.n_pieces == 0 {
            return Err(DatasetError::BadSynthParams("n_pieces must be > 0".into()));
        }
        if self.num_classes == 0 {
            return Err(DatasetError::BadSynthParams("num_classes must be > 0".into()));
        }
        if self.w_min < 1 || self.w_max < self.w_min {
            return Err(DatasetError::BadSynthParams(
                "need 1 <= w_min <= w_max".into(),
            ));
        }
        if self.density_gain < 0.0 || self.range_gain < 0.0 || self.polyphony_gain < 0.0 {
            return Err(DatasetError::BadSynthParams("gains must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(DatasetError::BadSynthParams(
                "label_noise must be in [0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// Difficulty of class `c` normalized to [0, 1].
fn axis(c: usize, k: usize) -> f64 {
    if k <= 1 {
        0.0
    } else {
        c as f64 / (k - 1) as f64
    }
}

/// Generates one piece of class `class` from its own seeded stream.
pub fn synth_score(params: &SynthParams, piece_seed: u64, class: usize) -> BootlegScore {
    let mut rng = rng::derive(params.seed, piece_seed.wrapping_add(0x51E9));
    let u = axis(class, params.num_classes);

    let w = params.w_min + rng::uniform_usize(&mut rng, params.w_max - params.w_min + 1);
    // Probability that a column sounds at all grows with density; the
    // asymptotic form stays strictly monotone in u for any positive gain
    // instead of saturating at a hard cap.
    let p_sound = 0.25 + 0.7 * (1.0 - (-0.5 * params.density_gain * u).exp());
    // Window of reachable staff positions widens with range.
    let center = STAFF_POSITIONS as f64 / 2.0;
    let half_span = 5.0 + params.range_gain * u * (center - 6.0);
    let lo = (center - half_span).max(0.0) as usize;
    let hi = ((center + half_span) as usize).min(STAFF_POSITIONS - 1);
    // Simultaneous noteheads per sounding column.
    let chord_rate = 0.8 * params.polyphony_gain * u;

    let columns: Vec<Column> = (0..w)
        .map(|_| {
            let mut col = Column::EMPTY;
            if rng::bernoulli(&mut rng, p_sound) {
                let notes = 1 + rng::poisson(&mut rng, chord_rate);
                for _ in 0..notes {
                    col.set(lo + rng::uniform_usize(&mut rng, hi - lo + 1));
                }
            }
            col
        })
        .collect();
    BootlegScore::new(format!("synth_{piece_seed:05}"), columns)
}

/// Label assignment before noise: classes cycle so counts stay balanced.
fn synth_label(params: &SynthParams, i: usize, rng: &mut rng::Rng) -> (usize, usize) {
    let clean = i % params.num_classes;
    let mut label = clean;
    if params.label_noise > 0.0 && rng::bernoulli(rng, params.label_noise) {
        let up = rng::bernoulli(rng, 0.5);
        label = if up {
            (clean + 1).min(params.num_classes - 1)
        } else {
            clean.saturating_sub(1)
        };
    }
    (clean, label)
}

/// In-memory corpus: (score, noisy label) pairs plus clean class for
/// generator-side bookkeeping.
pub struct SynthCorpus {
    pub pieces: Vec<(BootlegScore, usize)>,
    pub clean_classes: Vec<usize>,
}

pub fn synth_corpus(params: &SynthParams) -> Result<SynthCorpus, DatasetError> {
    params.validate()?;
    let mut label_rng = rng::derive(params.seed, 0x1A8E1);
    let mut pieces = Vec::with_capacity(params.n_pieces);
    let mut clean_classes = Vec::with_capacity(params.n_pieces);
    for i in 0..params.n_pieces {
        let (clean, label) = synth_label(params, i, &mut label_rng);
        let score = synth_score(params, i as u64, clean);
        pieces.push((score, label));
        clean_classes.push(clean);
    }
    Ok(SynthCorpus {
        pieces,
        clean_classes,
    })
}

/// Writes a synthetic corpus to `out_dir` as `.bsc` files plus
/// `manifest.json`; byte-identical across runs for the same params.
pub fn synth_generate(
    params: &SynthParams,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let corpus = synth_corpus(params)?;
    let mut entries = Vec::with_capacity(corpus.pieces.len());
    for (score, label) in &corpus.pieces {
        let file = format!("{}.bsc", score.piece_id);
        bootleg::write_bsc(score, out_dir.join(&file))?;
        entries.push(PieceEntry {
            piece_id: score.piece_id.clone(),
            path: file,
            label: *label,
            composer: None,
        });
    }
    let manifest = DatasetManifest {
        name: format!("synth-k{}-seed{}", params.num_classes, params.seed),
        num_classes: params.num_classes,
        pieces: entries,
        base_dir: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Dataset health report in the column layout of the corpus table:
/// pieces, per-class counts, AIR, noteheads, plus any unreadable files.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetReport {
    pub name: String,
    pub piece_count: usize,
    pub per_class: Vec<usize>,
    pub air: Option<f64>,
    pub total_noteheads: u64,
    pub broken: Vec<BrokenPiece>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BrokenPiece {
    pub piece_id: String,
    pub error: String,
}

/// Reads every referenced `.bsc` and aggregates; unreadable files are
/// reported, never thrown.
pub fn validate_dataset(manifest: &DatasetManifest) -> DatasetReport {
    let mut per_class = vec![0usize; manifest.num_classes];
    let mut total_noteheads = 0u64;
    let mut broken = Vec::new();
    let mut labels = Vec::new();
    for entry in &manifest.pieces {
        match bootleg::read_bsc(manifest.resolve(entry)) {
            Ok(score) => {
                per_class[entry.label] += 1;
                labels.push(entry.label);
                total_noteheads += score.noteheads();
            }
            Err(e) => broken.push(BrokenPiece {
                piece_id: entry.piece_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let air = eval::air(&labels, manifest.num_classes).ok();
    DatasetReport {
        name: manifest.name.clone(),
        piece_count: labels.len(),
        per_class,
        air,
        total_noteheads,
        broken,
    }
}

/// Loads every piece of a manifest; errors on the first unreadable file.
pub fn load_scores(
    manifest: &DatasetManifest,
) -> Result<Vec<(String, BootlegScore, usize)>, DatasetError> {
    let mut out = Vec::with_capacity(manifest.pieces.len());
    for entry in &manifest.pieces {
        let score = bootleg::read_bsc(manifest.resolve(entry))?;
        out.push((entry.piece_id.clone(), score, entry.label));
    }
    Ok(out)
}

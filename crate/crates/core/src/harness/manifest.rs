//! Line-delimited JSON manifest plus one array file per corpus.
//!
//! Each manifest line is one record with the fields `id`, `speaker`,
//! `tokens`, `p`, `t` and `arrays`, in that order. `arrays` names the array
//! file (relative to the manifest) holding `feat/<id>` (`[T, d_a]`) and
//! `sig/<id>` (`[T, r]`). The array file also stores `meta.synth`, the
//! generator configuration needed to rebuild the oracle templates.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{gen_utterances, SynthConfig, Templates, Utterance};
use crate::aligner::{filter_alignment, FilterConfig, FilterDecision};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u32,
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub p: Vec<usize>,
    pub t: usize,
    pub arrays: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub fn feature_key(id: u32) -> String {
    format!("feat/{id}")
}

pub fn signal_key(id: u32) -> String {
    format!("sig/{id}")
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, id: u32) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Checks every record against the arrays: shapes match `t` and every
    /// alignment is valid and passes the filter.
    pub fn validate(&self, arrays: &Checkpoint) -> Result<()> {
        self.records.iter().try_for_each(|r| r.validate(arrays))
    }
}

impl ManifestRecord {
    pub fn validate(&self, arrays: &Checkpoint) -> Result<()> {
        crate::masks::validate_positions(&self.p, self.t)?;
        if self.p.len() != self.tokens.len() {
            return Err(Error::InvalidAlignment(format!(
                "utterance {}: {} positions, {} tokens",
                self.id,
                self.p.len(),
                self.tokens.len()
            )));
        }
        let feat = arrays.require(&feature_key(self.id))?;
        let sig = arrays.require(&signal_key(self.id))?;
        if feat.rows() != self.t || sig.rows() != self.t {
            return Err(Error::Format(format!(
                "utterance {}: arrays do not have {} frames",
                self.id, self.t
            )));
        }
        if let FilterDecision::Drop(why) = filter_alignment(&self.p, self.t, &FilterConfig::default()) {
            return Err(Error::InvalidAlignment(format!(
                "utterance {} fails the {why} filter",
                self.id
            )));
        }
        Ok(())
    }
}

fn synth_meta(c: &SynthConfig) -> Tensor<f32> {
    let seed: Vec<f32> = (0..4).map(|k| ((c.seed >> (16 * k)) & 0xffff) as f32).collect();
    let mut v = vec![
        c.vocab as f32,
        c.speakers as f32,
        c.d_a as f32,
        c.max_run as f32,
        c.max_gap as f32,
        c.min_tokens as f32,
        c.max_tokens as f32,
        c.r as f32,
        c.noise as f32,
    ];
    v.extend(seed);
    Tensor::vector(v)
}

/// Stores the generator configuration in an arrays file.
pub fn write_synth_config(arrays: &mut Checkpoint, config: &SynthConfig) {
    arrays.insert("meta.synth", synth_meta(config));
}

/// Generator configuration stored in an arrays file.
pub fn read_synth_config(arrays: &Checkpoint) -> Result<SynthConfig> {
    let t = arrays.require("meta.synth")?;
    let v = t.data();
    if v.len() != 13 {
        return Err(Error::Format("meta.synth must hold 13 values".into()));
    }
    let u = |i: usize| v[i] as usize;
    let seed = (0..4).fold(0u64, |acc, k| acc | ((v[9 + k] as u64) << (16 * k)));
    Ok(SynthConfig {
        vocab: u(0),
        speakers: u(1),
        d_a: u(2),
        max_run: u(3),
        max_gap: u(4),
        min_tokens: u(5),
        max_tokens: u(6),
        r: u(7),
        noise: v[8] as f64,
        seed,
    })
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub templates: Templates,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn generate(config: &SynthConfig, first_id: u32, n: usize) -> Result<Self> {
        let templates = Templates::new(config)?;
        let utterances = gen_utterances(&templates, first_id, n);
        Ok(Self { templates, utterances })
    }

    pub fn manifest(&self, arrays_name: &str) -> Manifest {
        Manifest {
            records: self
                .utterances
                .iter()
                .map(|u| ManifestRecord {
                    id: u.id,
                    speaker: u.speaker,
                    tokens: u.tokens.clone(),
                    p: u.positions.clone(),
                    t: u.frames(),
                    arrays: arrays_name.to_string(),
                })
                .collect(),
        }
    }

    pub fn arrays(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        write_synth_config(&mut ck, &self.templates.config);
        for u in &self.utterances {
            ck.insert(feature_key(u.id), u.features.clone());
            ck.insert(signal_key(u.id), u.signal.clone());
        }
        ck
    }

    /// Writes `<dir>/manifest.jsonl` and `<dir>/corpus.tada`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.arrays().save(dir.join("corpus.tada"))?;
        let path = dir.join("manifest.jsonl");
        self.manifest("corpus.tada").save(&path)?;
        Ok(path)
    }

    /// Loads a manifest and its arrays back into memory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut files: Vec<(String, Checkpoint)> = Vec::new();
        let mut utterances = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            if !files.iter().any(|(n, _)| *n == r.arrays) {
                let ck = Checkpoint::load(base.join(&r.arrays))?;
                files.push((r.arrays.clone(), ck));
            }
            let ck = &files.iter().find(|(n, _)| *n == r.arrays).expect("loaded").1;
            r.validate(ck)?;
            utterances.push(Utterance {
                id: r.id,
                speaker: r.speaker,
                tokens: r.tokens.clone(),
                positions: r.p.clone(),
                features: ck.require(&feature_key(r.id))?.clone(),
                signal: ck.require(&signal_key(r.id))?.clone(),
            });
        }
        let Some((_, first)) = files.first() else {
            return Err(Error::Format("manifest has no records".into()));
        };
        let templates = Templates::new(&read_synth_config(first)?)?;
        Ok(Self { templates, utterances })
    }

    pub fn get(&self, id: u32) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

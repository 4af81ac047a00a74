//! The bundled colon corpus: short texts where `:` plays one of three roles
//! (type annotation, introductory colon, time separator), turned into a
//! deterministic synthetic capture whose colon tokens follow a role-specific
//! expert sequence, perturbed by routing noise.

use std::collections::BTreeMap;
use std::path::Path;

use routelens_core::synth::{plant_paths_with, SurfacePlant, SynthSpec};
use routelens_core::TokenMeta;
use serde::Deserialize;

use crate::capture::{Capture, CaptureError, SequenceText};
use crate::labels::{CategorySpec, Labels};
use crate::synth_io::{synthetic_manifest, write_with};

const CORPUS: &str = include_str!("../data/colon_corpus.jsonl");

pub const ROLES: [&str; 3] = ["type annotation", "introductory colon", "time separator"];
pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, Deserialize)]
pub struct CorpusEntry {
    pub role: String,
    pub lang: String,
    pub text: String,
}

pub fn entries() -> Vec<CorpusEntry> {
    CORPUS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled corpus is valid JSON lines"))
        .collect()
}

/// Splits on whitespace; runs of alphanumerics (and `_`) form one token,
/// every other character is its own token. Returns `(token, char span)`.
pub fn tokenize(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut word: Option<(usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() || c == '_' {
            word.get_or_insert_with(|| (i, String::new())).1.push(c);
            continue;
        }
        if let Some((s, w)) = word.take() {
            out.push((w, (s, i)));
        }
        if !c.is_whitespace() {
            out.push((c.to_string(), (i, i + 1)));
        }
    }
    if let Some((s, w)) = word {
        let end = s + w.chars().count();
        out.push((w, (s, end)));
    }
    out
}

/// Knobs of the corpus capture.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Copies of the corpus, each with fresh routing noise.
    pub repeats: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_experts: usize,
    pub control_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            repeats: 8,
            num_layers: 8,
            hidden_dim: 64,
            num_experts: 16,
            control_noise: 1.6,
            seed: 0,
        }
    }
}

pub struct CorpusCapture {
    pub capture: Capture,
    pub labels: Labels,
    pub colon_id: u32,
}

/// Writes the corpus capture to `dir` with a `labels.json` selecting the
/// colon tokens of each role.
pub fn write_colon_capture(
    dir: impl AsRef<Path>,
    cfg: &CorpusConfig,
) -> Result<CorpusCapture, CaptureError> {
    let dir = dir.as_ref();
    let entries = entries();
    let tokenized: Vec<Vec<(String, (usize, usize))>> =
        entries.iter().map(|e| tokenize(&e.text)).collect();
    let vocab: BTreeMap<&str, u32> = {
        let mut words: Vec<&str> = tokenized
            .iter()
            .flatten()
            .map(|(w, _)| w.as_str())
            .collect();
        words.sort_unstable();
        words.dedup();
        words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, i as u32))
            .collect()
    };
    let colon_id = vocab[":"];
    let mut languages: Vec<String> = entries.iter().map(|e| e.lang.clone()).collect();
    languages.sort();
    languages.dedup();

    let free_groups = cfg.num_experts.saturating_sub(ROLES.len()).max(1) as u32;
    let mut meta = Vec::new();
    let mut groups = Vec::new();
    let mut sequences = Vec::new();
    let mut role_seqs: Vec<Vec<u32>> = vec![Vec::new(); ROLES.len()];
    for rep in 0..cfg.repeats {
        for (i, (entry, toks)) in entries.iter().zip(&tokenized).enumerate() {
            let seq_id = (rep * entries.len() + i) as u32;
            let role = ROLES.iter().position(|r| *r == entry.role).ok_or_else(|| {
                CaptureError::Invalid(format!("unknown corpus role {:?}", entry.role))
            })?;
            role_seqs[role].push(seq_id);
            let lang = languages.iter().position(|l| *l == entry.lang).unwrap_or(0) as u8;
            for (pos, (word, _)) in toks.iter().enumerate() {
                let token_id = vocab[word.as_str()];
                meta.push(TokenMeta {
                    token_id,
                    seq_id,
                    pos: pos as u32,
                    lang,
                });
                groups.push(if token_id == colon_id {
                    role as u32
                } else {
                    ROLES.len() as u32 + token_id % free_groups
                });
            }
            sequences.push(SequenceText {
                seq_id,
                text: entry.text.clone(),
                offsets: toks.iter().map(|(_, span)| *span).collect(),
            });
        }
    }

    let spec = SynthSpec {
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        num_experts: cfg.num_experts,
        num_tokens: meta.len(),
        seed: cfg.seed,
        blind_persistence: 0.9,
        surface_plant: SurfacePlant::TokenIdInBlind,
        vocab_size: vocab.len() as u32,
        num_languages: languages.len() as u8,
        control_noise: cfg.control_noise,
        ..SynthSpec::default()
    };
    let cap =
        plant_paths_with(&spec, meta, groups).map_err(|e| CaptureError::Invalid(e.to_string()))?;
    let manifest = synthetic_manifest(&cap, "colon-sample", &languages);
    let capture = write_with(&cap, dir, manifest, &sequences)?;

    let labels = Labels {
        categories: ROLES
            .iter()
            .zip(role_seqs)
            .map(|(name, seq_ids)| CategorySpec {
                name: name.to_string(),
                seq_ids,
                token_ranges: vec![],
                token_ids: vec![colon_id],
            })
            .collect(),
    };
    let path = dir.join(LABELS_FILE);
    let mut json = serde_json::to_string_pretty(&labels).expect("labels serialize");
    json.push('\n');
    std::fs::write(&path, json).map_err(|source| CaptureError::Io { path, source })?;
    Ok(CorpusCapture {
        capture,
        labels,
        colon_id,
    })
}

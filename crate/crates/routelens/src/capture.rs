//! On-disk capture format.
//!
//! A capture is a directory holding `manifest.json` plus raw little-endian,
//! row-major tensors per MoE layer, named after the layer's global index:
//!
//! | file                  | shape  | element                         |
//! |-----------------------|--------|---------------------------------|
//! | `layer{i}.router.bin` | N × D  | `dtype`                         |
//! | `layer{i}.h.bin`      | T × D  | `dtype`                         |
//! | `layer{i}.meta.bin`   | T      | 16-byte [`MetaRecord`]          |
//! | `layer{i}.scores.bin` | T × N  | `dtype`, only with router scores |
//!
//! An optional `sequences.jsonl` carries the source text of each sequence
//! with per-position character offsets, used for context windows.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use routelens_core::paths::top1_experts;
use routelens_core::{Matrix, TokenMeta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const LOCK_FILE: &str = ".routelens.lock";
pub const FORMAT_VERSION: u32 = 1;
pub const META_RECORD_BYTES: usize = 16;
/// `top1_expert` value meaning "not recorded".
pub const NO_SELECTION: u16 = u16::MAX;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("no {MANIFEST_FILE} in {0}")]
    MissingManifest(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("{file}: expected {expected} bytes, found {actual}")]
    ShapeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("layer {layer} is not a captured MoE layer (have {available:?})")]
    LayerOutOfRange { layer: u32, available: Vec<u32> },
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("capture directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

impl CaptureError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = CaptureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    /// IEEE binary16, widened to f32 on read.
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            other => Err(CaptureError::UnsupportedDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub format_version: u32,
    pub model_name: String,
    /// Number of captured MoE layers.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub experts_per_layer: Vec<usize>,
    pub top_k: usize,
    pub dtype: Dtype,
    /// Global decoder-layer index of each captured MoE layer.
    pub layer_index_map: Vec<u32>,
    pub token_count: usize,
    /// ISO 639-1 codes; `TokenMeta::lang` indexes this list.
    pub languages: Vec<String>,
    /// Which tensor was captured as the hidden state.
    #[serde(default)]
    pub hook_point: String,
    #[serde(default)]
    pub has_router_scores: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u32>,
    /// Free-form extractor notes (shared experts and the like).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl CaptureManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CaptureError::InvalidManifest(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "format_version {} (supported: {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        if self.experts_per_layer.len() != self.num_layers
            || self.layer_index_map.len() != self.num_layers
        {
            return bad(format!(
                "num_layers {} but {} expert counts and {} layer indices",
                self.num_layers,
                self.experts_per_layer.len(),
                self.layer_index_map.len()
            ));
        }
        if let Some(&n) = self
            .experts_per_layer
            .iter()
            .find(|&&n| n < 2 || n >= NO_SELECTION as usize)
        {
            return bad(format!("expert count {n} outside 2..{NO_SELECTION}"));
        }
        if self.layer_index_map.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layer_index_map must be strictly increasing".into());
        }
        let min_n = self.experts_per_layer.iter().copied().min().unwrap_or(0);
        if self.top_k == 0 || self.top_k > min_n {
            return bad(format!("top_k {} outside 1..={min_n}", self.top_k));
        }
        if self.languages.len() > u8::MAX as usize + 1 {
            return bad("more than 256 languages".into());
        }
        Ok(())
    }

    /// Position of global layer `layer` in the layer map.
    pub fn position(&self, layer: u32) -> Result<usize> {
        self.layer_index_map
            .binary_search(&layer)
            .map_err(|_| CaptureError::LayerOutOfRange {
                layer,
                available: self.layer_index_map.clone(),
            })
    }

    pub fn experts(&self, layer: u32) -> Result<usize> {
        Ok(self.experts_per_layer[self.position(layer)?])
    }

    /// The MoE layer following `layer`, if any.
    pub fn next_layer(&self, layer: u32) -> Result<Option<u32>> {
        let p = self.position(layer)?;
        Ok(self.layer_index_map.get(p + 1).copied())
    }
}

/// One 16-byte metadata record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetaRecord {
    pub meta: TokenMeta,
    pub top1: Option<u16>,
}

impl MetaRecord {
    pub fn to_bytes(&self) -> [u8; META_RECORD_BYTES] {
        let mut b = [0u8; META_RECORD_BYTES];
        b[0..4].copy_from_slice(&self.meta.token_id.to_le_bytes());
        b[4..8].copy_from_slice(&self.meta.seq_id.to_le_bytes());
        b[8..12].copy_from_slice(&self.meta.pos.to_le_bytes());
        b[12] = self.meta.lang;
        b[13..15].copy_from_slice(&self.top1.unwrap_or(NO_SELECTION).to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        let top1 = u16::from_le_bytes([b[13], b[14]]);
        Self {
            meta: TokenMeta {
                token_id: u32_at(0),
                seq_id: u32_at(4),
                pos: u32_at(8),
                lang: b[12],
            },
            top1: (top1 != NO_SELECTION).then_some(top1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    pub layer: u32,
    /// `N × D`, row `e` holds expert `e`'s weights.
    pub weights: Matrix,
}

/// A contiguous run of tokens at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    pub layer: u32,
    /// Index of the first token in the capture.
    pub start: usize,
    pub states: Matrix,
    pub token_meta: Vec<TokenMeta>,
    pub selections: Vec<Option<u16>>,
    pub router_scores: Option<Matrix>,
}

impl ActivationShard {
    pub fn len(&self) -> usize {
        self.token_meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_meta.is_empty()
    }
}

/// Source text of one sequence; `offsets[pos]` is the character span of the
/// token at `pos`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceText {
    pub seq_id: u32,
    pub text: String,
    pub offsets: Vec<(usize, usize)>,
}

impl SequenceText {
    /// Token at `pos` with up to `radius` characters on either side.
    pub fn context(&self, pos: u32, radius: usize) -> Option<String> {
        let &(start, end) = self.offsets.get(pos as usize)?;
        let chars: Vec<char> = self.text.chars().collect();
        let end = end.min(chars.len());
        let start = start.min(end);
        let lo = start.saturating_sub(radius);
        let hi = (end + radius).min(chars.len());
        Some(chars[lo..hi].iter().collect())
    }
}

pub fn router_file(layer: u32) -> String {
    format!("layer{layer}.router.bin")
}

pub fn states_file(layer: u32) -> String {
    format!("layer{layer}.h.bin")
}

pub fn meta_file(layer: u32) -> String {
    format!("layer{layer}.meta.bin")
}

pub fn scores_file(layer: u32) -> String {
    format!("layer{layer}.scores.bin")
}

pub(crate) fn decode_floats(bytes: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

pub(crate) fn encode_floats(values: &[f32], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F16 => values
            .iter()
            .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
            .collect(),
    }
}

/// Read handle on a capture directory.
#[derive(Debug, Clone)]
pub struct Capture {
    dir: PathBuf,
    manifest: CaptureManifest,
}

/// Reads and validates `manifest.json`, then checks every tensor file's size
/// against the declared shapes. Tensors themselves are read on demand.
pub fn open_capture(path: impl AsRef<Path>) -> Result<Capture> {
    Capture::open(path)
}

impl Capture {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let dir = path.as_ref().to_path_buf();
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.is_file() {
            return Err(CaptureError::MissingManifest(dir));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| CaptureError::io(&mpath, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| CaptureError::Json {
                path: mpath.clone(),
                source,
            })?;
        if let Some(d) = value.get("dtype").and_then(|d| d.as_str()) {
            Dtype::parse(d)?;
        }
        let manifest: CaptureManifest =
            serde_json::from_value(value).map_err(|source| CaptureError::Json {
                path: mpath,
                source,
            })?;
        manifest.validate()?;
        let capture = Self { dir, manifest };
        capture.check_sizes()?;
        Ok(capture)
    }

    fn check_sizes(&self) -> Result<()> {
        let m = &self.manifest;
        let el = m.dtype.size() as u64;
        let (t, d) = (m.token_count as u64, m.hidden_dim as u64);
        for (&layer, &n) in m.layer_index_map.iter().zip(&m.experts_per_layer) {
            let n = n as u64;
            let mut files = vec![
                (router_file(layer), n * d * el),
                (states_file(layer), t * d * el),
                (meta_file(layer), t * META_RECORD_BYTES as u64),
            ];
            if m.has_router_scores {
                files.push((scores_file(layer), t * n * el));
            }
            for (name, expected) in files {
                let path = self.dir.join(&name);
                let actual = fs::metadata(&path)
                    .map_err(|e| CaptureError::io(&path, e))?
                    .len();
                if actual != expected {
                    return Err(CaptureError::ShapeMismatch {
                        file: name,
                        expected,
                        actual,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &CaptureManifest {
        &self.manifest
    }

    pub fn layers(&self) -> &[u32] {
        &self.manifest.layer_index_map
    }

    pub fn token_count(&self) -> usize {
        self.manifest.token_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    fn read_file(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        fs::read(&path).map_err(|e| CaptureError::io(&path, e))
    }

    pub fn load_routing_matrix(&self, layer: u32) -> Result<RoutingMatrix> {
        let n = self.manifest.experts(layer)?;
        let data = decode_floats(&self.read_file(&router_file(layer))?, self.manifest.dtype);
        let weights = Matrix::from_vec(n, self.manifest.hidden_dim, data)
            .map_err(|e| CaptureError::Invalid(e.to_string()))?;
        Ok(RoutingMatrix { layer, weights })
    }

    /// All `T × D` hidden states of `layer`.
    pub fn load_states(&self, layer: u32) -> Result<Matrix> {
        self.manifest.position(layer)?;
        let data = decode_floats(&self.read_file(&states_file(layer))?, self.manifest.dtype);
        Matrix::from_vec(self.manifest.token_count, self.manifest.hidden_dim, data)
            .map_err(|e| CaptureError::Invalid(e.to_string()))
    }

    pub fn load_meta(&self, layer: u32) -> Result<Vec<MetaRecord>> {
        self.manifest.position(layer)?;
        Ok(self
            .read_file(&meta_file(layer))?
            .chunks_exact(META_RECORD_BYTES)
            .map(MetaRecord::from_bytes)
            .collect())
    }

    pub fn load_token_meta(&self, layer: u32) -> Result<Vec<TokenMeta>> {
        Ok(self.load_meta(layer)?.into_iter().map(|r| r.meta).collect())
    }

    pub fn load_scores(&self, layer: u32) -> Result<Option<Matrix>> {
        let n = self.manifest.experts(layer)?;
        if !self.manifest.has_router_scores {
            return Ok(None);
        }
        let data = decode_floats(&self.read_file(&scores_file(layer))?, self.manifest.dtype);
        Matrix::from_vec(self.manifest.token_count, n, data)
            .map(Some)
            .map_err(|e| CaptureError::Invalid(e.to_string()))
    }

    /// Top-1 expert per token: the recorded selection where present, else
    /// the argmax of the recomputed router scores.
    pub fn top1(&self, layer: u32) -> Result<Vec<u16>> {
        let records = self.load_meta(layer)?;
        if records.iter().all(|r| r.top1.is_some()) {
            return Ok(records.iter().map(|r| r.top1.unwrap_or(0)).collect());
        }
        let router = self.load_routing_matrix(layer)?;
        let recomputed = top1_experts(&router.weights, &self.load_states(layer)?);
        Ok(records
            .iter()
            .zip(recomputed)
            .map(|(r, c)| r.top1.unwrap_or(c))
            .collect())
    }

    pub fn load_shard(&self, layer: u32) -> Result<ActivationShard> {
        let records = self.load_meta(layer)?;
        Ok(ActivationShard {
            layer,
            start: 0,
            states: self.load_states(layer)?,
            token_meta: records.iter().map(|r| r.meta).collect(),
            selections: records.iter().map(|r| r.top1).collect(),
            router_scores: self.load_scores(layer)?,
        })
    }

    /// Consecutive, non-overlapping slices of `batch` tokens in file order.
    pub fn iter_tokens(&self, layer: u32, batch: usize) -> Result<TokenIter<'_>> {
        if batch == 0 {
            return Err(CaptureError::ZeroBatch);
        }
        let n = self.manifest.experts(layer)?;
        let open = |name: String| -> Result<File> {
            let path = self.dir.join(name);
            File::open(&path).map_err(|e| CaptureError::io(&path, e))
        };
        Ok(TokenIter {
            capture: self,
            layer,
            experts: n,
            batch,
            next: 0,
            states: open(states_file(layer))?,
            meta: open(meta_file(layer))?,
            scores: if self.manifest.has_router_scores {
                Some(open(scores_file(layer))?)
            } else {
                None
            },
        })
    }

    pub fn sequences(&self) -> Result<Option<BTreeMap<u32, SequenceText>>> {
        let path = self.dir.join(SEQUENCES_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let file = File::open(&path).map_err(|e| CaptureError::io(&path, e))?;
        let mut out = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CaptureError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: SequenceText =
                serde_json::from_str(&line).map_err(|source| CaptureError::Json {
                    path: path.clone(),
                    source,
                })?;
            out.insert(seq.seq_id, seq);
        }
        Ok(Some(out))
    }
}

pub struct TokenIter<'a> {
    capture: &'a Capture,
    layer: u32,
    experts: usize,
    batch: usize,
    next: usize,
    states: File,
    meta: File,
    scores: Option<File>,
}

impl TokenIter<'_> {
    fn read_at(&self, file: &mut File, offset: u64, len: usize, name: String) -> Result<Vec<u8>> {
        let path = self.capture.dir.join(name);
        let mut buf = vec![0u8; len];
        file.seek(SeekFrom::Start(offset))
            .map_err(|e| CaptureError::io(&path, e))?;
        file.read_exact(&mut buf)
            .map_err(|e| CaptureError::io(&path, e))?;
        Ok(buf)
    }

    fn slice(&mut self, start: usize, len: usize) -> Result<ActivationShard> {
        let m = &self.capture.manifest;
        let (d, el) = (m.hidden_dim, m.dtype.size());
        let mut states_file_ = self
            .states
            .try_clone()
            .map_err(|e| CaptureError::io(&self.capture.dir, e))?;
        let raw = self.read_at(
            &mut states_file_,
            (start * d * el) as u64,
            len * d * el,
            states_file(self.layer),
        )?;
        let states = Matrix::from_vec(len, d, decode_floats(&raw, m.dtype))
            .map_err(|e| CaptureError::Invalid(e.to_string()))?;
        let mut meta_file_ = self
            .meta
            .try_clone()
            .map_err(|e| CaptureError::io(&self.capture.dir, e))?;
        let raw = self.read_at(
            &mut meta_file_,
            (start * META_RECORD_BYTES) as u64,
            len * META_RECORD_BYTES,
            meta_file(self.layer),
        )?;
        let records: Vec<MetaRecord> = raw
            .chunks_exact(META_RECORD_BYTES)
            .map(MetaRecord::from_bytes)
            .collect();
        let router_scores = match self.scores.as_ref() {
            Some(f) => {
                let mut f = f
                    .try_clone()
                    .map_err(|e| CaptureError::io(&self.capture.dir, e))?;
                let n = self.experts;
                let raw = self.read_at(
                    &mut f,
                    (start * n * el) as u64,
                    len * n * el,
                    scores_file(self.layer),
                )?;
                Some(
                    Matrix::from_vec(len, n, decode_floats(&raw, m.dtype))
                        .map_err(|e| CaptureError::Invalid(e.to_string()))?,
                )
            }
            None => None,
        };
        Ok(ActivationShard {
            layer: self.layer,
            start,
            states,
            token_meta: records.iter().map(|r| r.meta).collect(),
            selections: records.iter().map(|r| r.top1).collect(),
            router_scores,
        })
    }
}

impl Iterator for TokenIter<'_> {
    type Item = Result<ActivationShard>;

    fn next(&mut self) -> Option<Self::Item> {
        let total = self.capture.manifest.token_count;
        if self.next >= total {
            return None;
        }
        let start = self.next;
        let len = self.batch.min(total - start);
        self.next += len;
        Some(self.slice(start, len))
    }
}

/// Everything needed to write one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerData<'a> {
    pub layer: u32,
    pub router: &'a Matrix,
    pub states: &'a Matrix,
    pub meta: &'a [TokenMeta],
    pub top1: Selections<'a>,
    pub scores: Option<&'a Matrix>,
}

/// Recorded top-1 selections of a layer.
#[derive(Debug, Clone, Copy)]
pub enum Selections<'a> {
    /// Nothing recorded; readers recompute.
    None,
    All(&'a [u16]),
    Partial(&'a [Option<u16>]),
}

impl Selections<'_> {
    fn len(&self) -> Option<usize> {
        match self {
            Selections::None => None,
            Selections::All(s) => Some(s.len()),
            Selections::Partial(s) => Some(s.len()),
        }
    }

    fn get(&self, i: usize) -> Option<u16> {
        match self {
            Selections::None => None,
            Selections::All(s) => Some(s[i]),
            Selections::Partial(s) => s[i],
        }
    }
}

/// Exclusive writer for a capture directory. The lock file is created on
/// [`CaptureWriter::create`] and removed when the writer is finished or
/// dropped.
pub struct CaptureWriter {
    dir: PathBuf,
    manifest: CaptureManifest,
    written: Vec<bool>,
    done: bool,
}

impl CaptureWriter {
    pub fn create(dir: impl AsRef<Path>, manifest: CaptureManifest) -> Result<Self> {
        manifest.validate()?;
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CaptureError::io(&dir, e))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CaptureError::Locked(dir))
            }
            Err(e) => return Err(CaptureError::io(&lock, e)),
        }
        let written = vec![false; manifest.num_layers];
        Ok(Self {
            dir,
            manifest,
            written,
            done: false,
        })
    }

    fn write_file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CaptureError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| CaptureError::io(&path, e))?;
        w.flush().map_err(|e| CaptureError::io(&path, e))
    }

    pub fn write_layer(&mut self, data: LayerData<'_>) -> Result<()> {
        let m = &self.manifest;
        let pos = m.position(data.layer)?;
        let (n, d, t) = (m.experts_per_layer[pos], m.hidden_dim, m.token_count);
        let shape_err = |what: &str, rows: usize, cols: usize, er: usize, ec: usize| {
            CaptureError::Invalid(format!(
                "layer {}: {what} is {rows}×{cols}, expected {er}×{ec}",
                data.layer
            ))
        };
        if (data.router.rows(), data.router.cols()) != (n, d) {
            return Err(shape_err(
                "router",
                data.router.rows(),
                data.router.cols(),
                n,
                d,
            ));
        }
        if (data.states.rows(), data.states.cols()) != (t, d) {
            return Err(shape_err(
                "states",
                data.states.rows(),
                data.states.cols(),
                t,
                d,
            ));
        }
        if data.meta.len() != t || data.top1.len().is_some_and(|n| n != t) {
            return Err(CaptureError::Invalid(format!(
                "layer {}: metadata length differs from token_count {t}",
                data.layer
            )));
        }
        if data.scores.is_some() != m.has_router_scores {
            return Err(CaptureError::Invalid(format!(
                "layer {}: router scores {} but manifest says has_router_scores={}",
                data.layer,
                if data.scores.is_some() {
                    "given"
                } else {
                    "missing"
                },
                m.has_router_scores
            )));
        }
        if let Some(s) = data.scores {
            if (s.rows(), s.cols()) != (t, n) {
                return Err(shape_err("scores", s.rows(), s.cols(), t, n));
            }
        }
        let dtype = m.dtype;
        self.write_file(
            &router_file(data.layer),
            &encode_floats(data.router.as_slice(), dtype),
        )?;
        self.write_file(
            &states_file(data.layer),
            &encode_floats(data.states.as_slice(), dtype),
        )?;
        let mut meta = Vec::with_capacity(t * META_RECORD_BYTES);
        for (i, tm) in data.meta.iter().enumerate() {
            let rec = MetaRecord {
                meta: *tm,
                top1: data.top1.get(i),
            };
            meta.extend_from_slice(&rec.to_bytes());
        }
        self.write_file(&meta_file(data.layer), &meta)?;
        if let Some(s) = data.scores {
            self.write_file(
                &scores_file(data.layer),
                &encode_floats(s.as_slice(), dtype),
            )?;
        }
        self.written[pos] = true;
        Ok(())
    }

    pub fn write_sequences(&self, sequences: &[SequenceText]) -> Result<()> {
        let mut out = String::new();
        for s in sequences {
            out.push_str(&serde_json::to_string(s).expect("sequence serializes"));
            out.push('\n');
        }
        self.write_file(SEQUENCES_FILE, out.as_bytes())
    }

    /// Writes the manifest once every layer has been written, releases the
    /// lock and reopens the capture for reading.
    pub fn finish(mut self) -> Result<Capture> {
        if let Some(p) = self.written.iter().position(|w| !w) {
            return Err(CaptureError::Invalid(format!(
                "layer {} was never written",
                self.manifest.layer_index_map[p]
            )));
        }
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        self.write_file(MANIFEST_FILE, json.as_bytes())?;
        self.release();
        Capture::open(&self.dir)
    }

    fn release(&mut self) {
        if !self.done {
            self.done = true;
            let _ = fs::remove_file(self.dir.join(LOCK_FILE));
        }
    }
}

impl Drop for CaptureWriter {
    fn drop(&mut self) {
        self.release();
    }
}

/// Copies a capture layer by layer through the reader and writer.
pub fn rewrite_capture(src: &Capture, dst: impl AsRef<Path>) -> Result<Capture> {
    let mut w = CaptureWriter::create(dst, src.manifest.clone())?;
    for &layer in src.layers() {
        let router = src.load_routing_matrix(layer)?;
        let shard = src.load_shard(layer)?;
        w.write_layer(LayerData {
            layer,
            router: &router.weights,
            states: &shard.states,
            meta: &shard.token_meta,
            top1: Selections::Partial(&shard.selections),
            scores: shard.router_scores.as_ref(),
        })?;
    }
    if let Some(seqs) = src.sequences()? {
        w.write_sequences(&seqs.into_values().collect::<Vec<_>>())?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_record_layout() {
        let rec = MetaRecord {
            meta: TokenMeta {
                token_id: 0x0403_0201,
                seq_id: 7,
                pos: 9,
                lang: 2,
            },
            top1: Some(0x0102),
        };
        let b = rec.to_bytes();
        assert_eq!(&b[0..4], &[1, 2, 3, 4]);
        assert_eq!(&b[4..8], &[7, 0, 0, 0]);
        assert_eq!(&b[8..12], &[9, 0, 0, 0]);
        assert_eq!(b[12], 2);
        assert_eq!(&b[13..16], &[2, 1, 0]);
        assert_eq!(MetaRecord::from_bytes(&b), rec);
    }

    #[test]
    fn unrecorded_selection_round_trips() {
        let rec = MetaRecord {
            top1: None,
            ..MetaRecord::default()
        };
        assert_eq!(&rec.to_bytes()[13..15], &[0xff, 0xff]);
        assert_eq!(MetaRecord::from_bytes(&rec.to_bytes()).top1, None);
    }

    #[test]
    fn dtype_parse() {
        assert_eq!(Dtype::parse("f16").unwrap(), Dtype::F16);
        assert!(
            matches!(Dtype::parse("bf16"), Err(CaptureError::UnsupportedDtype(s)) if s == "bf16")
        );
    }

    #[test]
    fn context_window() {
        let s = SequenceText {
            seq_id: 0,
            text: "abcdefghij".into(),
            offsets: vec![(0, 2), (4, 5)],
        };
        assert_eq!(s.context(1, 2).unwrap(), "cdefg");
        assert_eq!(s.context(0, 40).unwrap(), "abcdefghij");
        assert_eq!(s.context(5, 1), None);
    }
}

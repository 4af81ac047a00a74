//! Analyses over captures: each function loads what it needs through
//! [`Capture`] and hands the arrays to `routelens-core`. Independent layers
//! are processed on the current rayon pool; results are collected in layer
//! order so output never depends on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use routelens_core::amplify::{
    self, AmplifyError, MagnitudeAccumulator, MagnitudeProfile, SelectionMode,
};
use routelens_core::continuity::{self, ContinuityError, ContinuityPoint};
use routelens_core::decomp::{Channel, DecompError};
use routelens_core::info;
use routelens_core::kmeans::{self, KMeansError};
use routelens_core::layout::{self, FlowGraph, FlowLayout, LayoutError};
use routelens_core::paths::{
    self, ClusterGroup, DiversityConfig, DiversityReport, ExpertPath, GroupRater, PathError,
    PathGroup,
};
use routelens_core::probe::{self, ProbeConfig, ProbeError, ProbeResult};
use routelens_core::{Matrix, RouterBasis, TokenMeta, DEFAULT_SV_CUTOFF};
use serde::Serialize;
use thiserror::Error;

use crate::capture::{Capture, CaptureError};

/// Tokens read per slice when streaming a layer.
pub const STREAM_BATCH: usize = 4096;
/// Classes kept by the token-id probe.
pub const TOP_TOKEN_IDS: usize = 100;
/// Equal-width bins of the position probe.
pub const POSITION_BINS: u32 = 32;
/// Random dimension draws averaged per fraction.
pub const RANDOM_DRAWS: usize = 10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Amplify(#[from] AmplifyError),
    #[error(transparent)]
    Continuity(#[from] ContinuityError),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

pub fn layer_basis(capture: &Capture, layer: u32) -> Result<RouterBasis> {
    let router = capture.load_routing_matrix(layer)?;
    Ok(routelens_core::router_basis(
        &router.weights,
        DEFAULT_SV_CUTOFF,
    )?)
}

/// The requested channel of every hidden state at `layer`.
pub fn layer_channel(capture: &Capture, layer: u32, channel: Channel) -> Result<Matrix> {
    let states = capture.load_states(layer)?;
    if channel == Channel::Full {
        return Ok(states);
    }
    Ok(layer_basis(capture, layer)?.channel(&states, channel)?)
}

/// Per-dimension magnitudes in one streaming pass over the layer.
pub fn dim_magnitudes(capture: &Capture, layer: u32) -> Result<MagnitudeProfile> {
    let router = capture.load_routing_matrix(layer)?;
    let mut acc = MagnitudeAccumulator::new(capture.hidden_dim());
    for shard in capture.iter_tokens(layer, STREAM_BATCH)? {
        acc.push_rows(&shard?.states);
    }
    Ok(acc.finish(&router.weights)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub dims: usize,
    pub top_accuracy: f64,
    pub random_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmplifyLayerReport {
    pub layer: u32,
    pub n_tokens: usize,
    pub rho: Option<f64>,
    /// Why `rho` is missing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_error: Option<String>,
    /// `1/N`.
    pub chance: f64,
    pub fractions: Vec<FractionRow>,
}

pub fn amplify_layer(
    capture: &Capture,
    layer: u32,
    fractions: &[f64],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<AmplifyLayerReport> {
    let mut profile = dim_magnitudes(capture, layer)?;
    let (rho, rho_error) = match amplify::amplification_corr(&mut profile) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mut rows = Vec::with_capacity(fractions.len());
    if !fractions.is_empty() {
        let top1: Vec<Option<u32>> = capture
            .top1(layer)?
            .into_iter()
            .map(|e| Some(u32::from(e)))
            .collect();
        let keep = usable_rows(&top1);
        let states = capture.load_states(layer)?.select_rows(&keep);
        let labels: Vec<u32> = keep.iter().map(|&i| top1[i].unwrap_or_default()).collect();
        for &fraction in fractions {
            let top = amplify::select_dims(&profile, fraction, SelectionMode::TopMagnitude, seed)?;
            let top_accuracy = amplify::subset_probe_accuracy(&states, &labels, &top, cfg)?;
            let random_accuracy = amplify::random_subset_accuracy(
                &states,
                &labels,
                &profile,
                fraction,
                RANDOM_DRAWS,
                seed,
                cfg,
            )?;
            rows.push(FractionRow {
                fraction,
                dims: top.len(),
                top_accuracy,
                random_accuracy,
            });
        }
    }
    Ok(AmplifyLayerReport {
        layer,
        n_tokens: profile.n_tokens,
        rho,
        rho_error,
        chance: 1.0 / capture.manifest().experts(layer)? as f64,
        fractions: rows,
    })
}

pub fn amplify(
    capture: &Capture,
    layers: &[u32],
    fractions: &[f64],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<Vec<AmplifyLayerReport>> {
    layers
        .par_iter()
        .map(|&l| amplify_layer(capture, l, fractions, seed, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTarget {
    Expert,
    ExpertNext,
    Language,
    TokenId,
    Position,
}

impl ProbeTarget {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTarget::Expert => "expert",
            ProbeTarget::ExpertNext => "expert-next",
            ProbeTarget::Language => "language",
            ProbeTarget::TokenId => "token-id",
            ProbeTarget::Position => "position",
        }
    }
}

/// Labels for `target` at `layer` plus the layer they come from; `None`
/// marks tokens excluded from the probe.
pub fn probe_labels(
    capture: &Capture,
    layer: u32,
    target: ProbeTarget,
) -> Result<(Vec<Option<u32>>, u32)> {
    let meta = || capture.load_token_meta(layer);
    Ok(match target {
        ProbeTarget::Expert => (
            capture
                .top1(layer)?
                .into_iter()
                .map(|e| Some(e as u32))
                .collect(),
            layer,
        ),
        ProbeTarget::ExpertNext => {
            let next = capture.manifest().next_layer(layer)?.ok_or_else(|| {
                AnalysisError::Invalid(format!("layer {layer} is the last captured layer"))
            })?;
            (
                capture
                    .top1(next)?
                    .into_iter()
                    .map(|e| Some(e as u32))
                    .collect(),
                next,
            )
        }
        ProbeTarget::Language => (meta()?.iter().map(|m| Some(m.lang as u32)).collect(), layer),
        ProbeTarget::TokenId => {
            let meta = meta()?;
            let keep = top_token_ids(&meta, TOP_TOKEN_IDS);
            (
                meta.iter()
                    .map(|m| {
                        keep.binary_search(&m.token_id)
                            .is_ok()
                            .then_some(m.token_id)
                    })
                    .collect(),
                layer,
            )
        }
        ProbeTarget::Position => {
            let meta = meta()?;
            (
                meta.iter()
                    .map(|m| Some(position_bin(m.pos, &meta)))
                    .collect(),
                layer,
            )
        }
    })
}

/// The `k` most frequent token ids (lower id first on ties), ascending.
pub fn top_token_ids(meta: &[TokenMeta], k: usize) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for m in meta {
        *counts.entry(m.token_id).or_default() += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<u32> = ranked.into_iter().take(k).map(|(id, _)| id).collect();
    ids.sort_unstable();
    ids
}

fn position_bin(pos: u32, meta: &[TokenMeta]) -> u32 {
    let span = meta.iter().map(|m| m.pos).max().unwrap_or(0) as u64 + 1;
    ((pos as u64 * POSITION_BINS as u64) / span) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub layer: u32,
    /// Layer the labels were read from.
    pub label_layer: u32,
    pub channel: Channel,
    pub target: ProbeTarget,
    pub accuracy: f64,
    pub mi_percent: f64,
    pub label_entropy: f64,
    /// Tokens left out: unlabeled, or in a class with fewer than two members.
    pub dropped_tokens: usize,
    pub result: ProbeResult,
}

/// Indices of labeled tokens whose class has at least two members.
fn usable_rows(labels: &[Option<u32>]) -> Vec<usize> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(*l).or_default() += 1;
    }
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.filter(|c| counts[c] >= 2).map(|_| i))
        .collect()
}

/// Fits a probe on `features` against `labels`, reporting held-out accuracy
/// and MI% from the same fit.
pub fn probe_features(
    features: &Matrix,
    labels: &[Option<u32>],
    cfg: &ProbeConfig,
) -> Result<(ProbeResult, f64, f64, usize)> {
    let rows = usable_rows(labels);
    let dropped = labels.len() - rows.len();
    let x = features.select_rows(&rows);
    let y: Vec<u32> = rows
        .iter()
        .map(|&i| labels[i].unwrap_or_default())
        .collect();
    let fitted = probe::fit_probe(&x, &y, cfg)?;
    let test = x.select_rows(fitted.held_out());
    let truth: Vec<u32> = fitted.held_out().iter().map(|&i| y[i]).collect();
    let pred = fitted.predict(&test)?;
    let result = probe::eval_probe(&fitted, &test, &truth)?;
    Ok((
        result,
        info::normalized_mi_percent(&pred, &truth),
        info::entropy(&truth),
        dropped,
    ))
}

pub fn probe_layer(
    capture: &Capture,
    layer: u32,
    channel: Channel,
    target: ProbeTarget,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (labels, label_layer) = probe_labels(capture, layer, target)?;
    let features = layer_channel(capture, layer, channel)?;
    let (result, mi_percent, label_entropy, dropped_tokens) =
        probe_features(&features, &labels, cfg)?;
    Ok(ProbeReport {
        layer,
        label_layer,
        channel,
        target,
        accuracy: result.accuracy,
        mi_percent,
        label_entropy,
        dropped_tokens,
        result,
    })
}

pub fn probe(
    capture: &Capture,
    layers: &[u32],
    channel: Channel,
    target: ProbeTarget,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    layers
        .par_iter()
        .map(|&l| probe_layer(capture, l, channel, target, cfg))
        .collect()
}

/// Probes of one channel against the current and the next layer's choice.
pub fn next_layer_probe(
    capture: &Capture,
    layer: u32,
    channel: Channel,
    cfg: &ProbeConfig,
) -> Result<(ProbeReport, ProbeReport)> {
    let here = probe_layer(capture, layer, channel, ProbeTarget::Expert, cfg)?;
    let next = probe_layer(capture, layer, channel, ProbeTarget::ExpertNext, cfg)?;
    Ok((here, next))
}

pub fn channel_continuity(
    capture: &Capture,
    layers: &[u32],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<ContinuityPoint>> {
    if layers.len() < 2 {
        return Err(ContinuityError::TooFewLayers.into());
    }
    let loaded: Vec<(RouterBasis, Matrix)> = layers
        .par_iter()
        .map(|&l| Ok((layer_basis(capture, l)?, capture.load_states(l)?)))
        .collect::<Result<_>>()?;
    let meta: Vec<Vec<TokenMeta>> = layers
        .iter()
        .map(|&l| capture.load_token_meta(l))
        .collect::<std::result::Result<_, _>>()?;
    if meta.windows(2).any(|w| w[0] != w[1]) {
        return Err(ContinuityError::TokenStreamMismatch {
            left: meta[0].len(),
            right: meta[1].len(),
        }
        .into());
    }
    (0..layers.len() - 1)
        .into_par_iter()
        .map(|i| {
            let (b0, s0) = &loaded[i];
            let (b1, s1) = &loaded[i + 1];
            Ok(continuity::pair_continuity(
                layers[i],
                b0,
                s0,
                layers[i + 1],
                b1,
                s1,
                n_boot,
                seed,
            )?)
        })
        .collect()
}

/// Captured layers inside an inclusive band.
pub fn band_layers(capture: &Capture, band: (u32, u32)) -> Result<Vec<u32>> {
    let layers: Vec<u32> = capture
        .layers()
        .iter()
        .copied()
        .filter(|l| (band.0..=band.1).contains(l))
        .collect();
    if layers.is_empty() {
        return Err(CaptureError::LayerOutOfRange {
            layer: band.0,
            available: capture.layers().to_vec(),
        }
        .into());
    }
    Ok(layers)
}

/// One path per token over the captured layers inside `band`.
pub fn extract_paths(capture: &Capture, band: (u32, u32)) -> Result<Vec<ExpertPath>> {
    let layers = band_layers(capture, band)?;
    let per_layer: Vec<Vec<u16>> = layers
        .par_iter()
        .map(|&l| capture.top1(l))
        .collect::<std::result::Result<_, _>>()?;
    Ok(paths::extract_paths(band, &per_layer)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleToken {
    pub index: usize,
    pub token_id: u32,
    pub seq_id: u32,
    pub pos: u32,
    pub lang: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRecord<K: Serialize> {
    pub rank: usize,
    pub key: Vec<K>,
    pub size: usize,
    pub unique_token_ids: usize,
    pub languages: BTreeMap<String, usize>,
    pub samples: Vec<SampleToken>,
}

/// Characters of context kept on each side of a sampled token.
pub const CONTEXT_RADIUS: usize = 40;

pub fn lang_name(capture: &Capture, lang: u8) -> String {
    capture
        .manifest()
        .languages
        .get(lang as usize)
        .cloned()
        .unwrap_or_else(|| format!("#{lang}"))
}

/// Serializable view of groups with at least `min_size` members, with up to
/// `samples` members drawn per group (seeded) and their text context.
pub fn group_records<K: Clone + Serialize>(
    capture: &Capture,
    groups: &[paths::Group<K>],
    meta: &[TokenMeta],
    min_size: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<GroupRecord<K>>> {
    let sequences = capture.sequences()?;
    Ok(groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.size() >= min_size)
        .map(|(rank, g)| {
            let mut rng = routelens_core::CounterRng::new(seed, rank as u64);
            let mut picks = rng.sample_without_replacement(g.size(), samples.min(g.size()));
            picks.sort_unstable();
            let samples = picks
                .into_iter()
                .map(|i| {
                    let index = g.members[i];
                    let m = meta[index];
                    SampleToken {
                        index,
                        token_id: m.token_id,
                        seq_id: m.seq_id,
                        pos: m.pos,
                        lang: lang_name(capture, m.lang),
                        context: sequences
                            .as_ref()
                            .and_then(|s| s.get(&m.seq_id))
                            .and_then(|s| s.context(m.pos, CONTEXT_RADIUS)),
                    }
                })
                .collect();
            GroupRecord {
                rank,
                key: g.key.clone(),
                size: g.size(),
                unique_token_ids: g.unique_token_ids,
                languages: g
                    .languages
                    .iter()
                    .map(|(&l, &c)| (lang_name(capture, l), c))
                    .collect(),
                samples,
            }
        })
        .collect())
}

pub fn group_paths(
    capture: &Capture,
    band: (u32, u32),
) -> Result<(Vec<PathGroup>, Vec<TokenMeta>)> {
    let paths = extract_paths(capture, band)?;
    let meta = capture.load_token_meta(band_layers(capture, band)?[0])?;
    let groups = paths::group_paths(&paths, Some(&meta));
    Ok((groups, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerClusters {
    pub layer: u32,
    pub k: usize,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub subspace: Channel,
    pub layers: Vec<LayerClusters>,
    pub assignments: Vec<Vec<u32>>,
    pub groups: Vec<ClusterGroup>,
    pub meta: Vec<TokenMeta>,
}

/// k-means on one channel of one layer; `k` defaults to the layer's expert
/// count.
pub fn kmeans_subspace(
    capture: &Capture,
    layer: u32,
    subspace: Channel,
    k: Option<usize>,
    seed: u64,
) -> Result<(LayerClusters, Vec<u32>)> {
    let k = match k {
        Some(k) => k,
        None => capture.manifest().experts(layer)?,
    };
    let features = layer_channel(capture, layer, subspace)?;
    let km = kmeans::kmeans(&features, k, seed, kmeans::DEFAULT_MAX_ITER)?;
    Ok((
        LayerClusters {
            layer,
            k,
            iterations: km.iterations,
            objective: km.objective(),
        },
        km.assignments,
    ))
}

/// Per-layer k-means over a band followed by cross-layer grouping.
pub fn cluster_band(
    capture: &Capture,
    band: (u32, u32),
    subspace: Channel,
    k: Option<usize>,
    seed: u64,
) -> Result<ClusterOutcome> {
    let layers = band_layers(capture, band)?;
    let per_layer: Vec<(LayerClusters, Vec<u32>)> = layers
        .par_iter()
        .map(|&l| kmeans_subspace(capture, l, subspace, k, seed))
        .collect::<Result<_>>()?;
    let meta = capture.load_token_meta(layers[0])?;
    let (stats, assignments): (Vec<_>, Vec<_>) = per_layer.into_iter().unzip();
    let groups = paths::cross_layer_clusters(&assignments, Some(&meta))?;
    Ok(ClusterOutcome {
        subspace,
        layers: stats,
        assignments,
        groups,
        meta,
    })
}

pub fn cluster_diversity(
    outcome: &ClusterOutcome,
    cfg: &DiversityConfig,
    rater: &dyn GroupRater,
) -> DiversityReport {
    paths::lexical_diversity(&outcome.groups, &outcome.meta, cfg, rater)
}

#[derive(Debug, Clone)]
pub struct PooledLayout {
    pub paths: Vec<ExpertPath>,
    pub graph: FlowGraph,
    pub initial: FlowLayout,
    pub layout: FlowLayout,
}

/// Flow graph of every token over the band, pooled across categories, and
/// its layout after `sweeps` barycenter passes.
pub fn pooled_layout(capture: &Capture, band: (u32, u32), sweeps: usize) -> Result<PooledLayout> {
    let layers = band_layers(capture, band)?;
    let experts: Vec<usize> = layers
        .iter()
        .map(|&l| capture.manifest().experts(l))
        .collect::<std::result::Result<_, _>>()?;
    let paths = extract_paths(capture, band)?;
    let graph = layout::build_flow_graph(&paths, &layers, &experts)?;
    let initial = layout::frequency_layout(&graph);
    let layout = layout::sugiyama_layout(&graph, sweeps)?;
    Ok(PooledLayout {
        paths,
        graph,
        initial,
        layout,
    })
}

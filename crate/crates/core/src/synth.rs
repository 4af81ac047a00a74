//! Synthetic MoE captures with planted ground truth.
//!
//! Construction (all layers share one hidden space of width `D`):
//!
//! * A random `Dc`-dimensional *control space* holds every router's row
//!   space; each router has `N` orthonormal rows spanning a fresh random
//!   subspace of it, so router row spaces rotate from layer to layer.
//! * With hand-off enabled, `N` further orthonormal directions form a
//!   *hand-off slice*; everything orthogonal to both is the *content space*.
//! * Control: `c_l = R_lᵀ z_l` with `z_l = β·e_k + ε·g` for a target expert
//!   `k`, so the router score vector is exactly `z_l`. With hand-off, `z_{l+1}`
//!   is read from the hand-off slice of layer `l` through a fixed random
//!   orthogonal map.
//! * Content: `s_{l+1} = ρ·s_l + √(1−ρ²)·noise` in the content space, plus an
//!   optional fixed per-token-id embedding.
//! * `h_l = c_l + s_l (+ hand-off slice)`; recorded selections are the exact
//!   argmax of `R_l·h_l` as stored.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::paths::top1_experts;
use crate::rng::CounterRng;
use crate::types::TokenMeta;

const STREAM_BASIS: u64 = 1;
const STREAM_ROUTER: u64 = 2;
const STREAM_TOKENS: u64 = 3;
const STREAM_CONTROL: u64 = 4;
const STREAM_CONTENT: u64 = 5;
const STREAM_EMBED: u64 = 6;
const STREAM_GROUPS: u64 = 7;
const STREAM_AMPLIFY: u64 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("infeasible synthetic target: {0}")]
    InfeasibleTarget(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SurfacePlant {
    #[default]
    None,
    /// A fixed embedding of the token id is added to the content channel.
    TokenIdInBlind,
}

/// Parameters of a synthetic capture.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_experts: usize,
    pub num_tokens: usize,
    pub seed: u64,
    /// Planted amplification correlation; only read by [`plant_amplification`].
    pub rho_target: f64,
    /// Cross-layer persistence of the content channel, in `[0, 1]`.
    pub blind_persistence: f64,
    /// Next layer's control is a linear map of this layer's blind channel.
    pub handoff: bool,
    pub surface_plant: SurfacePlant,
    /// Latent token groups with their own expert sequences; 0 disables.
    pub n_semantic_groups: usize,
    /// Token ids per group vocabulary when groups are planted.
    pub group_vocab: usize,
    pub vocab_size: u32,
    pub num_languages: u8,
    pub seq_len: u32,
    /// Margin `β` of the target expert's score.
    pub control_margin: f64,
    /// Noise `ε` on expert scores.
    pub control_noise: f64,
    /// Per-coordinate scale of content noise.
    pub content_scale: f64,
    /// Norm of the planted token-id embedding.
    pub surface_strength: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_experts: 8,
            num_tokens: 1000,
            seed: 0,
            rho_target: 0.6,
            blind_persistence: 0.9,
            handoff: false,
            surface_plant: SurfacePlant::None,
            n_semantic_groups: 0,
            group_vocab: 4,
            vocab_size: 1000,
            num_languages: 3,
            seq_len: 64,
            control_margin: 5.0,
            control_noise: 1.0,
            content_scale: 1.0,
            surface_strength: 8.0,
        }
    }
}

/// One generated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLayer {
    /// `N × D`.
    pub router: Matrix,
    /// `T × D`.
    pub states: Matrix,
    pub top1: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCapture {
    pub spec: SynthSpec,
    pub layers: Vec<SynthLayer>,
    pub meta: Vec<TokenMeta>,
    /// Latent group per token when groups were planted.
    pub groups: Option<Vec<u32>>,
}

impl SyntheticCapture {
    pub fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn num_tokens(&self) -> usize {
        self.meta.len()
    }
}

/// Orthonormalizes `vectors` in place (modified Gram–Schmidt, two passes),
/// dropping vectors that collapse. Returns the survivors.
fn orthonormalize(vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for mut v in vectors {
        let original = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        for _ in 0..2 {
            for q in &out {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-10 * original.max(1e-300) {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

fn gaussian_vec(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Removes the components of `v` along the orthonormal `basis`.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
    }
}

fn token_meta(
    spec: &SynthSpec,
    rng: &mut CounterRng,
    token_ids: impl Fn(usize, &mut CounterRng) -> u32,
) -> Vec<TokenMeta> {
    let seq_len = spec.seq_len.max(1);
    (0..spec.num_tokens)
        .map(|t| {
            let seq_id = (t as u32) / seq_len;
            TokenMeta {
                token_id: token_ids(t, rng),
                seq_id,
                pos: (t as u32) % seq_len,
                lang: (seq_id % spec.num_languages.max(1) as u32) as u8,
            }
        })
        .collect()
}

struct Geometry {
    /// Orthonormal basis of the control space.
    control: Vec<Vec<f64>>,
    /// Orthonormal hand-off slice (empty without hand-off).
    handoff: Vec<Vec<f64>>,
    routers: Vec<Matrix>,
}

fn check_sizes(spec: &SynthSpec) -> Result<(usize, usize), SynthError> {
    let (d, n) = (spec.hidden_dim, spec.num_experts);
    if spec.num_layers == 0 || d == 0 || n < 2 {
        return Err(SynthError::InfeasibleTarget(
            "need at least one layer, D ≥ 1 and N ≥ 2",
        ));
    }
    if n > u16::MAX as usize {
        return Err(SynthError::InfeasibleTarget("too many experts"));
    }
    if !(0.0..=1.0).contains(&spec.blind_persistence) {
        return Err(SynthError::InfeasibleTarget(
            "blind_persistence must lie in [0, 1]",
        ));
    }
    let handoff_dims = if spec.handoff { n } else { 0 };
    let control_dims = if d >= 4 * n + handoff_dims { 2 * n } else { n };
    if d < control_dims + handoff_dims + 1 {
        return Err(SynthError::InfeasibleTarget(
            "hidden_dim too small for the requested experts",
        ));
    }
    Ok((control_dims, handoff_dims))
}

fn geometry(spec: &SynthSpec) -> Result<Geometry, SynthError> {
    let (control_dims, handoff_dims) = check_sizes(spec)?;
    let d = spec.hidden_dim;
    let n = spec.num_experts;
    let mut rng = CounterRng::new(spec.seed, STREAM_BASIS);
    let raw: Vec<Vec<f64>> = (0..control_dims + handoff_dims)
        .map(|_| gaussian_vec(&mut rng, d))
        .collect();
    let mut basis = orthonormalize(raw);
    if basis.len() < control_dims + handoff_dims {
        return Err(SynthError::InfeasibleTarget(
            "could not build an orthonormal basis",
        ));
    }
    let handoff = basis.split_off(control_dims);
    let control = basis;

    let root = CounterRng::new(spec.seed, STREAM_ROUTER);
    let routers = (0..spec.num_layers)
        .map(|l| {
            let mut rng = root.fork(l as u64);
            let coeffs = orthonormalize(
                (0..n)
                    .map(|_| gaussian_vec(&mut rng, control_dims))
                    .collect(),
            );
            let mut r = Matrix::zeros(n, d);
            for (e, c) in coeffs.iter().enumerate() {
                let mut row = vec![0.0f64; d];
                for (w, q) in c.iter().zip(&control) {
                    row.iter_mut().zip(q).for_each(|(x, qv)| *x += w * qv);
                }
                for (dst, x) in r.row_mut(e).iter_mut().zip(row) {
                    *dst = x as f32;
                }
            }
            r
        })
        .collect();
    Ok(Geometry {
        control,
        handoff,
        routers,
    })
}

/// Score vector `β·e_target + ε·g`.
fn planted_scores(spec: &SynthSpec, target: usize, rng: &mut CounterRng) -> Vec<f64> {
    (0..spec.num_experts)
        .map(|e| {
            let peak = if e == target {
                spec.control_margin
            } else {
                0.0
            };
            peak + spec.control_noise * rng.normal()
        })
        .collect()
}

/// Random orthogonal `N × N` map, rows orthonormal.
fn random_orthogonal(n: usize, rng: &mut CounterRng) -> Vec<Vec<f64>> {
    loop {
        let q = orthonormalize((0..n).map(|_| gaussian_vec(rng, n)).collect());
        if q.len() == n {
            return q;
        }
    }
}

fn generate(
    spec: &SynthSpec,
    meta: Vec<TokenMeta>,
    targets: impl Fn(usize, usize, &mut CounterRng) -> usize,
    groups: Option<Vec<u32>>,
) -> Result<SyntheticCapture, SynthError> {
    let geo = geometry(spec)?;
    let (d, n, t_count) = (spec.hidden_dim, spec.num_experts, spec.num_tokens);
    let rho = spec.blind_persistence;
    let fresh = libm::sqrt((1.0 - rho * rho).max(0.0));
    let mut excluded: Vec<Vec<f64>> = geo.control.clone();
    excluded.extend(geo.handoff.iter().cloned());

    // Fixed hand-off map M: z_{l+1} = M·u_l, u_l = hand-off coordinates.
    let mut embed_rng = CounterRng::new(spec.seed, STREAM_EMBED);
    let handoff_map = if spec.handoff {
        Some(random_orthogonal(n, &mut embed_rng))
    } else {
        None
    };

    let control_root = CounterRng::new(spec.seed, STREAM_CONTROL);
    let content_root = CounterRng::new(spec.seed, STREAM_CONTENT);
    let embed_root = CounterRng::new(spec.seed, STREAM_EMBED).fork(0xE3BE);

    let mut layers: Vec<SynthLayer> = Vec::with_capacity(spec.num_layers);
    let mut states: Vec<Matrix> = (0..spec.num_layers)
        .map(|_| Matrix::zeros(t_count, d))
        .collect();

    let mut embed_cache: alloc::collections::BTreeMap<u32, Vec<f64>> =
        alloc::collections::BTreeMap::new();
    for (t, m) in meta.iter().enumerate() {
        let mut crng = control_root.fork(t as u64);
        let mut srng = content_root.fork(t as u64);
        let embedding = match spec.surface_plant {
            SurfacePlant::None => None,
            SurfacePlant::TokenIdInBlind => Some(
                embed_cache
                    .entry(m.token_id)
                    .or_insert_with(|| {
                        let mut r = embed_root.fork(m.token_id as u64);
                        let mut v = gaussian_vec(&mut r, d);
                        project_out(&mut v, &excluded);
                        let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                        v.iter_mut().for_each(|x| *x *= spec.surface_strength / nv);
                        v
                    })
                    .clone(),
            ),
        };

        let mut content = gaussian_vec(&mut srng, d);
        project_out(&mut content, &excluded);
        let mut prev_handoff: Option<Vec<f64>> = None;
        for l in 0..spec.num_layers {
            if l > 0 {
                let mut noise = gaussian_vec(&mut srng, d);
                project_out(&mut noise, &excluded);
                content
                    .iter_mut()
                    .zip(&noise)
                    .for_each(|(c, g)| *c = rho * *c + fresh * g);
            }
            let z: Vec<f64> = match (&handoff_map, prev_handoff.take()) {
                (Some(map), Some(u)) => map
                    .iter()
                    .map(|row| row.iter().zip(&u).map(|(a, b)| a * b).sum())
                    .collect(),
                _ => planted_scores(spec, targets(t, l, &mut crng), &mut crng),
            };
            let mut h: Vec<f64> = content.iter().map(|x| x * spec.content_scale).collect();
            if let Some(e) = &embedding {
                h.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
            let router = &geo.routers[l];
            for (e, &w) in z.iter().enumerate() {
                h.iter_mut()
                    .zip(router.row(e))
                    .for_each(|(a, &r)| *a += w * r as f64);
            }
            if let Some(map) = &handoff_map {
                // Intent for the next layer: u = Mᵀ·(β e_k + ε g).
                let next = planted_scores(spec, targets(t, l + 1, &mut crng), &mut crng);
                let mut u = vec![0.0f64; n];
                for (row, &s) in map.iter().zip(&next) {
                    u.iter_mut().zip(row).for_each(|(a, m)| *a += s * m);
                }
                for (w, q) in u.iter().zip(&geo.handoff) {
                    h.iter_mut().zip(q).for_each(|(a, qv)| *a += w * qv);
                }
                prev_handoff = Some(u);
            }
            for (dst, x) in states[l].row_mut(t).iter_mut().zip(h) {
                *dst = x as f32;
            }
        }
    }

    for (router, states) in geo.routers.into_iter().zip(states) {
        let top1 = top1_experts(&router, &states);
        layers.push(SynthLayer {
            router,
            states,
            top1,
        });
    }
    Ok(SyntheticCapture {
        spec: spec.clone(),
        layers,
        meta,
        groups,
    })
}

/// Generic synthetic capture: control resampled per layer with a uniformly
/// drawn target expert (or handed off from the previous layer's blind
/// channel), persistent content, optional token-id surface plant.
pub fn gen_synthetic_capture(spec: &SynthSpec) -> Result<SyntheticCapture, SynthError> {
    let mut rng = CounterRng::new(spec.seed, STREAM_TOKENS);
    let vocab = spec.vocab_size.max(1) as u64;
    let meta = token_meta(spec, &mut rng, |_, r| r.below(vocab) as u32);
    let n = spec.num_experts as u64;
    generate(spec, meta, |_, _, r| r.below(n) as usize, None)
}

/// Planted semantic groups: every token belongs to one of
/// `n_semantic_groups` latent groups, each group follows its own expert
/// sequence (distinct expert per group at every layer) and draws token ids
/// from its own `group_vocab`-sized vocabulary.
pub fn plant_paths(spec: &SynthSpec) -> Result<SyntheticCapture, SynthError> {
    let g = spec.n_semantic_groups;
    if g == 0 || g > spec.num_experts {
        return Err(SynthError::InfeasibleTarget(
            "n_semantic_groups must be in 1..=N",
        ));
    }
    if spec.group_vocab == 0 || (g * spec.group_vocab) as u64 > spec.vocab_size as u64 {
        return Err(SynthError::InfeasibleTarget(
            "group vocabularies exceed vocab_size",
        ));
    }
    let mut rng = CounterRng::new(spec.seed, STREAM_GROUPS);
    let groups: Vec<u32> = (0..spec.num_tokens)
        .map(|_| rng.below(g as u64) as u32)
        .collect();
    // Group vocabularies: disjoint id blocks under a random relabeling.
    let ids = rng.sample_without_replacement(spec.vocab_size as usize, g * spec.group_vocab);
    let gv = spec.group_vocab as u64;
    let mut tok_rng = CounterRng::new(spec.seed, STREAM_TOKENS);
    let meta = {
        let groups = &groups;
        let ids = &ids;
        token_meta(spec, &mut tok_rng, move |t, r| {
            let k = groups[t] as usize;
            ids[k * gv as usize + r.below(gv) as usize] as u32
        })
    };
    plant_paths_with(spec, meta, groups)
}

/// Planted paths for caller-supplied tokens: token `t` follows the expert
/// sequence of latent group `groups[t]`. `spec.num_tokens` is taken from
/// `meta`.
pub fn plant_paths_with(
    spec: &SynthSpec,
    meta: Vec<TokenMeta>,
    groups: Vec<u32>,
) -> Result<SyntheticCapture, SynthError> {
    if meta.len() != groups.len() {
        return Err(SynthError::InfeasibleTarget("one group per token required"));
    }
    if groups.iter().any(|&g| g as usize >= spec.num_experts) {
        return Err(SynthError::InfeasibleTarget("group ids must be below N"));
    }
    let spec = SynthSpec {
        num_tokens: meta.len(),
        ..spec.clone()
    };
    // Target expert of group k at layer l: perm_l[k], perms drawn per layer;
    // one extra layer covers the hand-off intent past the last layer.
    let mut rng = CounterRng::new(spec.seed, STREAM_GROUPS).fork(0x5041_5448); // "PATH"
    let perms: Vec<Vec<usize>> = (0..=spec.num_layers)
        .map(|_| {
            let mut p: Vec<usize> = (0..spec.num_experts).collect();
            rng.shuffle(&mut p);
            p
        })
        .collect();
    let targets = {
        let groups = groups.clone();
        move |t: usize, l: usize, _: &mut CounterRng| {
            perms[l.min(perms.len() - 1)][groups[t] as usize]
        }
    };
    generate(&spec, meta, targets, Some(groups))
}

/// How routing relates to the planted magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AmplifiedRouting {
    /// Every dimension feeds the router.
    Dense,
    /// Only the top `fraction` of dimensions by hidden magnitude feed the
    /// router; their hidden scale is multiplied by `gain`.
    Concentrated { fraction: f64, gain: f64 },
}

/// Ground truth of a [`plant_amplification`] capture.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationTruth {
    /// Per-dimension hidden scale.
    pub hidden_scale: Vec<f64>,
    /// Per-dimension router column magnitude.
    pub router_scale: Vec<f64>,
    /// Log-scale standard deviation used.
    pub log_sigma: f64,
    /// Correlation of the log-scales.
    pub log_rho: f64,
    /// Dimensions feeding the router under concentrated routing.
    pub planted_dims: Vec<usize>,
}

/// Correlation of log-normal magnitudes whose log-scales have standard
/// deviation `sigma` and correlation `log_rho`.
pub fn lognormal_correlation(sigma: f64, log_rho: f64) -> f64 {
    let s2 = sigma * sigma;
    (libm::exp(log_rho * s2) - 1.0) / (libm::exp(s2) - 1.0)
}

/// Inverse of [`lognormal_correlation`] in `log_rho`; `None` when the target
/// needs `|log_rho| > 1`.
pub fn log_rho_for(sigma: f64, rho: f64) -> Option<f64> {
    let s2 = sigma * sigma;
    let arg = 1.0 + rho * (libm::exp(s2) - 1.0);
    if arg <= 0.0 {
        return None;
    }
    let r = libm::log(arg) / s2;
    (r.abs() <= 1.0).then_some(r)
}

/// Capture whose per-dimension hidden magnitudes and router column
/// magnitudes are co-generated from a bivariate log-normal with Pearson
/// correlation `spec.rho_target` in expectation.
///
/// Hidden states are `h_{t,d} = a_d·g_{t,d}`; router entries are
/// `R_{e,d} = ±b_d` so column magnitudes equal `b_d` exactly. The log-scale
/// spread starts at 0.5 and shrinks until the target is reachable.
pub fn plant_amplification(
    spec: &SynthSpec,
    routing: AmplifiedRouting,
) -> Result<(SyntheticCapture, AmplificationTruth), SynthError> {
    let rho = spec.rho_target;
    if !(rho.abs() <= 0.95) {
        return Err(SynthError::InfeasibleTarget(
            "|rho_target| must be at most 0.95",
        ));
    }
    let (d, n, t_count) = (spec.hidden_dim, spec.num_experts, spec.num_tokens);
    if spec.num_layers == 0 || d < 2 || n < 2 {
        return Err(SynthError::InfeasibleTarget(
            "need at least one layer, D ≥ 2 and N ≥ 2",
        ));
    }
    let mut sigma = 0.5;
    let log_rho = loop {
        if let Some(r) = log_rho_for(sigma, rho) {
            break r;
        }
        sigma *= 0.8;
        if sigma < 0.05 {
            return Err(SynthError::InfeasibleTarget("rho_target unreachable"));
        }
    };

    let mut rng = CounterRng::new(spec.seed, STREAM_AMPLIFY);
    let cross = libm::sqrt(1.0 - log_rho * log_rho);
    let mut hidden_scale = Vec::with_capacity(d);
    let mut router_scale = Vec::with_capacity(d);
    for _ in 0..d {
        let (g1, g2) = (rng.normal(), rng.normal());
        hidden_scale.push(libm::exp(sigma * g1));
        router_scale.push(libm::exp(sigma * (log_rho * g1 + cross * g2)));
    }
    let mut planted_dims = Vec::new();
    if let AmplifiedRouting::Concentrated { fraction, gain } = routing {
        let count = crate::amplify::fraction_count(fraction, d).map_err(|_| {
            SynthError::InfeasibleTarget("concentration fraction selects no dimension")
        })?;
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| hidden_scale[b].total_cmp(&hidden_scale[a]).then(a.cmp(&b)));
        idx.truncate(count);
        idx.sort_unstable();
        for &i in &idx {
            hidden_scale[i] *= gain;
        }
        planted_dims = idx;
    }

    let mut tok_rng = CounterRng::new(spec.seed, STREAM_TOKENS);
    let vocab = spec.vocab_size.max(1) as u64;
    let meta = token_meta(spec, &mut tok_rng, |_, r| r.below(vocab) as u32);

    let root = CounterRng::new(spec.seed, STREAM_ROUTER);
    let mut layers = Vec::with_capacity(spec.num_layers);
    for l in 0..spec.num_layers {
        let mut r_rng = root.fork(l as u64);
        let mut router = Matrix::zeros(n, d);
        for e in 0..n {
            for (j, dst) in router.row_mut(e).iter_mut().enumerate() {
                let sign = if r_rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
                let live = planted_dims.is_empty() || planted_dims.binary_search(&j).is_ok();
                *dst = if live {
                    (sign * router_scale[j]) as f32
                } else {
                    0.0
                };
            }
        }
        let mut h_rng = CounterRng::new(spec.seed, STREAM_CONTENT).fork(l as u64);
        let mut states = Matrix::zeros(t_count, d);
        for t in 0..t_count {
            for (dst, a) in states.row_mut(t).iter_mut().zip(&hidden_scale) {
                *dst = (a * h_rng.normal()) as f32;
            }
        }
        let top1 = top1_experts(&router, &states);
        layers.push(SynthLayer {
            router,
            states,
            top1,
        });
    }
    if !planted_dims.is_empty() {
        for (j, s) in router_scale.iter_mut().enumerate() {
            if planted_dims.binary_search(&j).is_err() {
                *s = 0.0;
            }
        }
    }
    Ok((
        SyntheticCapture {
            spec: spec.clone(),
            layers,
            meta,
            groups: None,
        },
        AmplificationTruth {
            hidden_scale,
            router_scale,
            log_sigma: sigma,
            log_rho,
            planted_dims,
        },
    ))
}

//! Expert paths: the sequence of top-1 experts a token visits across a band
//! of layers, exact-match grouping of those sequences (or of per-layer
//! cluster ids), and lexical diversity of the resulting groups.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::matrix::{argmax, Matrix};
use crate::rng::CounterRng;
use crate::types::TokenMeta;

const RNG_STREAM_GROUPS: u64 = 0x4752_4f55_5053; // "GROUPS"

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("layer {layer} carries {got} tokens, expected {expected}")]
    TokenStreamMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("empty layer band")]
    EmptyBand,
}

/// Top-1 experts of one token over a band of layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertPath {
    /// First and last layer of the band (inclusive).
    pub band: (u32, u32),
    pub experts: Vec<u16>,
}

/// Index of the highest-scoring expert for `h`; ties go to the lowest index.
pub fn top1_expert(router: &Matrix, h: &[f32]) -> u16 {
    argmax(&router.matvec(h)).unwrap_or(0) as u16
}

/// Top-1 expert for every row of `states`.
pub fn top1_experts(router: &Matrix, states: &Matrix) -> Vec<u16> {
    states.iter_rows().map(|h| top1_expert(router, h)).collect()
}

/// Turns layer-major top-1 selections into one path per token.
pub fn extract_paths(
    band: (u32, u32),
    per_layer: &[Vec<u16>],
) -> Result<Vec<ExpertPath>, PathError> {
    let first = per_layer.first().ok_or(PathError::EmptyBand)?;
    let n = first.len();
    for (layer, sel) in per_layer.iter().enumerate() {
        if sel.len() != n {
            return Err(PathError::TokenStreamMismatch {
                layer,
                expected: n,
                got: sel.len(),
            });
        }
    }
    Ok((0..n)
        .map(|t| ExpertPath {
            band,
            experts: per_layer.iter().map(|sel| sel[t]).collect(),
        })
        .collect())
}

/// Tokens sharing one exact key (an expert path or a tuple of cluster ids).
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Group<K> {
    pub key: Vec<K>,
    /// Token indices, ascending.
    pub members: Vec<usize>,
    pub unique_token_ids: usize,
    /// Language index → count.
    pub languages: BTreeMap<u8, usize>,
}

pub type PathGroup = Group<u16>;
pub type ClusterGroup = Group<u32>;

impl<K> Group<K> {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Exact-match grouping, largest group first; equal sizes keep the order in
/// which each key first appears.
pub fn group_by_key<K: Ord + Clone>(keys: &[Vec<K>], meta: Option<&[TokenMeta]>) -> Vec<Group<K>> {
    let mut index: BTreeMap<&[K], usize> = BTreeMap::new();
    let mut groups: Vec<(Vec<K>, Vec<usize>)> = Vec::new();
    for (t, key) in keys.iter().enumerate() {
        let g = *index.entry(key.as_slice()).or_insert_with(|| {
            groups.push((key.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(t);
    }
    // Stable sort keeps first-occurrence order among equal sizes.
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    groups
        .into_iter()
        .map(|(key, members)| {
            let (unique_token_ids, languages) = match meta {
                Some(meta) => {
                    let mut ids: Vec<u32> = members.iter().map(|&t| meta[t].token_id).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    let mut langs = BTreeMap::new();
                    for &t in &members {
                        *langs.entry(meta[t].lang).or_insert(0) += 1;
                    }
                    (ids.len(), langs)
                }
                None => (0, BTreeMap::new()),
            };
            Group {
                key,
                members,
                unique_token_ids,
                languages,
            }
        })
        .collect()
}

/// Groups tokens with identical expert paths.
pub fn group_paths(paths: &[ExpertPath], meta: Option<&[TokenMeta]>) -> Vec<PathGroup> {
    let keys: Vec<Vec<u16>> = paths.iter().map(|p| p.experts.clone()).collect();
    group_by_key(&keys, meta)
}

/// Groups tokens whose per-layer cluster ids match across every layer.
/// `assignments[l][t]` is the cluster of token `t` at layer `l`.
pub fn cross_layer_clusters(
    assignments: &[Vec<u32>],
    meta: Option<&[TokenMeta]>,
) -> Result<Vec<ClusterGroup>, PathError> {
    let first = assignments.first().ok_or(PathError::EmptyBand)?;
    let n = first.len();
    for (layer, a) in assignments.iter().enumerate() {
        if a.len() != n {
            return Err(PathError::TokenStreamMismatch {
                layer,
                expected: n,
                got: a.len(),
            });
        }
    }
    let keys: Vec<Vec<u32>> = (0..n)
        .map(|t| assignments.iter().map(|a| a[t]).collect())
        .collect();
    Ok(group_by_key(&keys, meta))
}

/// A group's sampled members, handed to a [`GroupRater`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSample {
    pub group_index: usize,
    pub members: Vec<usize>,
    pub token_ids: Vec<u32>,
}

/// Decides whether a sampled group is interpretable enough to keep.
pub trait GroupRater {
    fn rate(&self, sample: &GroupSample) -> bool;
}

/// Keeps every group.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassAll;

impl GroupRater for PassAll {
    fn rate(&self, _sample: &GroupSample) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GroupSampling {
    /// Every qualifying group equally likely.
    #[default]
    Uniform,
    /// Groups drawn with probability proportional to their size.
    SizeWeighted,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DiversityReport {
    /// Mean distinct token ids per kept group; 0 when nothing was kept.
    pub mean_unique: f64,
    /// `(group index, distinct token ids in its sample)` per kept group.
    pub per_group: Vec<(usize, usize)>,
    /// Groups with at least `sample_size` members.
    pub n_qualifying: usize,
    pub n_sampled: usize,
    pub n_rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiversityConfig {
    pub sample_size: usize,
    pub n_groups: usize,
    pub seed: u64,
    pub sampling: GroupSampling,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            sample_size: 10,
            n_groups: 100,
            seed: 0,
            sampling: GroupSampling::Uniform,
        }
    }
}

/// Draws up to `n_groups` groups with at least `sample_size` members, samples
/// `sample_size` members of each without replacement and counts their
/// distinct token ids. Groups the rater rejects are dropped.
pub fn lexical_diversity<K>(
    groups: &[Group<K>],
    meta: &[TokenMeta],
    cfg: &DiversityConfig,
    rater: &dyn GroupRater,
) -> DiversityReport {
    let qualifying: Vec<usize> = (0..groups.len())
        .filter(|&g| groups[g].size() >= cfg.sample_size.max(1))
        .collect();
    let mut rng = CounterRng::new(cfg.seed, RNG_STREAM_GROUPS);
    let take = cfg.n_groups.min(qualifying.len());
    let chosen: Vec<usize> = match cfg.sampling {
        GroupSampling::Uniform => rng
            .sample_without_replacement(qualifying.len(), take)
            .into_iter()
            .map(|i| qualifying[i])
            .collect(),
        GroupSampling::SizeWeighted => {
            let mut pool = qualifying.clone();
            let mut out = Vec::with_capacity(take);
            for _ in 0..take {
                let total: usize = pool.iter().map(|&g| groups[g].size()).sum();
                let mut target = rng.below(total as u64) as usize;
                let pos = pool
                    .iter()
                    .position(|&g| {
                        if target < groups[g].size() {
                            true
                        } else {
                            target -= groups[g].size();
                            false
                        }
                    })
                    .expect("target within total");
                out.push(pool.remove(pos));
            }
            out
        }
    };

    let mut per_group = Vec::with_capacity(chosen.len());
    let mut n_rejected = 0;
    for &g in &chosen {
        let group = &groups[g];
        let picks = rng.sample_without_replacement(group.size(), cfg.sample_size.min(group.size()));
        let members: Vec<usize> = picks.iter().map(|&i| group.members[i]).collect();
        let token_ids: Vec<u32> = members.iter().map(|&t| meta[t].token_id).collect();
        let sample = GroupSample {
            group_index: g,
            members,
            token_ids,
        };
        if !rater.rate(&sample) {
            n_rejected += 1;
            continue;
        }
        let mut ids = sample.token_ids;
        ids.sort_unstable();
        ids.dedup();
        per_group.push((g, ids.len()));
    }
    let mean_unique = if per_group.is_empty() {
        0.0
    } else {
        per_group.iter().map(|&(_, u)| u as f64).sum::<f64>() / per_group.len() as f64
    };
    DiversityReport {
        mean_unique,
        per_group,
        n_qualifying: qualifying.len(),
        n_sampled: chosen.len(),
        n_rejected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn meta(ids: &[u32]) -> Vec<TokenMeta> {
        ids.iter()
            .map(|&token_id| TokenMeta {
                token_id,
                ..TokenMeta::default()
            })
            .collect()
    }

    #[test]
    fn single_layer_paths_are_labels() {
        let paths = extract_paths((3, 3), &[vec![2, 0, 5]]).unwrap();
        let ex: Vec<Vec<u16>> = paths.iter().map(|p| p.experts.clone()).collect();
        assert_eq!(ex, vec![vec![2], vec![0], vec![5]]);
    }

    #[test]
    fn recorded_selections_pass_through() {
        let paths = extract_paths((0, 2), &[vec![3], vec![1], vec![4]]).unwrap();
        assert_eq!(paths[0].experts, vec![3, 1, 4]);
    }

    #[test]
    fn mismatched_layers() {
        assert!(matches!(
            extract_paths((0, 1), &[vec![1, 2], vec![1]]),
            Err(PathError::TokenStreamMismatch { layer: 1, .. })
        ));
        assert_eq!(extract_paths((0, 1), &[]), Err(PathError::EmptyBand));
    }

    #[test]
    fn grouping_example() {
        let paths: Vec<ExpertPath> = [[1u16, 2], [1, 2], [3, 2]]
            .iter()
            .map(|e| ExpertPath {
                band: (0, 1),
                experts: e.to_vec(),
            })
            .collect();
        let groups = group_paths(&paths, None);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].key, vec![1, 2]);
        assert_eq!(groups[0].members, vec![0, 1]);
        assert_eq!(groups[1].key, vec![3, 2]);
    }

    #[test]
    fn equal_sizes_keep_first_occurrence() {
        let keys = vec![vec![9u32], vec![1], vec![9], vec![1], vec![5]];
        let g = group_by_key(&keys, None);
        assert_eq!(g[0].key, vec![9]);
        assert_eq!(g[1].key, vec![1]);
        assert_eq!(g[2].key, vec![5]);
    }

    #[test]
    fn group_metadata() {
        let keys = vec![vec![0u32], vec![0], vec![0]];
        let mut m = meta(&[4, 4, 7]);
        m[2].lang = 1;
        let g = group_by_key(&keys, Some(&m));
        assert_eq!(g[0].unique_token_ids, 2);
        assert_eq!(g[0].languages.get(&0), Some(&2));
        assert_eq!(g[0].languages.get(&1), Some(&1));
    }

    #[test]
    fn diversity_extremes() {
        let keys: Vec<Vec<u32>> = (0..40).map(|t| vec![(t / 10) as u32]).collect();
        let same = meta(&[42; 40]);
        let groups = group_by_key(&keys, Some(&same));
        let cfg = DiversityConfig::default();
        assert_eq!(
            lexical_diversity(&groups, &same, &cfg, &PassAll).mean_unique,
            1.0
        );

        let distinct: Vec<TokenMeta> = meta(&(0..40).collect::<Vec<_>>());
        let groups = group_by_key(&keys, Some(&distinct));
        let report = lexical_diversity(&groups, &distinct, &cfg, &PassAll);
        assert_eq!(report.mean_unique, 10.0);
        assert_eq!(report.n_qualifying, 4);
        assert_eq!(report.n_sampled, 4);
    }

    struct RejectFirst;
    impl GroupRater for RejectFirst {
        fn rate(&self, sample: &GroupSample) -> bool {
            sample.group_index != 0
        }
    }

    #[test]
    fn rater_filters_groups() {
        let keys: Vec<Vec<u32>> = (0..30).map(|t| vec![(t / 10) as u32]).collect();
        let m = meta(&(0..30).collect::<Vec<_>>());
        let groups = group_by_key(&keys, Some(&m));
        let report = lexical_diversity(&groups, &m, &DiversityConfig::default(), &RejectFirst);
        assert_eq!(report.n_rejected, 1);
        assert_eq!(report.per_group.len(), 2);
    }

    #[test]
    fn size_weighted_sampling_is_seeded() {
        let keys: Vec<Vec<u32>> = (0..100).map(|t| vec![(t % 7) as u32]).collect();
        let m = meta(&(0..100).map(|t| t % 3).collect::<Vec<_>>());
        let groups = group_by_key(&keys, Some(&m));
        let cfg = DiversityConfig {
            sampling: GroupSampling::SizeWeighted,
            n_groups: 3,
            ..DiversityConfig::default()
        };
        let a = lexical_diversity(&groups, &m, &cfg, &PassAll);
        let b = lexical_diversity(&groups, &m, &cfg, &PassAll);
        assert_eq!(a, b);
        assert_eq!(a.n_sampled, 3);
    }
}

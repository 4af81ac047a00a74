//! Layered layout of expert-transition flow graphs.
//!
//! Nodes are experts at each layer of a band, edges carry the number of
//! tokens moving from one expert to another between adjacent layers. Experts
//! start ordered by usage; barycenter sweeps (forward over predecessors,
//! then backward over successors) then move every expert to the
//! flow-weighted mean position of its neighbours, reducing weighted edge
//! crossings.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::paths::ExpertPath;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("path covers band {got:?} with {len} layers, graph band is {expected:?} with {layers} layers")]
    BandMismatch {
        expected: (u32, u32),
        layers: usize,
        got: (u32, u32),
        len: usize,
    },
    #[error("expert {expert} out of range at layer position {layer} ({experts} experts)")]
    ExpertOutOfRange {
        layer: usize,
        expert: u16,
        experts: usize,
    },
    #[error("flow graph has no traffic")]
    EmptyGraph,
    #[error("layout does not match the graph's layers")]
    LayoutMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FlowGraph {
    /// Layer ids, in band order.
    pub layers: Vec<u32>,
    /// `usage[l][e]`: tokens routed to expert `e` at layer position `l`.
    pub usage: Vec<Vec<u64>>,
    /// `edges[l]`: `(from, to) → tokens` between positions `l` and `l + 1`.
    pub edges: Vec<BTreeMap<(u16, u16), u64>>,
}

impl FlowGraph {
    pub fn band(&self) -> (u32, u32) {
        (
            self.layers.first().copied().unwrap_or(0),
            self.layers.last().copied().unwrap_or(0),
        )
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn experts(&self, layer: usize) -> usize {
        self.usage[layer].len()
    }

    pub fn total_usage(&self) -> u64 {
        self.usage.iter().flatten().sum()
    }
}

/// Pools `paths` into a flow graph over `layers`, whose layer `l` has
/// `experts_per_layer[l]` experts.
pub fn build_flow_graph(
    paths: &[ExpertPath],
    layers: &[u32],
    experts_per_layer: &[usize],
) -> Result<FlowGraph, LayoutError> {
    assert_eq!(
        layers.len(),
        experts_per_layer.len(),
        "one expert count per layer"
    );
    let band = (
        layers.first().copied().unwrap_or(0),
        layers.last().copied().unwrap_or(0),
    );
    let mut usage: Vec<Vec<u64>> = experts_per_layer.iter().map(|&n| vec![0; n]).collect();
    let mut edges = vec![BTreeMap::new(); layers.len().saturating_sub(1)];
    for p in paths {
        if p.band != band || p.experts.len() != layers.len() {
            return Err(LayoutError::BandMismatch {
                expected: band,
                layers: layers.len(),
                got: p.band,
                len: p.experts.len(),
            });
        }
        for (l, &e) in p.experts.iter().enumerate() {
            let slot = usage[l]
                .get_mut(e as usize)
                .ok_or(LayoutError::ExpertOutOfRange {
                    layer: l,
                    expert: e,
                    experts: experts_per_layer[l],
                })?;
            *slot += 1;
        }
        for (l, w) in p.experts.windows(2).enumerate() {
            *edges[l].entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    Ok(FlowGraph {
        layers: layers.to_vec(),
        usage,
        edges,
    })
}

/// Vertical order of experts at every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FlowLayout {
    /// `order[l][p]`: expert drawn at position `p` of layer `l`.
    pub order: Vec<Vec<u16>>,
}

impl FlowLayout {
    /// `position[l][e]`: position of expert `e` at layer `l`.
    pub fn positions(&self) -> Vec<Vec<usize>> {
        self.order
            .iter()
            .map(|ord| {
                let mut pos = vec![0; ord.len()];
                for (p, &e) in ord.iter().enumerate() {
                    pos[e as usize] = p;
                }
                pos
            })
            .collect()
    }

    /// True when every layer's order is a permutation of its experts.
    pub fn is_bijective(&self) -> bool {
        self.order.iter().all(|ord| {
            let mut seen = vec![false; ord.len()];
            ord.iter().all(|&e| {
                let e = e as usize;
                e < seen.len() && !core::mem::replace(&mut seen[e], true)
            })
        })
    }
}

/// Experts ordered by usage (descending), ties by expert id.
pub fn frequency_layout(graph: &FlowGraph) -> FlowLayout {
    FlowLayout {
        order: graph
            .usage
            .iter()
            .map(|u| {
                let mut ord: Vec<u16> = (0..u.len() as u16).collect();
                ord.sort_by(|&a, &b| u[b as usize].cmp(&u[a as usize]).then(a.cmp(&b)));
                ord
            })
            .collect(),
    }
}

/// Re-ranks one layer by barycenter keys; equal keys keep their previous
/// relative order.
fn barycenter_pass<F>(order: &mut Vec<u16>, neighbour_pos: &[usize], mut incident: F)
where
    F: FnMut(u16, &mut dyn FnMut(u16, u64)),
{
    let keys: Vec<(f64, u16)> = order
        .iter()
        .enumerate()
        .map(|(prev, &e)| {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            incident(e, &mut |other, w| {
                num += w as f64 * neighbour_pos[other as usize] as f64;
                den += w as f64;
            });
            let key = if den > 0.0 { num / den } else { prev as f64 };
            (key, e)
        })
        .collect();
    let mut ranked = keys;
    // `order` is already in previous-position order, so a stable sort
    // breaks ties by previous position.
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    *order = ranked.into_iter().map(|(_, e)| e).collect();
}

fn position_of(order: &[u16]) -> Vec<usize> {
    let mut pos = vec![0; order.len()];
    for (p, &e) in order.iter().enumerate() {
        pos[e as usize] = p;
    }
    pos
}

/// Frequency-initialized layout refined by `sweeps` forward+backward
/// barycenter passes. The ordering with the fewest crossings seen (the
/// initial one included) is returned, earliest on ties.
pub fn sugiyama_layout(graph: &FlowGraph, sweeps: usize) -> Result<FlowLayout, LayoutError> {
    if graph.num_layers() == 0 || graph.total_usage() == 0 {
        return Err(LayoutError::EmptyGraph);
    }
    // Adjacency lists keep the per-expert scans linear in edge count.
    let mut preds: Vec<Vec<Vec<(u16, u64)>>> = Vec::with_capacity(graph.num_layers());
    let mut succs: Vec<Vec<Vec<(u16, u64)>>> = Vec::with_capacity(graph.num_layers());
    for l in 0..graph.num_layers() {
        preds.push(vec![Vec::new(); graph.experts(l)]);
        succs.push(vec![Vec::new(); graph.experts(l)]);
    }
    for (l, edges) in graph.edges.iter().enumerate() {
        for (&(a, b), &w) in edges {
            if w > 0 {
                succs[l][a as usize].push((b, w));
                preds[l + 1][b as usize].push((a, w));
            }
        }
    }

    let mut layout = frequency_layout(graph);
    let mut best = (count_crossings(graph, &layout)?, layout.clone());
    let last = graph.num_layers() - 1;
    for _ in 0..sweeps {
        for l in 1..=last {
            let nb = position_of(&layout.order[l - 1]);
            let adj = &preds[l];
            barycenter_pass(&mut layout.order[l], &nb, |e, visit| {
                adj[e as usize].iter().for_each(|&(o, w)| visit(o, w))
            });
        }
        for l in (0..last).rev() {
            let nb = position_of(&layout.order[l + 1]);
            let adj = &succs[l];
            barycenter_pass(&mut layout.order[l], &nb, |e, visit| {
                adj[e as usize].iter().for_each(|&(o, w)| visit(o, w))
            });
        }
        let c = count_crossings(graph, &layout)?;
        if c < best.0 {
            best = (c, layout.clone());
        }
    }
    Ok(best.1)
}

/// Weighted edge crossings: for every adjacent layer pair, the sum of
/// `w₁·w₂` over edge pairs whose endpoints are in opposite vertical order.
///
/// Runs in `O(E log E)` per layer pair with a Fenwick tree over target
/// positions; integer arithmetic keeps the result exact.
pub fn count_crossings(graph: &FlowGraph, layout: &FlowLayout) -> Result<f64, LayoutError> {
    if layout.order.len() != graph.num_layers()
        || layout
            .order
            .iter()
            .enumerate()
            .any(|(l, o)| o.len() != graph.experts(l))
    {
        return Err(LayoutError::LayoutMismatch);
    }
    let pos = layout.positions();
    let mut total: u128 = 0;
    for (l, edges) in graph.edges.iter().enumerate() {
        let mut list: Vec<(usize, usize, u64)> = edges
            .iter()
            .filter(|(_, &w)| w > 0)
            .map(|(&(a, b), &w)| (pos[l][a as usize], pos[l + 1][b as usize], w))
            .collect();
        list.sort_unstable();
        let width = graph.experts(l + 1);
        let mut tree = Fenwick::new(width);
        let mut inserted: u128 = 0;
        let mut i = 0;
        while i < list.len() {
            let mut j = i;
            while j < list.len() && list[j].0 == list[i].0 {
                j += 1;
            }
            for &(_, b, w) in &list[i..j] {
                // Earlier edges start strictly above; they cross when they
                // end strictly below.
                let at_or_above = tree.prefix(b + 1);
                total += w as u128 * (inserted - at_or_above);
            }
            for &(_, b, w) in &list[i..j] {
                tree.add(b, w as u128);
                inserted += w as u128;
            }
            i = j;
        }
    }
    Ok(total as f64)
}

struct Fenwick {
    tree: Vec<u128>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, idx: usize, w: u128) {
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] += w;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over indices `< end`.
    fn prefix(&self, end: usize) -> u128 {
        let mut i = end.min(self.tree.len() - 1);
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

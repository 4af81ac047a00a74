//! Format and invariant checks over a whole capture.

use std::collections::BTreeMap;

use rayon::prelude::*;
use routelens_core::paths::top1_experts;
use routelens_core::TokenMeta;
use serde::Serialize;

use crate::capture::{Capture, CaptureError};

/// Minimum agreement between recorded and recomputed top-1 selections.
pub const MIN_TOP1_AGREEMENT: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    pub check: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: u32,
    pub experts: usize,
    pub tokens: usize,
    pub recorded_selections: usize,
    /// Share of recorded selections equal to the recomputed argmax.
    pub top1_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub token_count: usize,
    pub layers: Vec<LayerSummary>,
    pub violations: Vec<Violation>,
}

fn layer_checks(
    capture: &Capture,
    layer: u32,
    reference: &[TokenMeta],
) -> Result<(LayerSummary, Vec<Violation>), CaptureError> {
    let m = capture.manifest();
    let mut v = Vec::new();
    let mut push = |check: &'static str, detail: String| {
        v.push(Violation {
            layer: Some(layer),
            check,
            detail,
        })
    };
    let n = m.experts(layer)?;
    let router = capture.load_routing_matrix(layer)?.weights;
    if !router.is_finite() {
        push(
            "router_finite",
            "routing matrix has non-finite entries".into(),
        );
    }
    let zero_rows: Vec<usize> = (0..n)
        .filter(|&e| router.row(e).iter().all(|&x| x == 0.0))
        .collect();
    if !zero_rows.is_empty() {
        push(
            "router_rows_nonzero",
            format!("all-zero expert rows {zero_rows:?}"),
        );
    }
    let states = capture.load_states(layer)?;
    if !states.is_finite() {
        push(
            "states_finite",
            "hidden states have non-finite entries".into(),
        );
    }
    let records = capture.load_meta(layer)?;
    let mut bad_top1 = 0usize;
    let mut bad_lang = 0usize;
    let mut bad_token = 0usize;
    for r in &records {
        bad_top1 += r.top1.is_some_and(|e| e as usize >= n) as usize;
        bad_lang += (!m.languages.is_empty() && r.meta.lang as usize >= m.languages.len()) as usize;
        bad_token += m.vocab_size.is_some_and(|vs| r.meta.token_id >= vs) as usize;
    }
    if bad_top1 > 0 {
        push("top1_in_range", format!("{bad_top1} selections ≥ {n}"));
    }
    if bad_lang > 0 {
        push(
            "lang_in_range",
            format!("{bad_lang} language indices ≥ {}", m.languages.len()),
        );
    }
    if bad_token > 0 {
        push(
            "token_id_in_range",
            format!("{bad_token} token ids ≥ vocab size"),
        );
    }
    if records.len() != reference.len() || records.iter().zip(reference).any(|(r, t)| r.meta != *t)
    {
        push(
            "token_stream",
            "token metadata differs from the first layer".into(),
        );
    }
    if let Some(scores) = capture.load_scores(layer)? {
        if !scores.is_finite() {
            push(
                "scores_finite",
                "router scores have non-finite entries".into(),
            );
        }
    }
    let recorded = records.iter().filter(|r| r.top1.is_some()).count();
    let top1_agreement = if recorded > 0 {
        let recomputed = top1_experts(&router, &states);
        let agree = records
            .iter()
            .zip(&recomputed)
            .filter(|(r, c)| r.top1 == Some(**c))
            .count();
        let rate = agree as f64 / recorded as f64;
        if rate < MIN_TOP1_AGREEMENT {
            push(
                "top1_agreement",
                format!(
                    "recorded selections match recomputed argmax for {:.4} of tokens",
                    rate
                ),
            );
        }
        Some(rate)
    } else {
        None
    };
    Ok((
        LayerSummary {
            layer,
            experts: n,
            tokens: records.len(),
            recorded_selections: recorded,
            top1_agreement,
        },
        v,
    ))
}

/// Runs every check; data that cannot be read at all is an error, anything
/// else is reported as a violation.
pub fn validate_capture(capture: &Capture) -> Result<ValidationSummary, CaptureError> {
    let m = capture.manifest();
    let reference = capture.load_token_meta(capture.layers()[0])?;
    let per_layer: Vec<(LayerSummary, Vec<Violation>)> = capture
        .layers()
        .par_iter()
        .map(|&l| layer_checks(capture, l, &reference))
        .collect::<Result<_, _>>()?;
    let mut layers = Vec::with_capacity(per_layer.len());
    let mut violations = Vec::new();
    for (s, v) in per_layer {
        layers.push(s);
        violations.extend(v);
    }
    if let Some(seqs) = capture.sequences()? {
        let mut max_pos: BTreeMap<u32, u32> = BTreeMap::new();
        for t in &reference {
            let e = max_pos.entry(t.seq_id).or_insert(0);
            *e = (*e).max(t.pos);
        }
        for (seq, pos) in max_pos {
            match seqs.get(&seq) {
                None => violations.push(Violation {
                    layer: None,
                    check: "sequence_text",
                    detail: format!("sequence {seq} has no text"),
                }),
                Some(s) if s.offsets.len() <= pos as usize => violations.push(Violation {
                    layer: None,
                    check: "sequence_text",
                    detail: format!(
                        "sequence {seq} has {} offsets, position {pos} used",
                        s.offsets.len()
                    ),
                }),
                Some(_) => {}
            }
        }
    }
    Ok(ValidationSummary {
        model_name: m.model_name.clone(),
        num_layers: m.num_layers,
        hidden_dim: m.hidden_dim,
        token_count: m.token_count,
        layers,
        violations,
    })
}

//! SVG output: path-bundle panels over a shared flow layout, and a line
//! chart for channel continuity. Output is a pure function of the inputs;
//! coordinates are printed with two decimals.

use std::collections::BTreeMap;
use std::fmt::Write;

use routelens_core::continuity::ContinuityPoint;
use routelens_core::layout::{FlowGraph, FlowLayout};
use routelens_core::paths::ExpertPath;
use thiserror::Error;

pub const PANEL_WIDTH: f64 = 1000.0;
pub const PANEL_HEIGHT: f64 = 600.0;
const MARGIN_X: f64 = 60.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 40.0;
const MIN_OPACITY: f64 = 0.01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("path over band {got:?} with {len} layers does not fit the layout band {band:?}")]
    BandMismatch {
        band: (u32, u32),
        got: (u32, u32),
        len: usize,
    },
    #[error("expert {expert} out of range at layer {layer}")]
    ExpertOutOfRange { layer: u32, expert: u16 },
    #[error("layout does not cover the graph")]
    LayoutMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    /// Panels to draw, in order; `None` draws every category in the given
    /// order.
    pub panels: Option<Vec<String>>,
    /// Paths per panel (first ones in capture order); `None` keeps all.
    pub max_paths: Option<usize>,
    pub stroke: String,
    pub stroke_width: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            panels: None,
            max_paths: Some(500),
            stroke: "#1f4e79".into(),
            stroke_width: 1.5,
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

struct Frame {
    xs: Vec<f64>,
    /// `ys[l][e]`: y of expert `e` at layer position `l`.
    ys: Vec<Vec<f64>>,
}

impl Frame {
    fn new(graph: &FlowGraph, layout: &FlowLayout) -> Result<Self, RenderError> {
        if layout.order.len() != graph.num_layers()
            || (0..graph.num_layers()).any(|l| layout.order[l].len() != graph.experts(l))
            || !layout.is_bijective()
        {
            return Err(RenderError::LayoutMismatch);
        }
        let l = graph.num_layers();
        let xs = (0..l)
            .map(|i| {
                if l == 1 {
                    PANEL_WIDTH / 2.0
                } else {
                    MARGIN_X + i as f64 * (PANEL_WIDTH - 2.0 * MARGIN_X) / (l - 1) as f64
                }
            })
            .collect();
        let span = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let ys = layout
            .positions()
            .into_iter()
            .map(|pos| {
                let n = pos.len();
                pos.into_iter()
                    .map(|p| {
                        if n == 1 {
                            MARGIN_TOP + span / 2.0
                        } else {
                            MARGIN_TOP + p as f64 * span / (n - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { xs, ys })
    }
}

/// Draws one panel per category. Every panel shares `layout`, so an expert
/// sits at the same height in all of them; each distinct path in a category
/// becomes one polyline whose opacity is proportional to the number of
/// tokens taking it.
pub fn render_paths_svg(
    graph: &FlowGraph,
    layout: &FlowLayout,
    categories: &[(String, Vec<ExpertPath>)],
    style: &Style,
) -> Result<String, RenderError> {
    let frame = Frame::new(graph, layout)?;
    let selected: Vec<&(String, Vec<ExpertPath>)> = match &style.panels {
        None => categories.iter().collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                categories
                    .iter()
                    .find(|(c, _)| c == n)
                    .ok_or_else(|| RenderError::UnknownCategory(n.clone()))
            })
            .collect::<Result<_, _>>()?,
    };
    let band = graph.band();
    let height = PANEL_HEIGHT * selected.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.2}" height="{height:.2}" viewBox="0 0 {w:.2} {height:.2}">"#,
        w = PANEL_WIDTH
    );
    for (i, (name, paths)) in selected.iter().enumerate() {
        let taken = &paths[..style.max_paths.map_or(paths.len(), |m| m.min(paths.len()))];
        let mut bundles: BTreeMap<&[u16], u64> = BTreeMap::new();
        for p in taken {
            if p.band != band || p.experts.len() != graph.num_layers() {
                return Err(RenderError::BandMismatch {
                    band,
                    got: p.band,
                    len: p.experts.len(),
                });
            }
            for (l, &e) in p.experts.iter().enumerate() {
                if e as usize >= graph.experts(l) {
                    return Err(RenderError::ExpertOutOfRange {
                        layer: graph.layers[l],
                        expert: e,
                    });
                }
            }
            *bundles.entry(&p.experts).or_insert(0) += 1;
        }
        let max_w = bundles.values().copied().max().unwrap_or(1) as f64;
        let mut ordered: Vec<(&[u16], u64)> = bundles.into_iter().collect();
        ordered.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));

        let _ = writeln!(
            out,
            r#"<g class="panel" data-category="{}" transform="translate(0,{:.2})">"#,
            escape(name),
            PANEL_HEIGHT * i as f64
        );
        let _ = writeln!(
            out,
            r##"<rect x="0.00" y="0.00" width="{PANEL_WIDTH:.2}" height="{PANEL_HEIGHT:.2}" fill="#ffffff" stroke="#cccccc"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="16">{} ({} tokens)</text>"#,
            MARGIN_X,
            MARGIN_TOP / 2.0,
            escape(name),
            taken.len()
        );
        for (l, &x) in frame.xs.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">L{}</text>"#,
                PANEL_HEIGHT - MARGIN_BOTTOM / 3.0,
                graph.layers[l]
            );
            for &y in &frame.ys[l] {
                let _ = writeln!(
                    out,
                    r##"<circle cx="{x:.2}" cy="{y:.2}" r="2.50" fill="#888888"/>"##
                );
            }
        }
        for (experts, w) in ordered {
            let points: Vec<String> = experts
                .iter()
                .enumerate()
                .map(|(l, &e)| format!("{:.2},{:.2}", frame.xs[l], frame.ys[l][e as usize]))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{:.2}" stroke-opacity="{:.2}" data-weight="{w}"/>"#,
                points.join(" "),
                escape(&style.stroke),
                style.stroke_width,
                (w as f64 / max_w).max(MIN_OPACITY)
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Line chart of mean cosine per adjacent layer pair for both channels,
/// with the bootstrap interval drawn as a vertical bar.
pub fn render_continuity_svg(points: &[ContinuityPoint]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.2}" height="{h:.2}" viewBox="0 0 {w:.2} {h:.2}">"#,
        w = PANEL_WIDTH,
        h = PANEL_HEIGHT
    );
    let span = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y_of = |c: f64| MARGIN_TOP + (1.0 - c.clamp(-1.0, 1.0)) / 2.0 * span;
    let n = points.len();
    let x_of = |i: usize| {
        if n <= 1 {
            PANEL_WIDTH / 2.0
        } else {
            MARGIN_X + i as f64 * (PANEL_WIDTH - 2.0 * MARGIN_X) / (n - 1) as f64
        }
    };
    let _ = writeln!(
        out,
        r##"<rect x="0.00" y="0.00" width="{PANEL_WIDTH:.2}" height="{PANEL_HEIGHT:.2}" fill="#ffffff" stroke="#cccccc"/>"##
    );
    for c in [-1.0, 0.0, 1.0] {
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_X:.2}" y1="{y:.2}" x2="{x2:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{tx:.2}" y="{y:.2}" font-family="sans-serif" font-size="12" text-anchor="end">{c:.2}</text>"##,
            y = y_of(c),
            x2 = PANEL_WIDTH - MARGIN_X,
            tx = MARGIN_X - 8.0
        );
    }
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}→{}</text>"#,
            x_of(i),
            PANEL_HEIGHT - MARGIN_BOTTOM / 3.0,
            p.layer,
            p.next_layer
        );
    }
    let series: [(
        &str,
        &str,
        fn(&ContinuityPoint) -> &routelens_core::continuity::ChannelStat,
    ); 2] = [
        ("visible", "#d95f02", |p| &p.visible),
        ("blind", "#1b9e77", |p| &p.blind),
    ];
    for (name, color, stat) in series {
        let pts: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{:.2},{:.2}", x_of(i), y_of(stat(p).mean)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2.00"/>"#,
            pts.join(" ")
        );
        for (i, p) in points.iter().enumerate() {
            let s = stat(p);
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.00"/>"#,
                y_of(s.ci_high),
                y_of(s.ci_low),
                x = x_of(i)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

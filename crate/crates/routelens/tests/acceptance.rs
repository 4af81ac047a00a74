//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use routelens::analysis::{self, ProbeTarget};
use routelens::capture::Capture;
use routelens::corpus::{self, CorpusConfig};
use routelens::synth_io::write_synthetic;
use routelens_core::decomp::Channel;
use routelens_core::layout::{
    build_flow_graph, count_crossings, frequency_layout, sugiyama_layout, FlowGraph, FlowLayout,
};
use routelens_core::paths::{DiversityConfig, ExpertPath, GroupSampling, PassAll};
use routelens_core::probe::ProbeConfig;
use routelens_core::synth::{
    gen_synthetic_capture, plant_amplification, plant_paths, AmplifiedRouting, SurfacePlant,
    SynthSpec,
};
use routelens_core::{router_basis, CounterRng, Matrix, DEFAULT_SV_CUTOFF};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn write(spec_cap: routelens_core::synth::SyntheticCapture, dir: &Path) -> Capture {
    write_synthetic(&spec_cap, dir, "synthetic").expect("capture writes")
}

// Decomposition

/// Orthonormal basis of the row space of `r` by twice-iterated modified
/// Gram-Schmidt in f64.
fn gram_schmidt(r: &Matrix) -> Vec<Vec<f64>> {
    let scale = r
        .iter_rows()
        .map(|row| row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for row in r.iter_rows() {
        let mut v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        for _ in 0..2 {
            for b in &q {
                let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 * scale {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

/// `max |P² − P|` for `P = BᵀB`, computed as `Bᵀ(BBᵀ − I)B` in f64.
fn idempotence_defect(b: &Matrix) -> f64 {
    let (k, d) = (b.rows(), b.cols());
    let rows: Vec<Vec<f64>> = b
        .iter_rows()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            m[i][j] = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(x, y)| x * y)
                .sum::<f64>()
                - if i == j { 1.0 } else { 0.0 };
        }
    }
    // C = M·B (k × d), then (P²−P)[a][c] = Σ_i B[i][a]·C[i][c].
    let c: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..d)
                .map(|col| (0..k).map(|j| m[i][j] * rows[j][col]).sum())
                .collect()
        })
        .collect();
    let mut worst = 0.0f64;
    let mut line = vec![0.0; d];
    for a in 0..d {
        line.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..k {
            let bia = rows[i][a];
            for (dst, &cv) in line.iter_mut().zip(&c[i]) {
                *dst += bia * cv;
            }
        }
        worst = line.iter().fold(worst, |w, x| w.max(x.abs()));
    }
    worst
}

fn decomposition_invariants() -> Outcome {
    let start = Instant::now();
    // (N, D, routers, states per router): 1000 (R, h) pairs in all.
    let plan = [
        (8usize, 32usize, 400usize, 1usize),
        (32, 512, 40, 10),
        (128, 2048, 4, 50),
    ];
    let (mut p_defect, mut recon, mut leak, mut oracle) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut pairs = 0;
    let mut rng = CounterRng::new(2024, 0);
    for &(n, d, routers, per) in &plan {
        for _ in 0..routers {
            let r = Matrix::from_vec(n, d, rng.normal_vec(n * d)).unwrap();
            let basis = router_basis(&r, DEFAULT_SV_CUTOFF).map_err(|e| e.to_string())?;
            p_defect = p_defect.max(idempotence_defect(basis.basis_rows()));
            let q = gram_schmidt(&r);
            let r_inf = r.norm_inf();
            for _ in 0..per {
                // Scales spread over six orders of magnitude.
                let scale = 10f32.powf((rng.uniform() * 6.0 - 3.0) as f32);
                let h: Vec<f32> = rng.normal_vec(d).into_iter().map(|x| x * scale).collect();
                let h_inf = h.iter().fold(0.0f64, |m, x| m.max(x.abs() as f64));
                let ch = basis.decompose(&h).map_err(|e| e.to_string())?;
                for i in 0..d {
                    recon = recon.max(
                        (h[i] as f64 - (ch.visible[i] as f64 + ch.blind[i] as f64)).abs() / h_inf,
                    );
                }
                for e in 0..n {
                    let s: f64 = r
                        .row(e)
                        .iter()
                        .zip(&ch.blind)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    leak = leak.max(s.abs() / (r_inf * h_inf));
                }
                let coeffs: Vec<f64> = q
                    .iter()
                    .map(|b| b.iter().zip(&h).map(|(x, &y)| x * y as f64).sum())
                    .collect();
                for i in 0..d {
                    let want: f64 = q.iter().zip(&coeffs).map(|(b, c)| b[i] * c).sum();
                    oracle = oracle.max((ch.visible[i] as f64 - want).abs() / h_inf);
                }
                pairs += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        pairs == 1000 && p_defect <= 1e-5 && recon <= 1e-5 && leak <= 1e-4 && oracle <= 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{pairs} pairs; |P²-P| {p_defect:.2e}; |h-(vis+blind)|/|h| {recon:.2e}; |R·blind|/(|R||h|) {leak:.2e}; \
             Gram-Schmidt {oracle:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// Routing-information probes

fn causal_sufficiency(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        num_layers: 2,
        hidden_dim: 256,
        num_experts: 16,
        num_tokens: 20_000,
        seed: 1,
        ..SynthSpec::default()
    };
    let cap = write(
        gen_synthetic_capture(&spec).map_err(|e| e.to_string())?,
        &tmp.join("sufficiency"),
    );
    let cfg = ProbeConfig::default();
    let vis = analysis::probe_layer(&cap, 0, Channel::Visible, ProbeTarget::Expert, &cfg)
        .map_err(|e| e.to_string())?;
    let blind = analysis::probe_layer(&cap, 0, Channel::Blind, ProbeTarget::Expert, &cfg)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let bound = 2.0 / 16.0;
    check(
        vis.accuracy >= 0.99 && blind.accuracy <= bound && elapsed < Duration::from_secs(120),
        format!(
            "vis->E {:.4} (>= 0.99), blind->E {:.4} (<= {bound:.4}), {:.1}s",
            vis.accuracy,
            blind.accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

fn handoff(tmp: &Path) -> Outcome {
    let spec = SynthSpec {
        num_layers: 2,
        hidden_dim: 256,
        num_experts: 16,
        num_tokens: 20_000,
        seed: 2,
        handoff: true,
        blind_persistence: 0.3,
        ..SynthSpec::default()
    };
    let cap = write(
        gen_synthetic_capture(&spec).map_err(|e| e.to_string())?,
        &tmp.join("handoff"),
    );
    let cfg = ProbeConfig::default();
    let blind = analysis::probe_layer(&cap, 0, Channel::Blind, ProbeTarget::ExpertNext, &cfg)
        .map_err(|e| e.to_string())?;
    let vis = analysis::probe_layer(&cap, 0, Channel::Visible, ProbeTarget::ExpertNext, &cfg)
        .map_err(|e| e.to_string())?;
    check(
        blind.accuracy >= 0.90 && vis.accuracy <= 0.5 * blind.accuracy,
        format!(
            "blind->E(l+1) {:.4} (>= 0.90), vis->E(l+1) {:.4} (<= {:.4})",
            blind.accuracy,
            vis.accuracy,
            0.5 * blind.accuracy
        ),
    )
}

fn amplification(tmp: &Path) -> Outcome {
    let cfg = ProbeConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &target) in [0.0, 0.6, 0.9].iter().enumerate() {
        let spec = SynthSpec {
            num_layers: 4,
            hidden_dim: 1024,
            num_experts: 16,
            num_tokens: 2000,
            seed: 10 + i as u64,
            rho_target: target,
            ..SynthSpec::default()
        };
        let (synth, _) =
            plant_amplification(&spec, AmplifiedRouting::Dense).map_err(|e| e.to_string())?;
        let cap = write(synth, &tmp.join(format!("amp{i}")));
        let reports =
            analysis::amplify(&cap, cap.layers(), &[], 0, &cfg).map_err(|e| e.to_string())?;
        let rhos: Vec<f64> = reports.iter().map(|r| r.rho.unwrap_or(f64::NAN)).collect();
        let worst = rhos
            .iter()
            .map(|r| (r - target).abs())
            .fold(0.0f64, f64::max);
        ok &= worst <= 0.1;
        parts.push(format!(
            "target {target}: per-layer rho [{}]",
            rhos.iter()
                .map(|r| format!("{r:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    let spec = SynthSpec {
        num_layers: 1,
        hidden_dim: 1024,
        num_experts: 32,
        num_tokens: 5000,
        seed: 20,
        ..SynthSpec::default()
    };
    let (synth, _) = plant_amplification(
        &spec,
        AmplifiedRouting::Concentrated {
            fraction: 0.02,
            gain: 4.0,
        },
    )
    .map_err(|e| e.to_string())?;
    let cap = write(synth, &tmp.join("amp-top"));
    let report = analysis::amplify_layer(&cap, 0, &[0.02], 0, &cfg).map_err(|e| e.to_string())?;
    let row = &report.fractions[0];
    ok &= row.top_accuracy >= 10.0 * row.random_accuracy;
    parts.push(format!(
        "top-2% probe {:.3} vs random-2% {:.3} ({} dims, chance {:.3})",
        row.top_accuracy, row.random_accuracy, row.dims, report.chance
    ));
    check(ok, parts.join("; "))
}

fn continuity(tmp: &Path) -> Outcome {
    let spec = SynthSpec {
        num_layers: 4,
        hidden_dim: 256,
        num_experts: 16,
        num_tokens: 5000,
        seed: 3,
        blind_persistence: 0.9,
        ..SynthSpec::default()
    };
    let cap = write(
        gen_synthetic_capture(&spec).map_err(|e| e.to_string())?,
        &tmp.join("continuity"),
    );
    let points =
        analysis::channel_continuity(&cap, cap.layers(), 1000, 0).map_err(|e| e.to_string())?;
    let ok = points
        .iter()
        .all(|p| (0.85..=0.95).contains(&p.blind.mean) && p.visible.mean <= p.blind.mean - 0.3);
    let detail = points
        .iter()
        .map(|p| {
            format!(
                "{}->{}: blind {:.3}, vis {:.3}",
                p.layer, p.next_layer, p.blind.mean, p.visible.mean
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, detail)
}

fn surface_features(tmp: &Path) -> Outcome {
    let spec = SynthSpec {
        num_layers: 1,
        hidden_dim: 256,
        num_experts: 16,
        num_tokens: 10_000,
        seed: 4,
        vocab_size: 20,
        surface_plant: SurfacePlant::TokenIdInBlind,
        ..SynthSpec::default()
    };
    let cap = write(
        gen_synthetic_capture(&spec).map_err(|e| e.to_string())?,
        &tmp.join("surface"),
    );
    let cfg = ProbeConfig::default();
    let blind = analysis::probe_layer(&cap, 0, Channel::Blind, ProbeTarget::TokenId, &cfg)
        .map_err(|e| e.to_string())?;
    let vis = analysis::probe_layer(&cap, 0, Channel::Visible, ProbeTarget::TokenId, &cfg)
        .map_err(|e| e.to_string())?;
    let gap = blind.mi_percent - vis.mi_percent;
    check(
        gap >= 30.0,
        format!(
            "token-id MI% blind {:.1}, vis {:.1}, gap {gap:.1} (>= 30)",
            blind.mi_percent, vis.mi_percent
        ),
    )
}

// Paths and layout

fn paths(tmp: &Path) -> Outcome {
    let spec = SynthSpec {
        num_layers: 4,
        hidden_dim: 64,
        num_experts: 16,
        num_tokens: 6000,
        seed: 5,
        n_semantic_groups: 3,
        group_vocab: 4,
        control_noise: 0.3,
        surface_plant: SurfacePlant::TokenIdInBlind,
        ..SynthSpec::default()
    };
    let cap = write(
        plant_paths(&spec).map_err(|e| e.to_string())?,
        &tmp.join("paths"),
    );
    let (groups, _) = analysis::group_paths(&cap, (0, 3)).map_err(|e| e.to_string())?;
    let cfg = DiversityConfig {
        sample_size: 10,
        n_groups: 100,
        seed: 0,
        sampling: GroupSampling::Uniform,
    };
    let div = |ch| -> Result<f64, String> {
        let outcome =
            analysis::cluster_band(&cap, (0, 3), ch, None, 0).map_err(|e| e.to_string())?;
        Ok(analysis::cluster_diversity(&outcome, &cfg, &PassAll).mean_unique)
    };
    let (vis, blind) = (div(Channel::Visible)?, div(Channel::Blind)?);
    check(
        groups.len() == 3 && vis >= 3.5 && blind <= 1.5,
        format!("path groups {} (== 3); vis-cluster diversity {vis:.2} (>= 3.5); blind-cluster diversity {blind:.2} (<= 1.5)", groups.len()),
    )
}

fn brute_crossings(graph: &FlowGraph, layout: &FlowLayout) -> f64 {
    let pos = layout.positions();
    let mut total = 0u128;
    for (l, edges) in graph.edges.iter().enumerate() {
        let list: Vec<_> = edges.iter().collect();
        for (i, (&(a1, b1), &w1)) in list.iter().enumerate() {
            for (&(a2, b2), &w2) in &list[i + 1..] {
                let da = pos[l][a1 as usize] as i64 - pos[l][a2 as usize] as i64;
                let db = pos[l + 1][b1 as usize] as i64 - pos[l + 1][b2 as usize] as i64;
                if da * db < 0 {
                    total += (w1 * w2) as u128;
                }
            }
        }
    }
    total as f64
}

fn layout(tmp: &Path) -> Outcome {
    let mut rng = CounterRng::new(77, 0);
    let (mut not_worse, mut exact, mut brute_checked) = (0, 0, 0);
    for _ in 0..100 {
        let layers = 2 + rng.below(6) as usize;
        let experts: Vec<usize> = (0..layers).map(|_| 2 + rng.below(15) as usize).collect();
        let n = 1 + rng.below(400) as usize;
        // A few hot paths plus noise, like real routing.
        let hot: Vec<Vec<u16>> = (0..4)
            .map(|_| {
                experts
                    .iter()
                    .map(|&e| rng.below(e as u64) as u16)
                    .collect()
            })
            .collect();
        let paths: Vec<ExpertPath> = (0..n)
            .map(|_| ExpertPath {
                band: (0, layers as u32 - 1),
                experts: if rng.uniform() < 0.5 {
                    hot[rng.below(4) as usize].clone()
                } else {
                    experts
                        .iter()
                        .map(|&e| rng.below(e as u64) as u16)
                        .collect()
                },
            })
            .collect();
        let ids: Vec<u32> = (0..layers as u32).collect();
        let g = build_flow_graph(&paths, &ids, &experts).map_err(|e| e.to_string())?;
        let init = frequency_layout(&g);
        let swept = sugiyama_layout(&g, 1).map_err(|e| e.to_string())?;
        let (ci, cs) = (
            count_crossings(&g, &init).unwrap(),
            count_crossings(&g, &swept).unwrap(),
        );
        not_worse += usize::from(cs <= ci);
        if g.edges.iter().map(|e| e.len()).sum::<usize>() <= 500 {
            brute_checked += 1;
            exact +=
                usize::from(ci == brute_crossings(&g, &init) && cs == brute_crossings(&g, &swept));
        }
    }
    let built = corpus::write_colon_capture(tmp.join("colon"), &CorpusConfig::default())
        .map_err(|e| e.to_string())?;
    let last = *built.capture.layers().last().unwrap();
    let pooled =
        analysis::pooled_layout(&built.capture, (0, last), 1).map_err(|e| e.to_string())?;
    let ci = count_crossings(&pooled.graph, &pooled.initial).unwrap();
    let cs = count_crossings(&pooled.graph, &pooled.layout).unwrap();
    check(
        not_worse == 100 && exact == brute_checked && brute_checked > 0 && cs <= ci,
        format!(
            "swept <= init on {not_worse}/100 random graphs; brute force exact on {exact}/{brute_checked} graphs with <= 500 edges; \
             colon corpus {cs} <= {ci}"
        ),
    )
}

// Determinism

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_routelens"))
        .args(args)
        .env_remove("ROUTELENS_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(o.stdout)
}

/// Stdout plus every file under `outputs`, in name order.
fn snapshot(stdout: Vec<u8>, outputs: &[&Path]) -> Vec<(String, Vec<u8>)> {
    let mut snap = vec![("stdout".to_string(), stdout)];
    for p in outputs {
        if p.is_dir() {
            let mut names: Vec<_> = std::fs::read_dir(p)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            names.sort();
            snap.extend(
                names
                    .into_iter()
                    .map(|n| (n.display().to_string(), std::fs::read(&n).unwrap())),
            );
        } else {
            snap.push((p.display().to_string(), std::fs::read(p).unwrap()));
        }
    }
    snap
}

fn determinism(tmp: &Path) -> Outcome {
    let root = tmp.join("determinism");
    std::fs::create_dir_all(&root).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let spec = root.join("spec.json");
    std::fs::write(
        &spec,
        r#"{"generator": "paths", "num_layers": 4, "hidden_dim": 64, "num_experts": 8, "num_tokens": 1500,
            "n_semantic_groups": 3, "surface_plant": "token_id_in_blind", "handoff": true}"#,
    )
    .unwrap();
    let cap = root.join("cap");
    let colon = root.join("colon");
    let (dec, rep, svg, groups, fig) = (
        root.join("dec"),
        root.join("report.json"),
        root.join("cont.svg"),
        root.join("groups.jsonl"),
        root.join("fig.svg"),
    );
    let commands: Vec<(Vec<String>, Vec<&Path>)> = vec![
        (
            vec![
                "synth".into(),
                "--spec".into(),
                s(&spec),
                "--out".into(),
                s(&cap),
            ],
            vec![cap.as_path()],
        ),
        (
            vec![
                "synth".into(),
                "--colon-corpus".into(),
                "--out".into(),
                s(&colon),
            ],
            vec![colon.as_path()],
        ),
        (vec!["validate".into(), "--capture".into(), s(&cap)], vec![]),
        (
            vec![
                "decompose".into(),
                "--capture".into(),
                s(&cap),
                "--layer".into(),
                "0..4".into(),
                "--out".into(),
                s(&dec),
            ],
            vec![dec.as_path()],
        ),
        (
            vec![
                "amplify".into(),
                "--capture".into(),
                s(&cap),
                "--out".into(),
                s(&rep),
            ],
            vec![rep.as_path()],
        ),
        (
            vec![
                "probe".into(),
                "--capture".into(),
                s(&cap),
                "--target".into(),
                "expert-next".into(),
                "--channel".into(),
                "blind".into(),
            ],
            vec![],
        ),
        (
            vec![
                "probe".into(),
                "--capture".into(),
                s(&cap),
                "--target".into(),
                "token-id".into(),
                "--channel".into(),
                "vis".into(),
            ],
            vec![],
        ),
        (
            vec![
                "continuity".into(),
                "--capture".into(),
                s(&cap),
                "--boot".into(),
                "300".into(),
                "--svg".into(),
                s(&svg),
            ],
            vec![svg.as_path()],
        ),
        (
            vec![
                "paths".into(),
                "--capture".into(),
                s(&cap),
                "--band".into(),
                "0:3".into(),
                "--out".into(),
                s(&groups),
            ],
            vec![groups.as_path()],
        ),
        (
            vec![
                "cluster".into(),
                "--capture".into(),
                s(&cap),
                "--band".into(),
                "0:3".into(),
                "--subspace".into(),
                "blind".into(),
            ],
            vec![],
        ),
        (
            vec![
                "render".into(),
                "--capture".into(),
                s(&colon),
                "--band".into(),
                "0:7".into(),
                "--categories".into(),
                s(&colon.join(corpus::LABELS_FILE)),
                "--out".into(),
                s(&fig),
            ],
            vec![fig.as_path()],
        ),
    ];
    let mut identical = 0;
    let mut differing = Vec::new();
    for (args, outputs) in &commands {
        let mut snaps = Vec::new();
        for threads in ["1", "1", "8", "8"] {
            let mut full = vec!["--seed", "3", "--threads", threads];
            full.extend(args.iter().map(String::as_str));
            let out = run_cli(&full)?;
            snaps.push(snapshot(out, outputs));
        }
        if snaps.windows(2).all(|w| w[0] == w[1]) {
            identical += 1;
        } else {
            differing.push(args[0].clone());
        }
    }
    check(
        differing.is_empty(),
        format!(
            "{identical}/{} commands byte-identical over 2 runs x threads {{1, 8}}{}",
            commands.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {differing:?}")
            }
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let t = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (
            "decomposition invariants",
            Box::new(decomposition_invariants),
        ),
        ("causal sufficiency", Box::new(|| causal_sufficiency(t))),
        ("hand-off", Box::new(|| handoff(t))),
        ("amplification", Box::new(|| amplification(t))),
        ("continuity", Box::new(|| continuity(t))),
        (
            "surface-feature placement",
            Box::new(|| surface_features(t)),
        ),
        ("paths", Box::new(|| paths(t))),
        ("layout", Box::new(|| layout(t))),
        ("determinism", Box::new(|| determinism(t))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

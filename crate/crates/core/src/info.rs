//! Plug-in entropy and mutual information over discrete labels (nats).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

/// Plug-in Shannon entropy of `labels`.
pub fn entropy(labels: &[u32]) -> f64 {
    let n = labels.len() as f64;
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * libm::log(p)
        })
        .sum::<f64>()
}

/// Plug-in `I(a; b)` from paired samples.
pub fn mutual_information(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples required");
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut ma: BTreeMap<u32, u64> = BTreeMap::new();
    let mut mb: BTreeMap<u32, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    let terms: Vec<f64> = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ma[&x] as f64 / n;
            let py = mb[&y] as f64 / n;
            pxy * libm::log(pxy / (px * py))
        })
        .collect();
    crate::matrix::pairwise_sum(&terms).max(0.0)
}

/// `100 · I(pred; truth) / H(truth)`, clamped to `[0, 100]`.
///
/// Returns 0 when `truth` has zero entropy.
pub fn normalized_mi_percent(pred: &[u32], truth: &[u32]) -> f64 {
    let h = entropy(truth);
    if h <= 0.0 {
        return 0.0;
    }
    (100.0 * mutual_information(pred, truth) / h).clamp(0.0, 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn perfect_and_constant_predictors() {
        let y = vec![0, 1, 0, 1, 1, 0];
        assert!((normalized_mi_percent(&y, &y) - 100.0).abs() < 1e-9);
        assert_eq!(normalized_mi_percent(&[7; 6], &y), 0.0);
    }

    #[test]
    fn entropy_of_uniform() {
        let y: Vec<u32> = (0..8).collect();
        assert!((entropy(&y) - libm::log(8.0)).abs() < 1e-12);
        assert_eq!(entropy(&[3, 3, 3]), 0.0);
    }

    #[test]
    fn relabeling_invariant() {
        let p = vec![0, 1, 1, 2, 0, 2, 1];
        let t = vec![0, 1, 2, 2, 0, 1, 1];
        let p2: Vec<u32> = p.iter().map(|x| 10 - x).collect();
        let t2: Vec<u32> = t.iter().map(|x| x * 5 + 1).collect();
        let a = normalized_mi_percent(&p, &t);
        let b = normalized_mi_percent(&p2, &t2);
        assert!((a - b).abs() < 1e-9);
    }
}

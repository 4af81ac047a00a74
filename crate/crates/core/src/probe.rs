//! Linear probes: multinomial logistic regression on standardized features.
//!
//! Fitting minimizes mean cross-entropy plus `l2_lambda · ‖W‖²` (bias not
//! penalized) with full-batch L-BFGS and a backtracking Armijo line search.
//! The only randomness is the stratified train/test split, so a fit is a
//! pure function of `(features, labels, config)`.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::info;
use crate::matrix::Matrix;
use crate::rng::CounterRng;

const LBFGS_MEMORY: usize = 10;
const RNG_STREAM_SPLIT: u64 = 0x5350_4c49_54; // "SPLIT"

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("need at least two label classes")]
    SingleClass,
    #[error("class {class} has {count} sample(s); both splits need at least one")]
    DegenerateSplit { class: u32, count: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("no samples")]
    EmptyInput,
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ProbeConfig {
    pub l2_lambda: f64,
    pub max_epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Stop once one iteration improves the loss by less than this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            max_epochs: 500,
            train_fraction: 0.8,
            seed: 0,
            tolerance: 1e-6,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<(), ProbeError> {
        if !(self.l2_lambda >= 0.0) {
            return Err(ProbeError::InvalidConfig("l2_lambda must be non-negative"));
        }
        if self.max_epochs == 0 {
            return Err(ProbeError::InvalidConfig("max_epochs must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ProbeError::InvalidConfig(
                "train_fraction must be in (0, 1)",
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(ProbeError::InvalidConfig("tolerance must be positive"));
        }
        Ok(())
    }
}

/// A trained probe plus the split it was trained on.
#[derive(Debug, Clone)]
pub struct FittedProbe {
    classes: Vec<u32>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `C × F`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
    final_loss: f64,
    iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_class_accuracy: BTreeMap<u32, f64>,
    /// Class ids indexing the confusion matrix.
    pub classes: Vec<u32>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MiResult {
    pub mi_percent: f64,
    /// Entropy of the held-out labels, in nats.
    pub label_entropy: f64,
    pub accuracy: f64,
}

/// Stratified split: each class contributes `⌊fraction·n_c⌋` rows to
/// training, clamped so both sides keep at least one row.
pub fn stratified_split(
    labels: &[u32],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let rng = CounterRng::new(seed, RNG_STREAM_SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&class, rows) in &by_class {
        if rows.len() < 2 {
            return Err(ProbeError::DegenerateSplit {
                class,
                count: rows.len(),
            });
        }
        let mut rows = rows.clone();
        rng.fork(class as u64).shuffle(&mut rows);
        let n_train = ((train_fraction * rows.len() as f64) as usize).clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Splits `features`/`labels`, fits on the training rows and keeps the
/// held-out rows for [`FittedProbe::held_out`].
pub fn fit_probe(
    features: &Matrix,
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<FittedProbe, ProbeError> {
    cfg.validate()?;
    if features.rows() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            rows: features.rows(),
            labels: labels.len(),
        });
    }
    if features.cols() == 0 || labels.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let (train_rows, test_rows) = stratified_split(labels, cfg.train_fraction, cfg.seed)?;
    let mut probe = fit_rows(features, labels, &train_rows, cfg);
    probe.train_rows = train_rows;
    probe.test_rows = test_rows;
    Ok(probe)
}

fn fit_rows(features: &Matrix, labels: &[u32], rows: &[usize], cfg: &ProbeConfig) -> FittedProbe {
    let f = features.cols();
    let n = rows.len();
    let classes: Vec<u32> = rows
        .iter()
        .map(|&i| labels[i])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_index: BTreeMap<u32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut mean = vec![0.0f64; f];
    for &i in rows {
        for (m, &x) in mean.iter_mut().zip(features.row(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; f];
    for &i in rows {
        for ((v, &x), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            let d = x as f64 - m;
            *v += d * d;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .zip(&mean)
        .map(|(&v, &m)| {
            let sd = libm::sqrt(v / n as f64);
            // Constant (or numerically constant) features carry nothing.
            if sd > 1e-12 * (1.0 + libm::fabs(m)) {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();

    let mut x = Vec::with_capacity(n * f);
    for &i in rows {
        x.extend(
            features
                .row(i)
                .iter()
                .zip(&mean)
                .zip(&inv_std)
                .map(|((&v, m), s)| (v as f64 - m) * s),
        );
    }
    let y: Vec<usize> = rows.iter().map(|&i| class_index[&labels[i]]).collect();

    let objective = Objective {
        x: &x,
        y: &y,
        n,
        f,
        c: classes.len(),
        lambda: cfg.l2_lambda,
    };
    let (theta, final_loss, iterations) = lbfgs(&objective, cfg.max_epochs, cfg.tolerance);
    let c = classes.len();
    FittedProbe {
        classes,
        mean,
        inv_std,
        weights: theta[..c * f].to_vec(),
        bias: theta[c * f..].to_vec(),
        train_rows: Vec::new(),
        test_rows: Vec::new(),
        final_loss,
        iterations,
    }
}

struct Objective<'a> {
    x: &'a [f64],
    y: &'a [usize],
    n: usize,
    f: usize,
    c: usize,
    lambda: f64,
}

impl Objective<'_> {
    fn dim(&self) -> usize {
        self.c * (self.f + 1)
    }

    /// Loss and gradient at `theta = [W (C×F) | b (C)]`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (f, c) = (self.f, self.c);
        let (w, b) = theta.split_at(c * f);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut logits = vec![0.0f64; c];
        let mut losses = Vec::with_capacity(self.n);
        {
            let (gw, gb) = grad.split_at_mut(c * f);
            for (xi, &yi) in self.x.chunks_exact(f).zip(self.y) {
                for (k, z) in logits.iter_mut().enumerate() {
                    *z = b[k] + dot4(&w[k * f..(k + 1) * f], xi);
                }
                let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let zy = logits[yi];
                let mut denom = 0.0;
                for z in logits.iter_mut() {
                    *z = libm::exp(*z - zmax);
                    denom += *z;
                }
                losses.push(libm::log(denom) + zmax - zy);
                for (k, p) in logits.iter().enumerate() {
                    let g = p / denom - if k == yi { 1.0 } else { 0.0 };
                    if g == 0.0 {
                        continue;
                    }
                    gb[k] += g;
                    for (gwk, &xv) in gw[k * f..(k + 1) * f].iter_mut().zip(xi) {
                        *gwk += g * xv;
                    }
                }
            }
        }
        let inv_n = 1.0 / self.n as f64;
        grad.iter_mut().for_each(|g| *g *= inv_n);
        let mut penalty = 0.0;
        for (g, &wv) in grad[..c * f].iter_mut().zip(w) {
            *g += 2.0 * self.lambda * wv;
            penalty += wv * wv;
        }
        crate::matrix::pairwise_sum(&losses) * inv_n + self.lambda * penalty
    }
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    dot4(a, b)
}

/// Limited-memory BFGS; returns `(theta, loss, iterations)`.
fn lbfgs(obj: &Objective<'_>, max_iter: usize, tolerance: f64) -> (Vec<f64>, f64, usize) {
    let dim = obj.dim();
    let mut theta = vec![0.0f64; dim];
    let mut grad = vec![0.0f64; dim];
    let mut loss = obj.eval(&theta, &mut grad);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut dir = vec![0.0f64; dim];
    let mut trial = vec![0.0f64; dim];
    let mut trial_grad = vec![0.0f64; dim];
    let mut alpha_buf = vec![0.0f64; LBFGS_MEMORY];
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let gnorm = libm::sqrt(vdot(&grad, &grad));
        if gnorm < 1e-12 {
            break;
        }

        // Two-loop recursion.
        dir.copy_from_slice(&grad);
        for (k, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * vdot(s, &dir);
            alpha_buf[k] = a;
            dir.iter_mut().zip(y).for_each(|(d, yv)| *d -= a * yv);
        }
        let gamma = history
            .back()
            .map_or(1.0 / gnorm, |(s, y, _)| vdot(s, y) / vdot(y, y));
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (k, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * vdot(y, &dir);
            let a = alpha_buf[k];
            dir.iter_mut().zip(s).for_each(|(d, sv)| *d += (a - b) * sv);
        }
        dir.iter_mut().for_each(|d| *d = -*d);

        let mut slope = vdot(&grad, &dir);
        if !(slope < 0.0) {
            // Not a descent direction: restart from steepest descent.
            history.clear();
            dir.iter_mut().zip(&grad).for_each(|(d, g)| *d = -g / gnorm);
            slope = -gnorm;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            trial
                .iter_mut()
                .zip(&theta)
                .zip(&dir)
                .for_each(|((t, x), d)| *t = x + step * d);
            let trial_loss = obj.eval(&trial, &mut trial_grad);
            if trial_loss.is_finite() && trial_loss <= loss + 1e-4 * step * slope {
                accepted = Some(trial_loss);
                break;
            }
            step *= 0.5;
        }
        let Some(new_loss) = accepted else { break };

        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = vdot(&s, &y);
        if sy > 1e-12 * vdot(&y, &y).max(1e-300) {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        theta.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        let improvement = loss - new_loss;
        loss = new_loss;
        if improvement < tolerance {
            break;
        }
    }
    (theta, loss, iterations)
}

impl FittedProbe {
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    pub fn train_rows(&self) -> &[usize] {
        &self.train_rows
    }

    /// Rows of the fitting input held out from training.
    pub fn held_out(&self) -> &[usize] {
        &self.test_rows
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Predicted class per row; ties go to the lowest class id.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<u32>, ProbeError> {
        let f = self.num_features();
        if features.cols() != f {
            return Err(ProbeError::DimensionMismatch {
                expected: f,
                got: features.cols(),
            });
        }
        let c = self.classes.len();
        let mut z = vec![0.0f64; f];
        Ok(features
            .iter_rows()
            .map(|row| {
                for (((zv, &x), m), s) in z.iter_mut().zip(row).zip(&self.mean).zip(&self.inv_std) {
                    *zv = (x as f64 - m) * s;
                }
                let mut best = (0usize, f64::NEG_INFINITY);
                for k in 0..c {
                    let logit = self.bias[k] + dot4(&self.weights[k * f..(k + 1) * f], &z);
                    if logit > best.1 {
                        best = (k, logit);
                    }
                }
                self.classes[best.0]
            })
            .collect())
    }
}

/// Scores `fitted` on `features`/`labels`.
pub fn eval_probe(
    fitted: &FittedProbe,
    features: &Matrix,
    labels: &[u32],
) -> Result<ProbeResult, ProbeError> {
    if features.rows() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            rows: features.rows(),
            labels: labels.len(),
        });
    }
    let pred = fitted.predict(features)?;
    Ok(score(
        &pred,
        labels,
        fitted.classes(),
        fitted.train_rows.len(),
    ))
}

fn score(pred: &[u32], truth: &[u32], known: &[u32], n_train: usize) -> ProbeResult {
    let classes: Vec<u32> = known
        .iter()
        .chain(truth)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    for (p, t) in pred.iter().zip(truth) {
        confusion[index[t]][index[p]] += 1;
    }
    let correct: u64 = (0..classes.len()).map(|i| confusion[i][i]).sum();
    let mut per_class_accuracy = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        let total: u64 = confusion[i].iter().sum();
        if total > 0 {
            per_class_accuracy.insert(c, confusion[i][i] as f64 / total as f64);
        }
    }
    ProbeResult {
        accuracy: if truth.is_empty() {
            0.0
        } else {
            correct as f64 / truth.len() as f64
        },
        per_class_accuracy,
        classes,
        confusion,
        n_train,
        n_test: truth.len(),
    }
}

/// Fits on the training split and evaluates on the held-out rows.
pub fn fit_and_evaluate(
    features: &Matrix,
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<(FittedProbe, ProbeResult), ProbeError> {
    let fitted = fit_probe(features, labels, cfg)?;
    let test = features.select_rows(fitted.held_out());
    let test_labels: Vec<u32> = fitted.held_out().iter().map(|&i| labels[i]).collect();
    let result = eval_probe(&fitted, &test, &test_labels)?;
    Ok((fitted, result))
}

/// Held-out accuracy of a probe.
pub fn probe_accuracy(
    features: &Matrix,
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64, ProbeError> {
    Ok(fit_and_evaluate(features, labels, cfg)?.1.accuracy)
}

/// Normalized mutual information between a probe's held-out predictions and
/// the true labels.
pub fn mi_percent(
    features: &Matrix,
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<MiResult, ProbeError> {
    let fitted = fit_probe(features, labels, cfg)?;
    let test = features.select_rows(fitted.held_out());
    let truth: Vec<u32> = fitted.held_out().iter().map(|&i| labels[i]).collect();
    let pred = fitted.predict(&test)?;
    let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(MiResult {
        mi_percent: info::normalized_mi_percent(&pred, &truth),
        label_entropy: info::entropy(&truth),
        accuracy: correct as f64 / truth.len() as f64,
    })
}

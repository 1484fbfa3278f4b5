//! Cross-sectional regressions of full-match CARs/CAVs on outcome, stake and
//! knockout dummies, by OLS and by a bisquare MM-estimator.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{MatchEvent, Outcome, Stage};
use crate::inference::student_t_two_sided;
use crate::parallel::{map_collect, Execution};

pub const REGRESSION_CSV_HEADER: &str = "spec,estimator,term,coefficient,std_error,p_value,r2,adj_or_pseudo_r2,n,converged";
pub const DEFAULT_TOKEN_REFERENCE: &str = "SNFT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("design matrix has rank {rank} < {columns} columns")]
    RankDeficient { rank: usize, columns: usize },
    #[error("need more observations than parameters: n = {n}, k = {k}")]
    TooFewObservations { n: usize, k: usize },
    #[error("length mismatch: {rows} design rows vs {values} responses")]
    LengthMismatch { rows: usize, values: usize },
    #[error("MM M-step did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("non-finite response value")]
    NonFinite,
    #[error("no events supplied")]
    EmptyInput,
    #[error("regression csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, RegressionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependent {
    CarFullMatch,
    CavFullMatch,
}

impl Dependent {
    pub fn as_str(self) -> &'static str {
        match self {
            Dependent::CarFullMatch => "car",
            Dependent::CavFullMatch => "cav",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationForm {
    Outcome,
    OutcomeControls,
    StakeSplit,
    Knockout,
    KnockoutControls,
}

impl EquationForm {
    pub const ALL: [EquationForm; 5] = [
        EquationForm::Outcome,
        EquationForm::OutcomeControls,
        EquationForm::StakeSplit,
        EquationForm::Knockout,
        EquationForm::KnockoutControls,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EquationForm::Outcome => "outcome",
            EquationForm::OutcomeControls => "outcome_controls",
            EquationForm::StakeSplit => "stake_split",
            EquationForm::Knockout => "knockout",
            EquationForm::KnockoutControls => "knockout_controls",
        }
    }

    pub fn has_controls(self) -> bool {
        matches!(self, EquationForm::OutcomeControls | EquationForm::KnockoutControls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ols,
    Mm,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Ols => "ols",
            Estimator::Mm => "mm",
        }
    }
}

/// Which dummy families make up the controls in the controlled forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSet {
    #[default]
    StageAndToken,
    StageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub dependent: Dependent,
    pub form: EquationForm,
    pub estimator: Estimator,
}

impl RegressionSpec {
    pub fn label(&self) -> String {
        format!("{}:{}", self.dependent.as_str(), self.form.as_str())
    }

    /// Columns (a) to (j): OLS on each form, then MM on each form.
    pub fn table_layout(dependent: Dependent) -> Vec<RegressionSpec> {
        [Estimator::Ols, Estimator::Mm]
            .into_iter()
            .flat_map(|estimator| EquationForm::ALL.into_iter().map(move |form| RegressionSpec { dependent, form, estimator }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.labels.len()
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let j = self.labels.iter().position(|l| l == label)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_rows(), self.n_cols(), |i, j| self.rows[i][j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub controls: ControlSet,
    pub token_reference: String,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { controls: ControlSet::default(), token_reference: DEFAULT_TOKEN_REFERENCE.to_string() }
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

type StagePredicate = fn(Stage) -> bool;

const STAGE_CONTROLS: [(&str, StagePredicate); 4] = [
    ("stage_group", |s| s.is_group()),
    ("stage_round_of_16", |s| s == Stage::RoundOf16),
    ("stage_quarter_final", |s| s == Stage::QuarterFinal),
    ("stage_final", |s| s == Stage::Final),
];

/// Builds the dummy design; draws, the reference token and semi-finals are
/// the omitted categories.
pub fn build_design_matrix(events: &[MatchEvent], form: EquationForm, options: &DesignOptions) -> Result<DesignMatrix> {
    if events.is_empty() {
        return Err(RegressionError::EmptyInput);
    }
    let mut labels: Vec<String> = vec!["intercept".into()];
    let outcome_terms: &[&str] = match form {
        EquationForm::Outcome | EquationForm::OutcomeControls => &["win", "loss"],
        EquationForm::StakeSplit => &["win_low", "win_high", "loss_low", "loss_high"],
        EquationForm::Knockout | EquationForm::KnockoutControls => &["win", "loss", "loss_knockout"],
    };
    labels.extend(outcome_terms.iter().map(|s| s.to_string()));

    let tokens: Vec<String> = if form.has_controls() && options.controls == ControlSet::StageAndToken {
        events
            .iter()
            .map(|e| e.token_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|t| *t != options.token_reference)
            .collect()
    } else {
        Vec::new()
    };
    if form.has_controls() {
        labels.extend(STAGE_CONTROLS.iter().map(|(l, _)| l.to_string()));
        labels.extend(tokens.iter().map(|t| format!("token_{t}")));
    }

    let rows = events
        .iter()
        .map(|e| {
            let win = indicator(e.outcome == Outcome::Victory);
            let loss = indicator(e.outcome == Outcome::Defeat);
            let low = indicator(!e.stage.is_high_stake());
            let high = indicator(e.stage.is_high_stake());
            let mut row = vec![1.0];
            match form {
                EquationForm::Outcome | EquationForm::OutcomeControls => row.extend([win, loss]),
                EquationForm::StakeSplit => row.extend([win * low, win * high, loss * low, loss * high]),
                EquationForm::Knockout | EquationForm::KnockoutControls => {
                    row.extend([win, loss, loss * indicator(e.stage.is_knockout())])
                }
            }
            if form.has_controls() {
                row.extend(STAGE_CONTROLS.iter().map(|(_, f)| indicator(f(e.stage))));
                row.extend(tokens.iter().map(|t| indicator(e.token_id == *t)));
            }
            row
        })
        .collect();

    let design = DesignMatrix { labels, rows };
    check_rank(&design.to_matrix())?;
    Ok(design)
}

fn numerical_rank(x: &DMatrix<f64>) -> usize {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    sv.iter().filter(|s| **s > tol).count()
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let rank = numerical_rank(x);
    if rank < x.ncols() {
        return Err(RegressionError::RankDeficient { rank, columns: x.ncols() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    /// `None` when the standard error is zero.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub estimator: Estimator,
    pub coefficients: Vec<Coefficient>,
    pub r_squared: f64,
    pub adj_r_squared: Option<f64>,
    pub pseudo_r_squared: Option<f64>,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Residual scale: sqrt(SSR/(n−k)) for OLS, the S-scale for MM.
    pub scale: f64,
}

impl RegressionResult {
    pub fn coefficient(&self, term: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.term == term)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    pub fn adj_or_pseudo(&self) -> Option<f64> {
        match self.estimator {
            Estimator::Ols => self.adj_r_squared,
            Estimator::Mm => self.pseudo_r_squared,
        }
    }
}

fn validate_inputs(x: &DesignMatrix, y: &[f64]) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(RegressionError::LengthMismatch { rows: x.n_rows(), values: y.len() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite);
    }
    let (n, k) = (x.n_rows(), x.n_cols());
    if n <= k {
        return Err(RegressionError::TooFewObservations { n, k });
    }
    Ok(())
}

/// Least squares via thin QR; returns None when R is singular.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|d| d.abs() <= scale * 1e-12 * x.nrows() as f64) {
        return None;
    }
    r.solve_upper_triangular(&qty)
}

fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * sw[i]);
    let yw = DVector::from_fn(y.len(), |i, _| y[i] * sw[i]);
    least_squares(&xw, &yw)
}

fn xtx_inverse(x: &DMatrix<f64>) -> DMatrix<f64> {
    let r = x.clone().qr().r();
    let rinv = r.try_inverse().expect("full-rank design");
    &rinv * rinv.transpose()
}

fn total_ss(y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m).powi(2)).sum()
}

fn coefficients(labels: &[String], beta: &DVector<f64>, cov_diag: &[f64], df: f64) -> Vec<Coefficient> {
    labels
        .iter()
        .enumerate()
        .map(|(j, term)| {
            let se = cov_diag[j].max(0.0).sqrt();
            let p_value = (se > 0.0).then(|| student_t_two_sided(beta[j] / se, df));
            Coefficient { term: term.clone(), estimate: beta[j], std_error: se, p_value }
        })
        .collect()
}

/// OLS with classical standard errors.
pub fn fit_ols(x: &DesignMatrix, y: &[f64]) -> Result<RegressionResult> {
    validate_inputs(x, y)?;
    let xm = x.to_matrix();
    check_rank(&xm)?;
    let (n, k) = (x.n_rows(), x.n_cols());
    let yv = DVector::from_column_slice(y);
    let beta = least_squares(&xm, &yv).ok_or(RegressionError::RankDeficient { rank: k - 1, columns: k })?;
    let resid = &yv - &xm * &beta;
    let ssr = resid.norm_squared();
    let df = (n - k) as f64;
    let sigma2 = ssr / df;
    let inv = xtx_inverse(&xm);
    let cov_diag: Vec<f64> = (0..k).map(|j| sigma2 * inv[(j, j)]).collect();
    let sst = total_ss(y);
    let r_squared = if sst > 0.0 { (1.0 - ssr / sst).clamp(0.0, 1.0) } else { 1.0 };
    Ok(RegressionResult {
        estimator: Estimator::Ols,
        coefficients: coefficients(&x.labels, &beta, &cov_diag, df),
        r_squared,
        adj_r_squared: Some(1.0 - (1.0 - r_squared) * (n - 1) as f64 / df),
        pseudo_r_squared: None,
        n_obs: n,
        converged: true,
        iterations: 0,
        scale: sigma2.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmConfig {
    /// Bisquare tuning for the M-step (95% normal efficiency).
    pub efficiency_constant: f64,
    /// Bisquare tuning for the S-step (50% breakdown with b = 0.5).
    pub s_constant: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub n_subsamples: usize,
    pub seed: u64,
    pub concentration_steps: usize,
    pub keep_best: usize,
    pub execution: Execution,
}

impl Default for MmConfig {
    fn default() -> Self {
        MmConfig {
            efficiency_constant: 4.685,
            s_constant: 1.5476,
            tol: 1e-8,
            max_iter: 200,
            n_subsamples: 500,
            seed: 20221120,
            concentration_steps: 2,
            keep_best: 5,
            execution: Execution::default(),
        }
    }
}

const S_BREAKDOWN: f64 = 0.5;

/// Tukey bisquare ρ normalised to 1 at |u| ≥ c.
pub fn bisquare_rho(u: f64, c: f64) -> f64 {
    let t = u / c;
    if t.abs() >= 1.0 {
        1.0
    } else {
        let a = 1.0 - t * t;
        1.0 - a * a * a
    }
}

/// ψ(u)/u up to a constant factor.
pub fn bisquare_weight(u: f64, c: f64) -> f64 {
    let t = u / c;
    if t.abs() >= 1.0 {
        0.0
    } else {
        let a = 1.0 - t * t;
        a * a
    }
}

fn bisquare_psi(u: f64, c: f64) -> f64 {
    u * bisquare_weight(u, c)
}

fn bisquare_psi_prime(u: f64, c: f64) -> f64 {
    let t = u / c;
    if t.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - t * t) * (1.0 - 5.0 * t * t)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// M-scale solving mean ρ(r/s) = b by fixed-point iteration.
pub fn m_scale(residuals: &[f64], c: f64, b: f64) -> f64 {
    let n = residuals.len() as f64;
    let nonzero = residuals.iter().filter(|r| **r != 0.0).count() as f64;
    // ρ tends to 1 for every nonzero residual as s shrinks
    if nonzero <= b * n {
        return 0.0;
    }
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let mut s = median(&mut abs) / 0.6745;
    if s <= 0.0 {
        s = abs.iter().fold(0.0f64, |m, v| m.max(*v));
    }
    for _ in 0..200 {
        let mean_rho = residuals.iter().map(|r| bisquare_rho(r / s, c)).sum::<f64>() / n;
        let next = s * (mean_rho / b).sqrt();
        if (next - s).abs() <= 1e-12 * s {
            return next;
        }
        s = next;
    }
    s
}

fn residuals(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (y - x * beta).iter().copied().collect()
}

/// S-step scale with the right-hand side b(n - k)/n, so that a subset fit
/// with k exact zeros cannot drive the scale to zero when n is close to 2k.
fn s_scale(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, c0: f64) -> f64 {
    let (n, k) = (x.nrows() as f64, x.ncols() as f64);
    m_scale(&residuals(x, y, beta), c0, S_BREAKDOWN * (n - k) / n)
}

/// Picks k rows in permutation order, skipping rows that do not raise the rank.
fn elemental_subset(x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (n, k) = (x.nrows(), x.ncols());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut chosen = Vec::with_capacity(k);
    for i in order {
        let row = x.row(i).transpose();
        let mut v = row.clone();
        for b in &basis {
            let proj = v.dot(b);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm > 1e-9 * row.norm().max(1e-300) {
            basis.push(v / norm);
            chosen.push(i);
            if chosen.len() == k {
                break;
            }
        }
    }
    chosen
}

#[derive(Debug, Clone)]
struct Candidate {
    beta: DVector<f64>,
    scale: f64,
}

fn concentrate(x: &DMatrix<f64>, y: &DVector<f64>, mut cand: Candidate, steps: usize, c0: f64) -> Candidate {
    for _ in 0..steps {
        if cand.scale <= 0.0 {
            break;
        }
        let r = residuals(x, y, &cand.beta);
        let w: Vec<f64> = r.iter().map(|v| bisquare_weight(v / cand.scale, c0)).collect();
        let Some(beta) = weighted_least_squares(x, y, &w) else { break };
        let scale = s_scale(x, y, &beta, c0);
        if scale >= cand.scale {
            break;
        }
        cand = Candidate { beta, scale };
    }
    cand
}

fn s_estimate(x: &DMatrix<f64>, y: &DVector<f64>, config: &MmConfig) -> Candidate {
    let c0 = config.s_constant;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let subsets: Vec<Vec<usize>> = (0..config.n_subsamples).map(|_| elemental_subset(x, &mut rng)).collect();

    let start = map_collect(config.execution, &subsets, |rows| {
        let xs = x.select_rows(rows);
        let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
        let beta = xs.lu().solve(&ys)?;
        let scale = s_scale(x, y, &beta, c0);
        Some(concentrate(x, y, Candidate { beta, scale }, config.concentration_steps, c0))
    });

    let mut ranked: Vec<(usize, Candidate)> = start.into_iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).collect();
    ranked.sort_by(|a, b| a.1.scale.total_cmp(&b.1.scale).then(a.0.cmp(&b.0)));
    ranked.truncate(config.keep_best.max(1));

    let refined = map_collect(config.execution, &ranked, |(i, c)| (*i, concentrate(x, y, c.clone(), 500, c0)));
    refined
        .into_iter()
        .min_by(|a, b| a.1.scale.total_cmp(&b.1.scale).then(a.0.cmp(&b.0)))
        .map(|(_, c)| c)
        .unwrap_or_else(|| {
            let beta = least_squares(x, y).expect("full-rank design");
            let scale = s_scale(x, y, &beta, c0);
            Candidate { beta, scale }
        })
}

fn row_order(x: &DesignMatrix, y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| {
        x.rows[a]
            .iter()
            .zip(&x.rows[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(y[a].total_cmp(&y[b]))
    });
    idx
}

/// Bisquare M-estimate of location at a fixed scale, started at the median.
fn robust_location(y: &[f64], scale: f64, c: f64) -> f64 {
    let mut sorted = y.to_vec();
    let mut mu = median(&mut sorted);
    if scale <= 0.0 {
        return mu;
    }
    for _ in 0..200 {
        let w: Vec<f64> = y.iter().map(|v| bisquare_weight((v - mu) / scale, c)).collect();
        let sw: f64 = w.iter().sum();
        if sw <= 0.0 {
            break;
        }
        let next = y.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / sw;
        if (next - mu).abs() <= 1e-12 * (1.0 + mu.abs()) {
            return next;
        }
        mu = next;
    }
    mu
}

/// MM regression: S-estimate from random elemental subsets, then an IRLS
/// M-step at the fixed S-scale.
pub fn fit_mm(x: &DesignMatrix, y: &[f64], config: &MmConfig) -> Result<RegressionResult> {
    validate_inputs(x, y)?;
    check_rank(&x.to_matrix())?;
    let order = row_order(x, y);
    let sorted = DesignMatrix { labels: x.labels.clone(), rows: order.iter().map(|&i| x.rows[i].clone()).collect() };
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let ols = fit_ols(&sorted, &ys)?;
    let xm = sorted.to_matrix();
    let yv = DVector::from_column_slice(&ys);
    let (n, k) = (sorted.n_rows(), sorted.n_cols());
    let y_scale = ys.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let perfect = |r: &[f64]| r.iter().all(|v| v.abs() <= 1e-12 * y_scale);

    let ols_beta = DVector::from_vec(ols.estimates());
    if perfect(&residuals(&xm, &yv, &ols_beta)) {
        return Ok(RegressionResult { estimator: Estimator::Mm, pseudo_r_squared: Some(1.0), adj_r_squared: None, scale: 0.0, ..ols });
    }

    let s = s_estimate(&xm, &yv, config);
    let c1 = config.efficiency_constant;
    let mut beta = s.beta.clone();
    let mut iterations = 0;
    if s.scale > 0.0 {
        let mut converged = false;
        while iterations < config.max_iter {
            iterations += 1;
            let r = residuals(&xm, &yv, &beta);
            let w: Vec<f64> = r.iter().map(|v| bisquare_weight(v / s.scale, c1)).collect();
            let next = weighted_least_squares(&xm, &yv, &w).ok_or(RegressionError::NoConvergence(iterations))?;
            let delta = (&next - &beta).amax();
            beta = next;
            if delta < config.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(RegressionError::NoConvergence(config.max_iter));
        }
    }

    let r = residuals(&xm, &yv, &beta);
    let (cov_diag, r_squared, pseudo) = if s.scale > 0.0 {
        let u: Vec<f64> = r.iter().map(|v| v / s.scale).collect();
        let nf = n as f64;
        let mean_psi2 = u.iter().map(|v| bisquare_psi(*v, c1).powi(2)).sum::<f64>() / nf;
        let mean_dpsi = u.iter().map(|v| bisquare_psi_prime(*v, c1)).sum::<f64>() / nf;
        let factor = s.scale * s.scale * mean_psi2 / (mean_dpsi * mean_dpsi) * nf / (nf - k as f64);
        let inv = xtx_inverse(&xm);
        let cov: Vec<f64> = (0..k).map(|j| factor * inv[(j, j)]).collect();

        let w: Vec<f64> = u.iter().map(|v| bisquare_weight(*v, c1)).collect();
        let sw: f64 = w.iter().sum();
        let ybar = ys.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / sw;
        let ssr_w: f64 = r.iter().zip(&w).map(|(r, w)| w * r * r).sum();
        let sst_w: f64 = ys.iter().zip(&w).map(|(y, w)| w * (y - ybar).powi(2)).sum();
        let rw2 = if sst_w > 0.0 { (1.0 - ssr_w / sst_w).clamp(0.0, 1.0) } else { 1.0 };

        let mu = robust_location(&ys, s.scale, c1);
        let num: f64 = u.iter().map(|v| bisquare_rho(*v, c1)).sum();
        let den: f64 = ys.iter().map(|v| bisquare_rho((v - mu) / s.scale, c1)).sum();
        let pseudo = if den > 0.0 { (1.0 - num / den).clamp(0.0, 1.0) } else { 1.0 };
        (cov, rw2, pseudo)
    } else {
        // more than half the rows fitted exactly: degenerate scale
        (vec![0.0; k], 1.0, 1.0)
    };

    Ok(RegressionResult {
        estimator: Estimator::Mm,
        coefficients: coefficients(&sorted.labels, &beta, &cov_diag, (n - k) as f64),
        r_squared,
        adj_r_squared: None,
        pseudo_r_squared: Some(pseudo),
        n_obs: n,
        converged: true,
        iterations,
        scale: s.scale,
    })
}

pub fn fit(spec_estimator: Estimator, x: &DesignMatrix, y: &[f64], mm: &MmConfig) -> Result<RegressionResult> {
    match spec_estimator {
        Estimator::Ols => fit_ols(x, y),
        Estimator::Mm => fit_mm(x, y, mm),
    }
}

/// Full-match outcome of one event, with CAR in percent-log units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterminantInput {
    pub event: MatchEvent,
    pub car_full_match_pct: f64,
    pub cav_full_match: f64,
}

/// Percent-log CAR to the fractional scale used by the regressions.
pub fn car_to_fraction(car_pct: f64) -> f64 {
    car_pct / 100.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeterminantsConfig {
    pub design: DesignOptions,
    pub mm: MmConfig,
    pub execution: Execution,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionColumn {
    pub spec: RegressionSpec,
    pub result: RegressionResult,
}

/// One fitted column per spec, specs fitted in parallel.
pub fn run_determinants(
    inputs: &[DeterminantInput],
    specs: &[RegressionSpec],
    config: &DeterminantsConfig,
) -> Result<Vec<RegressionColumn>> {
    if inputs.is_empty() {
        return Err(RegressionError::EmptyInput);
    }
    let mut inputs = inputs.to_vec();
    inputs.sort_by_key(|d| d.event.event_id);
    let events: Vec<MatchEvent> = inputs.iter().map(|d| d.event.clone()).collect();
    let car: Vec<f64> = inputs.iter().map(|d| car_to_fraction(d.car_full_match_pct)).collect();
    let cav: Vec<f64> = inputs.iter().map(|d| d.cav_full_match).collect();
    map_collect(config.execution, specs, |spec| {
        let x = build_design_matrix(&events, spec.form, &config.design)?;
        let y = match spec.dependent {
            Dependent::CarFullMatch => &car,
            Dependent::CavFullMatch => &cav,
        };
        Ok(RegressionColumn { spec: *spec, result: fit(spec.estimator, &x, y, &config.mm)? })
    })
    .into_iter()
    .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn emit_regression_csv(columns: &[RegressionColumn]) -> String {
    let mut out = String::from(REGRESSION_CSV_HEADER);
    out.push('\n');
    for col in columns {
        let r = &col.result;
        for c in &r.coefficients {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                col.spec.label(),
                r.estimator.as_str(),
                c.term,
                c.estimate,
                c.std_error,
                opt(c.p_value),
                r.r_squared,
                opt(r.adj_or_pseudo()),
                r.n_obs,
                r.converged
            ));
        }
    }
    out
}

/// One parsed line of the regression CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCsvRow {
    pub spec: String,
    pub estimator: String,
    pub term: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub p_value: Option<f64>,
    pub r2: f64,
    pub adj_or_pseudo_r2: Option<f64>,
    pub n: usize,
    pub converged: bool,
}

pub fn parse_regression_csv(text: &str) -> Result<Vec<RegressionCsvRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| RegressionError::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != REGRESSION_CSV_HEADER {
        return Err(RegressionError::Csv("unexpected header".into()));
    }
    reader
        .deserialize::<RegressionCsvRow>()
        .map(|r| r.map_err(|e| RegressionError::Csv(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn event(id: u32, token: &str, stage: Stage, outcome: Outcome) -> MatchEvent {
        let k = Utc.with_ymd_and_hms(2022, 11, 22, 10, 0, 0).unwrap() + Duration::days(id as i64);
        let (score_for, score_against) = match outcome {
            Outcome::Victory => (2, 0),
            Outcome::Draw => (1, 1),
            Outcome::Defeat => (0, 1),
        };
        MatchEvent {
            event_id: id,
            token_id: token.into(),
            opponent: "X".into(),
            stage,
            kickoff: k,
            first_half_end: k + Duration::minutes(47),
            second_half_start: k + Duration::minutes(62),
            regulation_end: None,
            full_time_end: k + Duration::minutes(111),
            penalties: false,
            score_for,
            score_against,
            outcome,
            notes: None,
        }
    }

    fn sample_events() -> Vec<MatchEvent> {
        use Outcome::*;
        use Stage::*;
        let spec = [
            ("ARG", Group1, Defeat),
            ("SNFT", Group1, Victory),
            ("BFT", Group1, Victory),
            ("POR", Group1, Victory),
            ("ARG", Group2, Victory),
            ("SNFT", Group2, Draw),
            ("BFT", Group2, Victory),
            ("POR", Group2, Victory),
            ("ARG", Group3, Victory),
            ("SNFT", Group3, Defeat),
            ("BFT", Group3, Defeat),
            ("POR", Group3, Defeat),
            ("ARG", RoundOf16, Victory),
            ("BFT", RoundOf16, Victory),
            ("SNFT", RoundOf16, Defeat),
            ("POR", RoundOf16, Victory),
            ("BFT", QuarterFinal, Defeat),
            ("ARG", QuarterFinal, Victory),
            ("POR", QuarterFinal, Defeat),
            ("ARG", SemiFinal, Victory),
            ("ARG", Final, Victory),
        ];
        spec.iter().enumerate().map(|(i, (t, s, o))| event(i as u32 + 1, t, *s, *o)).collect()
    }

    /// Gaussian elimination with partial pivoting on X'X b = X'y.
    fn normal_equation_oracle(x: &DesignMatrix, y: &[f64]) -> Vec<f64> {
        let k = x.n_cols();
        let mut a = vec![vec![0.0; k + 1]; k];
        for (row, yi) in x.rows.iter().zip(y) {
            for i in 0..k {
                for j in 0..k {
                    a[i][j] += row[i] * row[j];
                }
                a[i][k] += row[i] * yi;
            }
        }
        for col in 0..k {
            let p = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, p);
            for r in 0..k {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    let pivot = a[col].clone();
                    for (v, p) in a[r][col..].iter_mut().zip(&pivot[col..]) {
                        *v -= f * p;
                    }
                }
            }
        }
        (0..k).map(|i| a[i][k] / a[i][i]).collect()
    }

    #[test]
    fn design_rows() {
        let opts = DesignOptions::default();
        let evs = vec![
            event(1, "ARG", Stage::Group1, Outcome::Victory),
            event(2, "SNFT", Stage::Group2, Outcome::Draw),
            event(3, "BFT", Stage::RoundOf16, Outcome::Defeat),
            event(4, "POR", Stage::Group3, Outcome::Defeat),
            event(5, "ARG", Stage::Final, Outcome::Victory),
        ];
        let x = build_design_matrix(&evs, EquationForm::Outcome, &opts).unwrap();
        assert_eq!(x.labels, ["intercept", "win", "loss"]);
        assert_eq!(x.rows[0], [1.0, 1.0, 0.0]);
        assert_eq!(x.rows[1], [1.0, 0.0, 0.0]);
        let x = build_design_matrix(&evs, EquationForm::Knockout, &opts).unwrap();
        assert_eq!(x.rows[2], [1.0, 0.0, 1.0, 1.0]);
        let loss = x.column("loss").unwrap();
        let ko: Vec<f64> = evs.iter().map(|e| indicator(e.stage.is_knockout())).collect();
        let prod: Vec<f64> = loss.iter().zip(&ko).map(|(a, b)| a * b).collect();
        assert_eq!(x.column("loss_knockout").unwrap(), prod);
    }

    #[test]
    fn controls_exclude_reference_groups() {
        let evs = sample_events();
        let x = build_design_matrix(&evs, EquationForm::KnockoutControls, &DesignOptions::default()).unwrap();
        assert!(!x.labels.iter().any(|l| l.contains("SNFT") || l.contains("semi")));
        assert!(x.labels.contains(&"token_ARG".to_string()));
        for row in &x.rows {
            assert!(row.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
        let stage_only = DesignOptions { controls: ControlSet::StageOnly, ..Default::default() };
        let x = build_design_matrix(&evs, EquationForm::OutcomeControls, &stage_only).unwrap();
        assert_eq!(x.n_cols(), 7);
    }

    #[test]
    fn constant_dummy_is_rank_deficient() {
        let evs: Vec<MatchEvent> = (1..6).map(|i| event(i, "ARG", Stage::Group1, Outcome::Victory)).collect();
        assert!(matches!(
            build_design_matrix(&evs, EquationForm::Outcome, &DesignOptions::default()),
            Err(RegressionError::RankDeficient { .. })
        ));
    }

    #[test]
    fn ols_matches_normal_equations_and_group_means() {
        let evs = sample_events();
        let x = build_design_matrix(&evs, EquationForm::Outcome, &DesignOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..evs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = fit_ols(&x, &y).unwrap();
        for (a, b) in fit.estimates().iter().zip(normal_equation_oracle(&x, &y)) {
            assert!((a - b).abs() < 1e-10);
        }
        let group_mean = |o: Outcome| {
            let v: Vec<f64> = evs.iter().zip(&y).filter(|(e, _)| e.outcome == o).map(|(_, y)| *y).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let draw = group_mean(Outcome::Draw);
        assert!((fit.estimates()[0] - draw).abs() < 1e-12);
        assert!((fit.estimates()[1] - (group_mean(Outcome::Victory) - draw)).abs() < 1e-12);
        assert!((fit.estimates()[2] - (group_mean(Outcome::Defeat) - draw)).abs() < 1e-12);
        assert!(fit.r_squared >= 0.0 && fit.r_squared <= 1.0);
    }

    #[test]
    fn ols_perfect_fit() {
        let evs = sample_events();
        let x = build_design_matrix(&evs, EquationForm::StakeSplit, &DesignOptions::default()).unwrap();
        let truth = [0.1, -0.2, 0.3, -0.4, 0.5];
        let y: Vec<f64> = x.rows.iter().map(|r| r.iter().zip(&truth).map(|(a, b)| a * b).sum()).collect();
        let fit = fit_ols(&x, &y).unwrap();
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        for (a, b) in fit.estimates().iter().zip(truth) {
            assert!((a - b).abs() < 1e-12);
        }
        let mm = fit_mm(&x, &y, &MmConfig::default()).unwrap();
        assert_eq!(mm.scale, 0.0);
        for (a, b) in mm.estimates().iter().zip(truth) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn continuous_design(n: usize, seed: u64) -> (DesignMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(0.0..10.0)]).collect();
        let y = rows.iter().map(|r| 2.0 + 0.5 * r[1] + noise.sample(&mut rng)).collect();
        (DesignMatrix { labels: vec!["intercept".into(), "x".into()], rows }, y)
    }

    #[test]
    fn mm_close_to_ols_on_clean_gaussian_data() {
        let (x, y) = continuous_design(100, 11);
        let ols = fit_ols(&x, &y).unwrap();
        let mm = fit_mm(&x, &y, &MmConfig::default()).unwrap();
        for (o, m) in ols.coefficients.iter().zip(&mm.coefficients) {
            assert!((o.estimate - m.estimate).abs() < 3.0 * o.std_error);
        }
        assert!(mm.pseudo_r_squared.unwrap() > 0.0);
    }

    #[test]
    fn mm_resists_outlier() {
        let (x, mut y) = continuous_design(60, 3);
        let clean = fit_ols(&x, &y).unwrap().estimates()[1];
        let far = (0..y.len()).max_by(|&a, &b| x.rows[a][1].total_cmp(&x.rows[b][1])).unwrap();
        y[far] += 200.0;
        let dirty = fit_ols(&x, &y).unwrap().estimates()[1];
        let mm = fit_mm(&x, &y, &MmConfig::default()).unwrap().estimates()[1];
        assert!((dirty - clean).abs() > 0.5);
        assert!((mm - clean).abs() < 0.2 * (dirty - clean).abs());
    }

    #[test]
    fn mm_row_order_invariant_and_reproducible() {
        let (x, y) = continuous_design(40, 8);
        let cfg = MmConfig::default();
        let a = fit_mm(&x, &y, &cfg).unwrap();
        let b = fit_mm(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let seq = fit_mm(&x, &y, &MmConfig { execution: Execution::Sequential, ..cfg }).unwrap();
        assert_eq!(a, seq);
        let rev = DesignMatrix { labels: x.labels.clone(), rows: x.rows.iter().rev().cloned().collect() };
        let yr: Vec<f64> = y.iter().rev().copied().collect();
        assert_eq!(fit_mm(&rev, &yr, &cfg).unwrap(), a);
    }

    #[test]
    fn mm_with_controls_on_21_rows_keeps_positive_scale() {
        let matches = crate::synthetic::generate(&crate::synthetic::SyntheticSpec::default()).matches;
        let x = build_design_matrix(&matches, EquationForm::OutcomeControls, &DesignOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let y: Vec<f64> = (0..x.n_rows()).map(|_| noise.sample(&mut rng)).collect();
        let mm = fit_mm(&x, &y, &MmConfig::default()).unwrap();
        assert!(mm.scale > 0.01, "scale {}", mm.scale);
        assert!(mm.r_squared < 0.99);
        assert!(mm.coefficients.iter().all(|c| c.std_error > 1e-3));
    }

    #[test]
    fn m_scale_is_zero_only_when_nonzero_share_is_at_most_b() {
        assert_eq!(m_scale(&[0.0, 0.0, 1.0, 2.0], 1.5476, 0.5), 0.0);
        assert!(m_scale(&[0.0, 0.0, 1.0, 2.0], 1.5476, 0.4) > 0.0);
    }

    #[test]
    fn m_scale_of_standard_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let r: Vec<f64> = (0..20000).map(|_| noise.sample(&mut rng)).collect();
        let s = m_scale(&r, 1.5476, 0.5);
        assert!((s - 2.0).abs() < 0.1, "{s}");
    }

    #[test]
    fn regression_csv_round_trip() {
        let evs = sample_events();
        let inputs: Vec<DeterminantInput> = evs
            .iter()
            .enumerate()
            .map(|(i, e)| DeterminantInput {
                event: e.clone(),
                car_full_match_pct: (i as f64 * 1.7).sin() * 10.0,
                cav_full_match: (i as f64 * 0.3).cos() * 50.0,
            })
            .collect();
        let cols = run_determinants(&inputs, &RegressionSpec::table_layout(Dependent::CarFullMatch), &DeterminantsConfig::default())
            .unwrap();
        assert_eq!(cols.len(), 10);
        let text = emit_regression_csv(&cols);
        let rows = parse_regression_csv(&text).unwrap();
        let n_terms: usize = cols.iter().map(|c| c.result.coefficients.len()).sum();
        assert_eq!(rows.len(), n_terms);
        assert_eq!(rows[0].coefficient, cols[0].result.coefficients[0].estimate);
        assert_eq!(rows[0].spec, "car:outcome");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ols_residuals_orthogonal_and_shift_moves_intercept(seed in 0u64..10_000, shift in -5.0f64..5.0) {
            let evs = sample_events();
            let x = build_design_matrix(&evs, EquationForm::Knockout, &DesignOptions::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..evs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fit = fit_ols(&x, &y).unwrap();
            let beta = fit.estimates();
            for j in 0..x.n_cols() {
                let dot: f64 = x.rows.iter().zip(&y).map(|(r, yi)| {
                    let fitted: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
                    r[j] * (yi - fitted)
                }).sum();
                prop_assert!(dot.abs() < 1e-9);
            }
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let shifted = fit_ols(&x, &ys).unwrap().estimates();
            prop_assert!((shifted[0] - beta[0] - shift).abs() < 1e-10);
            for j in 1..beta.len() {
                prop_assert!((shifted[j] - beta[j]).abs() < 1e-10);
            }
        }
    }
}

//! Full-covariance Gaussian hidden Markov model over log returns.
//!
//! Fitting is Baum-Welch (EM) with a scaled forward-backward pass. Emission
//! densities are evaluated in log space and rescaled per time step by their
//! maximum, so the recursion never underflows even for tight states. The
//! covariance code path is written for observations of any dimension; the
//! strategy feeds scalar log returns.
//!
//! Forecasting uses the filtered posterior of the last observation pushed
//! one step through the transition matrix: `e = (p' A) mu`. The sign of `e`
//! is the directional call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::direction::Direction;
use crate::error::{Error, Result};

/// Emission variances below this are floored (and the fit flagged).
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Minimum number of observations per hidden state accepted by [`fit`].
pub const MIN_SAMPLES_PER_STATE: usize = 10;

const SELF_TRANSITION_INIT: f64 = 0.8;
const EMPTY_STATE_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    pub n_states: usize,
    pub max_iterations: usize,
    pub covariance_kind: CovarianceKind,
    pub convergence_tol: f64,
    /// Set per symbol by the caller; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            n_states: 5,
            max_iterations: 10,
            covariance_kind: CovarianceKind::Full,
            convergence_tol: 1e-4,
            seed: 0,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Parameter("n_states must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(Error::Parameter(
                "convergence_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn min_samples(&self) -> usize {
        MIN_SAMPLES_PER_STATE * self.n_states
    }
}

/// Fitted model parameters. `means[k]` and `covariances[k]` have the
/// observation dimension (1 for log returns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub initial_probs: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub fit_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Log-likelihood of the initial parameters followed by one entry per
    /// completed EM iteration; the last entry is the returned model's.
    pub log_likelihood_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub variance_floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmFit {
    pub model: HmmModel,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRanking {
    pub best_state: usize,
    pub means_by_state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmForecast {
    pub expected_return: f64,
    pub direction: Direction,
}

impl HmmModel {
    /// Builds a model from explicit parameters, checking every invariant.
    pub fn new(
        initial_probs: Vec<f64>,
        transition: Vec<Vec<f64>>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let model = Self {
            initial_probs,
            transition,
            means,
            covariances,
            fit_log_likelihood: f64::NAN,
        };
        model.validate()?;
        Ok(model)
    }

    /// Scalar-observation convenience constructor (`variances[k]` is the 1x1
    /// covariance of state `k`).
    pub fn univariate(
        initial_probs: Vec<f64>,
        transition: Vec<Vec<f64>>,
        means: &[f64],
        variances: &[f64],
    ) -> Result<Self> {
        Self::new(
            initial_probs,
            transition,
            means.iter().map(|m| vec![*m]).collect(),
            variances.iter().map(|v| vec![vec![*v]]).collect(),
        )
    }

    pub fn n_states(&self) -> usize {
        self.initial_probs.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Per-state mean of the first observation component (the log return).
    pub fn mean_returns(&self) -> Vec<f64> {
        self.means.iter().map(|m| m[0]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.initial_probs.len();
        if k == 0 {
            return Err(Error::Parameter("model has no states".into()));
        }
        if self.transition.len() != k || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::Parameter("model parameter shapes disagree".into()));
        }
        check_simplex(&self.initial_probs, "initial distribution")?;
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Parameter(format!(
                    "transition row {i} has wrong length"
                )));
            }
            check_simplex(row, "transition row")?;
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::Parameter("observation dimension is zero".into()));
        }
        for (s, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            if m.len() != d || c.len() != d || c.iter().any(|r| r.len() != d) {
                return Err(Error::Parameter(format!(
                    "state {s}: inconsistent dimension"
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parameter(format!("state {s}: non-finite mean")));
            }
            for i in 0..d {
                for j in 0..i {
                    if (c[i][j] - c[j][i]).abs() > 1e-12 * (1.0 + c[i][j].abs()) {
                        return Err(Error::Parameter(format!(
                            "state {s}: covariance not symmetric"
                        )));
                    }
                }
            }
            if cholesky(c).is_none() {
                return Err(Error::Parameter(format!(
                    "state {s}: covariance not positive definite"
                )));
            }
        }
        Ok(())
    }

    /// Relabels states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            initial_probs: perm.iter().map(|&p| self.initial_probs[p]).collect(),
            transition: perm
                .iter()
                .map(|&p| perm.iter().map(|&q| self.transition[p][q]).collect())
                .collect(),
            means: perm.iter().map(|&p| self.means[p].clone()).collect(),
            covariances: perm.iter().map(|&p| self.covariances[p].clone()).collect(),
            fit_log_likelihood: self.fit_log_likelihood,
        }
    }

    /// Log-likelihood of an observation sequence under this model.
    pub fn log_likelihood(&self, observations: &[Vec<f64>]) -> Result<f64> {
        if observations.is_empty() {
            return Err(Error::insufficient("HMM log-likelihood", 1, 0));
        }
        let emissions = self.emissions()?;
        let lik = EmissionTable::new(&emissions, observations);
        Ok(forward(self, &lik)?.log_likelihood)
    }

    fn emissions(&self) -> Result<Vec<Gaussian>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| {
                Gaussian::new(m, c).ok_or_else(|| {
                    Error::Numerical("emission covariance is not positive definite".into())
                })
            })
            .collect()
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "{what} is not a probability vector: {p:?}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gaussian emissions
// ---------------------------------------------------------------------------

/// Lower Cholesky factor (row-major `d*d`) or `None` if not positive definite.
fn cholesky(cov: &[Vec<f64>]) -> Option<Vec<f64>> {
    let d = cov.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = cov[i][j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

struct Gaussian {
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: &[f64], cov: &[Vec<f64>]) -> Option<Self> {
        let d = mean.len();
        let chol = cholesky(cov)?;
        let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
        Some(Self {
            mean: mean.to_vec(),
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn log_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        // Solve L z = x - mean by forward substitution.
        let mut quad = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i * d + k] * scratch[k];
            }
            let z = s / self.chol[i * d + i];
            scratch[i] = z;
            quad += z * z;
        }
        self.log_norm - 0.5 * quad
    }
}

/// Emission likelihoods rescaled per time step: `scaled[t][k] =
/// exp(log b_k(x_t) - shift[t])`, with `shift[t]` the row maximum.
struct EmissionTable {
    scaled: Vec<Vec<f64>>,
    shift: Vec<f64>,
}

impl EmissionTable {
    fn new(emissions: &[Gaussian], observations: &[Vec<f64>]) -> Self {
        let d = emissions[0].mean.len();
        let mut scratch = vec![0.0; d];
        let mut scaled = Vec::with_capacity(observations.len());
        let mut shift = Vec::with_capacity(observations.len());
        for x in observations {
            let mut row: Vec<f64> = emissions
                .iter()
                .map(|g| g.log_pdf(x, &mut scratch))
                .collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in &mut row {
                *v = (*v - m).exp();
            }
            scaled.push(row);
            shift.push(m);
        }
        Self { scaled, shift }
    }
}

struct ForwardPass {
    /// Normalised filtered distributions, one per time step.
    alpha: Vec<Vec<f64>>,
    /// Per-step normalisers of the scaled recursion.
    scale: Vec<f64>,
    log_likelihood: f64,
}

fn forward(model: &HmmModel, lik: &EmissionTable) -> Result<ForwardPass> {
    let k = model.n_states();
    let t_len = lik.scaled.len();
    let mut alpha = Vec::with_capacity(t_len);
    let mut scale = Vec::with_capacity(t_len);
    let mut log_likelihood = 0.0;
    let mut prev: Vec<f64> = Vec::new();
    for t in 0..t_len {
        let mut a: Vec<f64> = if t == 0 {
            (0..k)
                .map(|j| model.initial_probs[j] * lik.scaled[0][j])
                .collect()
        } else {
            (0..k)
                .map(|j| {
                    let pred: f64 = (0..k).map(|i| prev[i] * model.transition[i][j]).sum();
                    pred * lik.scaled[t][j]
                })
                .collect()
        };
        let c: f64 = a.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Numerical(format!(
                "forward recursion lost all probability mass at step {t}"
            )));
        }
        for v in &mut a {
            *v /= c;
        }
        log_likelihood += c.ln() + lik.shift[t];
        scale.push(c);
        prev = a.clone();
        alpha.push(a);
    }
    Ok(ForwardPass {
        alpha,
        scale,
        log_likelihood,
    })
}

/// Expected sufficient statistics of one E-step.
struct Expectations {
    log_likelihood: f64,
    /// Posterior state marginals, `gamma[t][k]`.
    gamma: Vec<Vec<f64>>,
    /// Expected transition counts summed over time.
    xi_sum: Vec<Vec<f64>>,
}

fn expectations(model: &HmmModel, observations: &[Vec<f64>]) -> Result<Expectations> {
    let k = model.n_states();
    let emissions = model.emissions()?;
    let lik = EmissionTable::new(&emissions, observations);
    let fwd = forward(model, &lik)?;
    let t_len = observations.len();

    let mut beta = vec![vec![1.0; k]; t_len];
    for t in (0..t_len - 1).rev() {
        let weighted: Vec<f64> = (0..k)
            .map(|j| lik.scaled[t + 1][j] * beta[t + 1][j])
            .collect();
        let c = fwd.scale[t + 1];
        for i in 0..k {
            beta[t][i] = (0..k)
                .map(|j| model.transition[i][j] * weighted[j])
                .sum::<f64>()
                / c;
        }
    }

    let mut gamma = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut g: Vec<f64> = (0..k).map(|i| fwd.alpha[t][i] * beta[t][i]).collect();
        let s: f64 = g.iter().sum();
        for v in &mut g {
            *v /= s;
        }
        gamma.push(g);
    }

    let mut xi_sum = vec![vec![0.0; k]; k];
    for t in 0..t_len - 1 {
        let c = fwd.scale[t + 1];
        for i in 0..k {
            let a = fwd.alpha[t][i] / c;
            if a == 0.0 {
                continue;
            }
            for j in 0..k {
                xi_sum[i][j] += a * model.transition[i][j] * lik.scaled[t + 1][j] * beta[t + 1][j];
            }
        }
    }

    Ok(Expectations {
        log_likelihood: fwd.log_likelihood,
        gamma,
        xi_sum,
    })
}

/// Re-estimates parameters from `stats`. Returns whether any covariance
/// needed flooring. States with no posterior weight keep their emission
/// parameters and transition row.
fn maximize(model: &mut HmmModel, observations: &[Vec<f64>], stats: &Expectations) -> bool {
    let k = model.n_states();
    let d = model.dim();

    let pi_sum: f64 = stats.gamma[0].iter().sum();
    model.initial_probs = stats.gamma[0].iter().map(|g| g / pi_sum).collect();

    for i in 0..k {
        let row_sum: f64 = stats.xi_sum[i].iter().sum();
        if row_sum > 0.0 && row_sum.is_finite() {
            model.transition[i] = stats.xi_sum[i].iter().map(|x| x / row_sum).collect();
        }
    }

    let mut floored = false;
    for s in 0..k {
        let weight: f64 = stats.gamma.iter().map(|g| g[s]).sum();
        if weight < EMPTY_STATE_WEIGHT {
            continue;
        }
        let mut mean = vec![0.0; d];
        for (g, x) in stats.gamma.iter().zip(observations) {
            for i in 0..d {
                mean[i] += g[s] * x[i];
            }
        }
        for m in &mut mean {
            *m /= weight;
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (g, x) in stats.gamma.iter().zip(observations) {
            for i in 0..d {
                let di = x[i] - mean[i];
                for j in 0..=i {
                    cov[i][j] += g[s] * di * (x[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i][j] /= weight;
                cov[j][i] = cov[i][j];
            }
        }
        floored |= floor_covariance(&mut cov);
        model.means[s] = mean;
        model.covariances[s] = cov;
    }
    floored
}

/// Raises variances below [`VARIANCE_FLOOR`] and, if the matrix is still not
/// positive definite, adds a growing ridge. Returns whether anything changed.
fn floor_covariance(cov: &mut [Vec<f64>]) -> bool {
    let d = cov.len();
    let mut changed = false;
    for i in 0..d {
        if !(cov[i][i] >= VARIANCE_FLOOR) {
            cov[i][i] = VARIANCE_FLOOR;
            changed = true;
        }
    }
    let mut ridge = VARIANCE_FLOOR;
    while cholesky(cov).is_none() {
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] += ridge;
        }
        ridge *= 10.0;
        changed = true;
    }
    changed
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Fits a model to a scalar log-return sequence.
pub fn fit(returns: &[f64], config: &HmmConfig) -> Result<HmmFit> {
    let observations: Vec<Vec<f64>> = returns.iter().map(|r| vec![*r]).collect();
    fit_observations(&observations, config)
}

/// Fits a model to vector observations (all of one dimension).
pub fn fit_observations(observations: &[Vec<f64>], config: &HmmConfig) -> Result<HmmFit> {
    config.validate()?;
    if observations.len() < config.min_samples() {
        return Err(Error::insufficient(
            "HMM fit",
            config.min_samples(),
            observations.len(),
        ));
    }
    let d = observations[0].len();
    if d == 0 || observations.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidInput(
            "observations must share a positive dimension".into(),
        ));
    }
    if observations.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("observations must be finite".into()));
    }

    let (mut model, mut floored) = initialise(observations, config);
    let mut stats = expectations(&model, observations)?;
    let mut history = vec![stats.log_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        floored |= maximize(&mut model, observations, &stats);
        stats = expectations(&model, observations)?;
        iterations += 1;
        let prev = *history.last().expect("non-empty");
        history.push(stats.log_likelihood);
        if stats.log_likelihood - prev < config.convergence_tol {
            converged = true;
            break;
        }
    }
    model.fit_log_likelihood = stats.log_likelihood;
    Ok(HmmFit {
        model,
        diagnostics: FitDiagnostics {
            log_likelihood_history: history,
            iterations,
            converged,
            variance_floored: floored,
        },
    })
}

/// Quantile split on the first component for the means (with a small seeded
/// jitter), global covariance for every state, uniform initial distribution
/// and a sticky uniform transition matrix.
fn initialise(observations: &[Vec<f64>], config: &HmmConfig) -> (HmmModel, bool) {
    let k = config.n_states;
    let d = observations[0].len();
    let n = observations.len();

    let mut global_mean = vec![0.0; d];
    for x in observations {
        for i in 0..d {
            global_mean[i] += x[i];
        }
    }
    for m in &mut global_mean {
        *m /= n as f64;
    }
    let mut global_cov = vec![vec![0.0; d]; d];
    for x in observations {
        for i in 0..d {
            for j in 0..d {
                global_cov[i][j] += (x[i] - global_mean[i]) * (x[j] - global_mean[j]);
            }
        }
    }
    for row in &mut global_cov {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let floored = floor_covariance(&mut global_cov);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        observations[a][0]
            .partial_cmp(&observations[b][0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|s| {
            let group = &order[s * n / k..(s + 1) * n / k];
            (0..d)
                .map(|i| {
                    let m =
                        group.iter().map(|&t| observations[t][i]).sum::<f64>() / group.len() as f64;
                    let jitter: f64 = rng.random_range(-1.0..1.0);
                    m + 0.01 * global_cov[i][i].sqrt() * jitter
                })
                .collect()
        })
        .collect();

    let transition = if k == 1 {
        vec![vec![1.0]]
    } else {
        let off = (1.0 - SELF_TRANSITION_INIT) / (k - 1) as f64;
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { SELF_TRANSITION_INIT } else { off })
                    .collect()
            })
            .collect()
    };

    let model = HmmModel {
        initial_probs: vec![1.0 / k as f64; k],
        transition,
        means,
        covariances: vec![global_cov; k],
        fit_log_likelihood: f64::NAN,
    };
    (model, floored)
}

/// Filtered state distribution after the last return.
pub fn forward_posterior(model: &HmmModel, returns: &[f64]) -> Result<Vec<f64>> {
    let observations: Vec<Vec<f64>> = returns.iter().map(|r| vec![*r]).collect();
    forward_posterior_observations(model, &observations)
}

pub fn forward_posterior_observations(
    model: &HmmModel,
    observations: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if observations.is_empty() {
        return Err(Error::insufficient("forward posterior", 1, 0));
    }
    if observations.iter().any(|x| x.len() != model.dim()) {
        return Err(Error::InvalidInput("observation dimension mismatch".into()));
    }
    let emissions = model.emissions()?;
    let lik = EmissionTable::new(&emissions, observations);
    let mut fwd = forward(model, &lik)?;
    Ok(fwd.alpha.pop().expect("non-empty"))
}

/// Filtered state distribution after each return, `out[t][k]`.
pub fn filtered_posteriors(model: &HmmModel, returns: &[f64]) -> Result<Vec<Vec<f64>>> {
    if returns.is_empty() {
        return Err(Error::insufficient("forward posterior", 1, 0));
    }
    if model.dim() != 1 {
        return Err(Error::InvalidInput("observation dimension mismatch".into()));
    }
    let observations: Vec<Vec<f64>> = returns.iter().map(|r| vec![*r]).collect();
    let emissions = model.emissions()?;
    let lik = EmissionTable::new(&emissions, &observations);
    Ok(forward(model, &lik)?.alpha)
}

/// One-step-ahead expected return `(posterior' A) mu` and its sign.
pub fn predict_direction(model: &HmmModel, posterior: &[f64]) -> HmmForecast {
    let mu = model.mean_returns();
    let k = model.n_states();
    let expected_return: f64 = (0..k)
        .map(|j| {
            let next: f64 = (0..k).map(|i| posterior[i] * model.transition[i][j]).sum();
            next * mu[j]
        })
        .sum();
    HmmForecast {
        expected_return,
        direction: Direction::from_value(expected_return),
    }
}

/// State with the highest mean return (lowest index on ties).
pub fn state_ranking(model: &HmmModel) -> StateRanking {
    let means_by_state = model.mean_returns();
    let mut best_state = 0;
    for (k, m) in means_by_state.iter().enumerate() {
        if *m > means_by_state[best_state] {
            best_state = k;
        }
    }
    StateRanking {
        best_state,
        means_by_state,
    }
}

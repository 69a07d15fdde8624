// SPDX-License-Identifier: MIT OR Apache-2.0

//! Regression models with a single jump, noise specifications, covariate
//! designs and the oracles through which every response is obtained.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Window;

/// Basis of a segment function; parameters enter linearly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `psi(b, x) = b[0]`
    Constant,
    /// `psi(b, x) = b[0] + b[1] * x`
    Affine,
}

impl Basis {
    pub fn dim(self) -> usize {
        match self {
            Basis::Constant => 1,
            Basis::Affine => 2,
        }
    }

    pub fn eval(self, coef: &[f64], x: f64) -> f64 {
        match self {
            Basis::Constant => coef[0],
            Basis::Affine => coef[0] + coef[1] * x,
        }
    }
}

/// Left/right segment bases of a change-point regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub left: Basis,
    pub right: Basis,
}

impl ModelFamily {
    pub const STUMP: ModelFamily = ModelFamily {
        left: Basis::Constant,
        right: Basis::Constant,
    };
    pub const TWO_LINES: ModelFamily = ModelFamily {
        left: Basis::Affine,
        right: Basis::Affine,
    };

    pub fn is_stump(&self) -> bool {
        *self == Self::STUMP
    }
}

/// Standardized (mean 0, unit variance, symmetric) error law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    #[default]
    Normal,
    Laplace,
    Uniform,
    /// Degenerate `eps = 0`; only meaningful as a test mode.
    Zero,
}

impl ErrorDist {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ErrorDist::Normal => StandardNormal.sample(rng),
            ErrorDist::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
            }
            ErrorDist::Uniform => (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt(),
            ErrorDist::Zero => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::Normal => "normal",
            ErrorDist::Laplace => "laplace",
            ErrorDist::Uniform => "uniform",
            ErrorDist::Zero => "zero",
        }
    }
}

/// Noise standard deviation as a function of the covariate.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseScale {
    Homoscedastic {
        sigma: f64,
    },
    /// `sigma(x) = intercept + slope * x`, positive on [0, 1].
    Affine {
        intercept: f64,
        slope: f64,
    },
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for NoiseScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseScale::Homoscedastic { sigma } => write!(f, "Homoscedastic({sigma})"),
            NoiseScale::Affine { intercept, slope } => write!(f, "Affine({intercept}, {slope})"),
            NoiseScale::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl NoiseScale {
    pub fn sigma_at(&self, x: f64) -> f64 {
        match self {
            NoiseScale::Homoscedastic { sigma } => *sigma,
            NoiseScale::Affine { intercept, slope } => intercept + slope * x,
            NoiseScale::Custom(f) => f(x),
        }
    }

    pub fn is_homoscedastic(&self) -> bool {
        matches!(self, NoiseScale::Homoscedastic { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub scale: NoiseScale,
    #[serde(default)]
    pub error_dist: ErrorDist,
}

impl NoiseSpec {
    pub fn normal(sigma: f64) -> Self {
        Self {
            scale: NoiseScale::Homoscedastic { sigma },
            error_dist: ErrorDist::Normal,
        }
    }

    pub fn none() -> Self {
        Self::normal(0.0)
    }

    pub fn draw<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let s = self.scale.sigma_at(x);
        if s == 0.0 {
            return 0.0;
        }
        s * self.error_dist.sample(rng)
    }

    fn validate(&self) -> Result<()> {
        match &self.scale {
            NoiseScale::Homoscedastic { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")),
            ),
            NoiseScale::Affine { intercept, slope } => {
                let ends = [*intercept, intercept + slope];
                if ends.iter().all(|s| *s > 0.0 && s.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::invalid("affine sigma(x) must be positive on [0, 1]"))
                }
            }
            _ => Ok(()),
        }
    }
}

/// `mu(x) = psi_l(beta_l, x) 1(x <= d0) + psi_u(beta_u, x) 1(x > d0)` plus noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangePointModel {
    pub d0: f64,
    pub family: ModelFamily,
    pub beta_l: Vec<f64>,
    pub beta_u: Vec<f64>,
    pub noise: NoiseSpec,
}

impl ChangePointModel {
    /// Builds and validates a model; `eps0` bounds `d0` away from the edges.
    pub fn new(
        d0: f64,
        family: ModelFamily,
        beta_l: Vec<f64>,
        beta_u: Vec<f64>,
        noise: NoiseSpec,
        eps0: f64,
    ) -> Result<Self> {
        let model = Self {
            d0,
            family,
            beta_l,
            beta_u,
            noise,
        };
        model.validate(eps0)?;
        Ok(model)
    }

    /// The stump `alpha 1(x <= d0) + beta 1(x > d0)` with normal noise.
    pub fn stump(d0: f64, alpha: f64, beta: f64, sigma: f64) -> Self {
        Self {
            d0,
            family: ModelFamily::STUMP,
            beta_l: vec![alpha],
            beta_u: vec![beta],
            noise: NoiseSpec::normal(sigma),
        }
    }

    /// `0.5 1(x <= 0.5) + 1.5 1(x > 0.5)` with `sigma = 1 / snr`.
    pub fn reference_stump(snr: f64) -> Self {
        let sigma = if snr.is_infinite() { 0.0 } else { 1.0 / snr };
        Self::stump(0.5, 0.5, 1.5, sigma)
    }

    pub fn validate(&self, eps0: f64) -> Result<()> {
        if !(eps0 > 0.0 && eps0 < 0.5) {
            return Err(Error::invalid(format!(
                "eps0 must lie in (0, 0.5), got {eps0}"
            )));
        }
        if !(self.d0 >= eps0 && self.d0 <= 1.0 - eps0) {
            return Err(Error::invalid(format!(
                "change point {} outside [{eps0}, {}]",
                self.d0,
                1.0 - eps0
            )));
        }
        if self.beta_l.len() != self.family.left.dim()
            || self.beta_u.len() != self.family.right.dim()
        {
            return Err(Error::invalid("coefficient length does not match basis"));
        }
        if self.jump().abs() <= 0.0 || !self.jump().is_finite() {
            return Err(Error::invalid(
                "jump gap at the change point must be nonzero",
            ));
        }
        self.noise.validate()
    }

    pub fn mu(&self, x: f64) -> f64 {
        if x <= self.d0 {
            self.family.left.eval(&self.beta_l, x)
        } else {
            self.family.right.eval(&self.beta_u, x)
        }
    }

    /// `psi_u(beta_u, d0) - psi_l(beta_l, d0)`.
    pub fn jump(&self) -> f64 {
        self.family.right.eval(&self.beta_u, self.d0) - self.family.left.eval(&self.beta_l, self.d0)
    }

    /// `|jump| / sigma(d0)`; infinite when noiseless.
    pub fn snr(&self) -> f64 {
        let s = self.noise.scale.sigma_at(self.d0);
        if s == 0.0 || self.noise.error_dist == ErrorDist::Zero {
            f64::INFINITY
        } else {
            self.jump().abs() / s
        }
    }
}

/// Evaluates the regression function (left branch owns `x = d0`).
pub fn evaluate_mu(model: &ChangePointModel, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("covariate {x} outside [0, 1]")));
    }
    Ok(model.mu(x))
}

/// A covariate-response pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: f64,
    pub y: f64,
}

impl Sample {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Source of responses under a fixed query budget.
pub trait Oracle {
    /// Queries a batch of covariates; fails without consuming budget when
    /// the batch would overrun it.
    fn query_batch(&mut self, xs: &[f64], rng: &mut dyn RngCore) -> Result<Vec<Sample>>;

    fn budget_total(&self) -> usize;

    fn budget_used(&self) -> usize;

    fn query(&mut self, x: f64, rng: &mut dyn RngCore) -> Result<Sample> {
        Ok(self.query_batch(&[x], rng)?[0])
    }

    fn budget_left(&self) -> usize {
        self.budget_total() - self.budget_used()
    }

    /// The true change point, when the oracle is a known model.
    fn true_change_point(&self) -> Option<f64> {
        None
    }

    /// The true signal-to-noise ratio at the change point, when known.
    fn true_snr(&self) -> Option<f64> {
        None
    }
}

fn reserve(used: &mut usize, total: usize, count: usize) -> Result<()> {
    if *used + count > total {
        return Err(Error::BudgetExhausted { used: *used, total });
    }
    *used += count;
    Ok(())
}

fn check_covariates(xs: &[f64]) -> Result<()> {
    match xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(x) => Err(Error::invalid(format!("covariate {x} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Oracle backed by a simulated model.
#[derive(Debug, Clone)]
pub struct ModelOracle {
    model: ChangePointModel,
    total: usize,
    used: usize,
}

impl ModelOracle {
    pub fn new(model: ChangePointModel, budget: usize) -> Self {
        Self {
            model,
            total: budget,
            used: 0,
        }
    }

    pub fn model(&self) -> &ChangePointModel {
        &self.model
    }
}

impl Oracle for ModelOracle {
    fn query_batch(&mut self, xs: &[f64], rng: &mut dyn RngCore) -> Result<Vec<Sample>> {
        check_covariates(xs)?;
        reserve(&mut self.used, self.total, xs.len())?;
        Ok(xs
            .iter()
            .map(|&x| Sample::new(x, self.model.mu(x) + self.model.noise.draw(x, rng)))
            .collect())
    }

    fn budget_total(&self) -> usize {
        self.total
    }

    fn budget_used(&self) -> usize {
        self.used
    }

    fn true_change_point(&self) -> Option<f64> {
        Some(self.model.d0)
    }

    fn true_snr(&self) -> Option<f64> {
        Some(self.model.snr())
    }
}

/// Oracle answering from a fixed pool of precomputed pairs with the pair
/// whose covariate is nearest to the request (ties go to the smaller `x`).
/// The same pair may be returned for several requests.
#[derive(Debug, Clone)]
pub struct PoolOracle {
    pool: Vec<Sample>,
    total: usize,
    used: usize,
}

impl PoolOracle {
    pub fn new(mut pool: Vec<Sample>, budget: usize) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        check_covariates(&pool.iter().map(|s| s.x).collect::<Vec<_>>())?;
        if pool.iter().any(|s| !s.y.is_finite()) {
            return Err(Error::invalid("pool responses must be finite"));
        }
        pool.sort_by(|a, b| a.x.total_cmp(&b.x));
        Ok(Self {
            pool,
            total: budget,
            used: 0,
        })
    }

    /// Loads a pool from a CSV file with header `x,y`.
    pub fn from_csv(path: impl AsRef<Path>, budget: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
            return Err(Error::invalid(format!(
                "pool CSV header must be `x,y`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let pool = reader
            .deserialize::<Sample>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(pool, budget)
    }

    pub fn pool(&self) -> &[Sample] {
        &self.pool
    }

    pub fn nearest(&self, x: f64) -> Sample {
        let idx = self.pool.partition_point(|s| s.x < x);
        if idx == 0 {
            return self.pool[0];
        }
        if idx == self.pool.len() {
            return self.pool[idx - 1];
        }
        let (below, above) = (self.pool[idx - 1], self.pool[idx]);
        if above.x - x < x - below.x {
            above
        } else {
            below
        }
    }
}

impl Oracle for PoolOracle {
    fn query_batch(&mut self, xs: &[f64], _rng: &mut dyn RngCore) -> Result<Vec<Sample>> {
        check_covariates(xs)?;
        reserve(&mut self.used, self.total, xs.len())?;
        Ok(xs.iter().map(|&x| self.nearest(x)).collect())
    }

    fn budget_total(&self) -> usize {
        self.total
    }

    fn budget_used(&self) -> usize {
        self.used
    }
}

/// Oracle delegating to a child process over a line protocol.
///
/// For each batch the parent writes `BATCH <k>` followed by `k` lines, one
/// decimal covariate each, then flushes. The child answers with `k` lines,
/// one decimal response each, in request order.
pub struct ExternalOracle {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    command: String,
    total: usize,
    used: usize,
}

impl ExternalOracle {
    /// Spawns `command` through `sh -c`.
    pub fn spawn(command: &str, budget: usize) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::ExternalOracleFailure(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::ExternalOracleFailure("child has no stdout".into()))?;
        Ok(Self {
            child,
            stdin,
            stdout: BufReader::new(stdout),
            command: command.to_string(),
            total: budget,
            used: 0,
        })
    }

    fn exchange(&mut self, xs: &[f64]) -> Result<Vec<Sample>> {
        let fail = |msg: String| Error::ExternalOracleFailure(msg);
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| fail("oracle input already closed".into()))?;
        let mut request = format!("BATCH {}\n", xs.len());
        for x in xs {
            request.push_str(&format!("{x:.17}\n"));
        }
        stdin
            .write_all(request.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| fail(format!("write to `{}` failed: {e}", self.command)))?;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut line = String::new();
            let read = self
                .stdout
                .read_line(&mut line)
                .map_err(|e| fail(format!("read from `{}` failed: {e}", self.command)))?;
            if read == 0 {
                return Err(fail(format!(
                    "`{}` closed its output after {} of {} responses",
                    self.command,
                    out.len(),
                    xs.len()
                )));
            }
            let text = line.trim();
            let y: f64 = text
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    fail(format!(
                        "malformed response line `{text}` for covariate {x}"
                    ))
                })?;
            out.push(Sample::new(x, y));
        }
        Ok(out)
    }
}

impl Oracle for ExternalOracle {
    fn query_batch(&mut self, xs: &[f64], _rng: &mut dyn RngCore) -> Result<Vec<Sample>> {
        check_covariates(xs)?;
        reserve(&mut self.used, self.total, xs.len())?;
        self.exchange(xs)
    }

    fn budget_total(&self) -> usize {
        self.total
    }

    fn budget_used(&self) -> usize {
        self.used
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        drop(self.stdin.take());
        if self.child.try_wait().ok().flatten().is_none() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// How covariates are laid out inside a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Random,
    /// Midpoint grid `lo + (2i - 1)(hi - lo) / (2 count)`.
    Equispaced,
}

/// Uniform covariates on `window`, random or on the midpoint grid.
pub fn draw_uniform_covariates<R: Rng + ?Sized>(
    window: Window,
    count: usize,
    layout: Layout,
    rng: &mut R,
) -> Result<Vec<f64>> {
    window.check()?;
    if count == 0 {
        return Err(Error::invalid("covariate count must be >= 1"));
    }
    let (lo, width) = (window.lo, window.width());
    Ok(match layout {
        Layout::Random => (0..count)
            .map(|_| lo + width * rng.random::<f64>())
            .collect(),
        Layout::Equispaced => (1..=count)
            .map(|i| lo + (2 * i - 1) as f64 * width / (2 * count) as f64)
            .collect(),
    })
}

/// Symmetric sampling density `h` on [-1, 1], rescaled onto a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum SamplingDensity {
    Uniform,
    /// `h(t) = 1 - |t|`
    Triangular,
    /// `h(t) = 3/4 (1 - t^2)`
    Epanechnikov,
    /// Unnormalized density values on an equispaced grid over [0, 1]
    /// (the right half; mirrored to [-1, 0]).
    Tabulated {
        half: Vec<f64>,
    },
}

const DENSITY_GRID: usize = 4096;

impl SamplingDensity {
    fn raw(&self, t: f64) -> f64 {
        let a = t.abs().min(1.0);
        match self {
            SamplingDensity::Uniform => 0.5,
            SamplingDensity::Triangular => 1.0 - a,
            SamplingDensity::Epanechnikov => 0.75 * (1.0 - a * a),
            SamplingDensity::Tabulated { half } => {
                let pos = a * (half.len() - 1) as f64;
                let i = (pos.floor() as usize).min(half.len() - 2);
                let f = pos - i as f64;
                half[i] * (1.0 - f) + half[i + 1] * f
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let SamplingDensity::Tabulated { half } = self {
            if half.len() < 2 || half.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid(
                    "tabulated density needs >= 2 finite nonnegative values",
                ));
            }
            if half.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("tabulated density has zero mass"));
            }
        }
        Ok(())
    }

    fn half_mass(&self) -> f64 {
        // trapezoid on [0, 1]
        let h = 1.0 / DENSITY_GRID as f64;
        (0..DENSITY_GRID)
            .map(|i| 0.5 * h * (self.raw(i as f64 * h) + self.raw((i + 1) as f64 * h)))
            .sum()
    }

    /// Normalized density value `h(t)`.
    pub fn pdf(&self, t: f64) -> f64 {
        if t.abs() > 1.0 {
            return 0.0;
        }
        match self {
            SamplingDensity::Tabulated { .. } => self.raw(t) / (2.0 * self.half_mass()),
            _ => self.raw(t),
        }
    }

    /// `h(0)`, which enters the limit rate of the zoomed-in estimator.
    pub fn at_zero(&self) -> f64 {
        self.pdf(0.0)
    }

    /// Cumulative table of the right half on the density grid, normalized to 1.
    fn half_cdf(&self) -> Vec<f64> {
        let h = 1.0 / DENSITY_GRID as f64;
        let mut cdf = Vec::with_capacity(DENSITY_GRID + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 0..DENSITY_GRID {
            acc += 0.5 * h * (self.raw(i as f64 * h) + self.raw((i + 1) as f64 * h));
            cdf.push(acc);
        }
        let total = acc;
        cdf.iter_mut().for_each(|c| *c /= total);
        cdf
    }
}

/// Covariates drawn from `h` rescaled to the window, by inverse CDF on a
/// tabulated grid. The uniform density delegates to [`draw_uniform_covariates`].
pub fn draw_density_covariates<R: Rng + ?Sized>(
    window: Window,
    count: usize,
    density: &SamplingDensity,
    rng: &mut R,
) -> Result<Vec<f64>> {
    window.check()?;
    density.validate()?;
    if *density == SamplingDensity::Uniform {
        return draw_uniform_covariates(window, count, Layout::Random, rng);
    }
    if count == 0 {
        return Err(Error::invalid("covariate count must be >= 1"));
    }
    let cdf = density.half_cdf();
    let step = 1.0 / DENSITY_GRID as f64;
    let center = 0.5 * (window.lo + window.hi);
    let half = 0.5 * window.width();
    Ok((0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let i = cdf.partition_point(|c| *c < u).clamp(1, DENSITY_GRID);
            let (c0, c1) = (cdf[i - 1], cdf[i]);
            let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
            let t = ((i - 1) as f64 + frac) * step;
            (center + sign * t * half).clamp(window.lo, window.hi)
        })
        .collect())
}

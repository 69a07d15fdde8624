// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-sided compound Poisson process `M_{A, eta, Lambda}` and the law of
//! its smallest and largest minimizers.
//!
//! Events arrive on each side of the origin with `Exp(Lambda)` gaps. Moving
//! right, each event adds `A/2 + eta`; moving left, each event adds
//! `A/2 - eta`. The process is 0 on `[-T'_1, T_1)`, right-continuous, and a
//! point minimizes it when its value or its left limit equals the minimum.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ErrorDist;
use crate::rng::StreamSeed;
use crate::stats::order_quantile;

/// Parameters of `M_{A, eta, Lambda}` with `eta = noise_sd * error_dist`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CppParams {
    /// Jump gap `A >= 0`.
    pub jump: f64,
    /// Poisson rate `Lambda > 0`.
    pub rate: f64,
    /// Standard deviation `rho` of `eta`.
    pub noise_sd: f64,
    pub error_dist: ErrorDist,
}

impl CppParams {
    pub fn new(jump: f64, rate: f64, noise_sd: f64, error_dist: ErrorDist) -> Result<Self> {
        let p = Self {
            jump,
            rate,
            noise_sd,
            error_dist,
        };
        p.validate()?;
        Ok(p)
    }

    /// `M_{snr, eps, 1}` with unit-variance errors; infinite SNR maps to the
    /// noiseless process, whose argmin law does not depend on `A > 0`.
    pub fn canonical(snr: f64, error_dist: ErrorDist) -> Result<Self> {
        if snr.is_infinite() || error_dist == ErrorDist::Zero {
            return Self::new(1.0, 1.0, 0.0, ErrorDist::Zero);
        }
        Self::new(snr, 1.0, 1.0, error_dist)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::invalid(format!(
                "Poisson rate must be positive, got {}",
                self.rate
            )));
        }
        if !(self.jump >= 0.0 && self.jump.is_finite()) {
            return Err(Error::invalid(format!(
                "jump must be finite and >= 0, got {}",
                self.jump
            )));
        }
        let degenerate = self.error_dist == ErrorDist::Zero;
        if !(self.noise_sd.is_finite()
            && (self.noise_sd > 0.0 || degenerate && self.noise_sd == 0.0))
        {
            return Err(Error::invalid(format!(
                "noise sd must be positive (or 0 with the zero error law), got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    fn effective_sd(&self) -> f64 {
        if self.error_dist == ErrorDist::Zero {
            0.0
        } else {
            self.noise_sd
        }
    }

    fn eta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.error_dist {
            ErrorDist::Zero => 0.0,
            d => self.noise_sd * d.sample(rng),
        }
    }
}

/// Stopping rule that certifies the location of the global minimum.
///
/// A side stops once at least `min_events` events were drawn and the
/// running value exceeds that side's minimum by
/// `cushion * max(rho, A/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRule {
    pub cushion: f64,
    pub min_events: usize,
    pub max_events: usize,
}

impl Default for HorizonRule {
    fn default() -> Self {
        Self {
            cushion: 40.0,
            min_events: 50,
            max_events: 1_000_000,
        }
    }
}

impl HorizonRule {
    /// The same rule stretched by `factor`, for validating the default.
    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            cushion: self.cushion * factor as f64,
            min_events: self.min_events * factor,
            max_events: self.max_events * factor,
        }
    }
}

/// Smallest and largest minimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArgminPair {
    pub d_l: f64,
    pub d_u: f64,
}

impl ArgminPair {
    pub fn d_av(&self) -> f64 {
        0.5 * (self.d_l + self.d_u)
    }
}

/// Rescales a canonical (`Lambda = 1`) argmin pair to rate `rate`.
pub fn scale_argmin(canonical: ArgminPair, rate: f64) -> Result<ArgminPair> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::invalid(format!("rate must be positive, got {rate}")));
    }
    Ok(ArgminPair {
        d_l: canonical.d_l / rate,
        d_u: canonical.d_u / rate,
    })
}

/// One side of a simulated path: event distances from the origin and the
/// process value after each event (`values[0] = 0` before the first event).
#[derive(Debug, Clone, Default)]
pub struct SidePath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SidePath {
    fn simulate<R: Rng + ?Sized>(
        params: &CppParams,
        rule: &HorizonRule,
        sign: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cushion = rule.cushion * params.effective_sd().max(0.5 * params.jump);
        let mut side = SidePath {
            times: Vec::with_capacity(rule.min_events + 16),
            values: Vec::with_capacity(rule.min_events + 17),
        };
        side.values.push(0.0);
        let (mut t, mut value, mut low) = (0.0f64, 0.0f64, 0.0f64);
        loop {
            let gap: f64 = Exp1.sample(rng);
            t += gap / params.rate;
            value += 0.5 * params.jump + sign * params.eta(rng);
            side.times.push(t);
            side.values.push(value);
            low = low.min(value);
            let k = side.times.len();
            if k >= rule.min_events && value > low + cushion {
                return Ok(side);
            }
            if k >= rule.max_events {
                return Err(Error::HorizonOverflow {
                    max_events: rule.max_events,
                });
            }
        }
    }

    fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// A simulated path, right side and left side.
#[derive(Debug, Clone)]
pub struct CppPath {
    pub right: SidePath,
    pub left: SidePath,
}

impl CppPath {
    pub fn simulate<R: Rng + ?Sized>(
        params: &CppParams,
        rule: &HorizonRule,
        rng: &mut R,
    ) -> Result<Self> {
        params.validate()?;
        let right = SidePath::simulate(params, rule, 1.0, rng)?;
        let left = SidePath::simulate(params, rule, -1.0, rng)?;
        Ok(Self { right, left })
    }

    /// As [`CppPath::simulate`] with a separate generator per side, so a side
    /// does not depend on how long the other one ran.
    pub fn simulate_sides<R: Rng + ?Sized, S: Rng + ?Sized>(
        params: &CppParams,
        rule: &HorizonRule,
        right_rng: &mut R,
        left_rng: &mut S,
    ) -> Result<Self> {
        params.validate()?;
        let right = SidePath::simulate(params, rule, 1.0, right_rng)?;
        let left = SidePath::simulate(params, rule, -1.0, left_rng)?;
        Ok(Self { right, left })
    }

    pub fn min_value(&self) -> f64 {
        self.right.min().min(self.left.min())
    }

    /// Process value at `s` (right-continuous).
    pub fn value_at(&self, s: f64) -> f64 {
        if s >= 0.0 {
            let k = self.right.times.partition_point(|&t| t <= s);
            self.right.values[k]
        } else {
            // s in [-T'_{k+1}, -T'_k) carries the value after k left events
            let k = self.left.times.partition_point(|&t| t < -s);
            self.left.values[k]
        }
    }

    /// Left limit of the process at `s`.
    pub fn left_limit_at(&self, s: f64) -> f64 {
        if s > 0.0 {
            let k = self.right.times.partition_point(|&t| t < s);
            self.right.values[k]
        } else {
            let k = self.left.times.partition_point(|&t| t <= -s);
            self.left.values[k]
        }
    }

    pub fn argmin(&self) -> ArgminPair {
        let m = self.min_value();
        let (r, l) = (&self.right, &self.left);
        let origin_min = m == 0.0;
        // leftmost stretch attaining m
        let d_l = if let Some(k) = (1..l.values.len()).rev().find(|&k| l.values[k] == m) {
            -l.times[k]
        } else if origin_min {
            -l.times[0]
        } else {
            let k = (1..r.values.len())
                .find(|&k| r.values[k] == m)
                .expect("minimum attained");
            r.times[k - 1]
        };
        // rightmost stretch attaining m
        let d_u = if let Some(k) = (1..r.values.len()).rev().find(|&k| r.values[k] == m) {
            r.times[k]
        } else if origin_min {
            r.times[0]
        } else {
            let k = (1..l.values.len())
                .find(|&k| l.values[k] == m)
                .expect("minimum attained");
            -l.times[k - 1]
        };
        ArgminPair { d_l, d_u }
    }
}

/// Simulates one path and returns its smallest and largest minimizers.
pub fn simulate_path_argmin<R: Rng + ?Sized>(
    params: &CppParams,
    rng: &mut R,
) -> Result<ArgminPair> {
    Ok(CppPath::simulate(params, &HorizonRule::default(), rng)?.argmin())
}

/// Paths per RNG stream in batch simulation.
const PATHS_PER_STREAM: usize = 1024;

/// Simulates `reps` independent argmin pairs in parallel; deterministic in `seed`.
pub fn simulate_argmins(
    params: &CppParams,
    reps: usize,
    seed: StreamSeed,
) -> Result<Vec<ArgminPair>> {
    simulate_argmins_with(params, &HorizonRule::default(), reps, seed)
}

pub fn simulate_argmins_with(
    params: &CppParams,
    rule: &HorizonRule,
    reps: usize,
    seed: StreamSeed,
) -> Result<Vec<ArgminPair>> {
    params.validate()?;
    let chunks = reps.div_ceil(PATHS_PER_STREAM);
    let parts: Vec<Result<Vec<ArgminPair>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.stream(c as u64, 0);
            let count = PATHS_PER_STREAM.min(reps - c * PATHS_PER_STREAM);
            (0..count)
                .map(|_| Ok(CppPath::simulate(params, rule, &mut rng)?.argmin()))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(reps);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Which minimizer statistic a quantile refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgminStat {
    Lower,
    Upper,
    Average,
}

pub const QUANTILE_CACHE_VERSION: u32 = 1;

/// Monte Carlo quantile tables of the canonical process `M_{snr, eps, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CppQuantiles {
    #[serde(default)]
    pub version: u32,
    pub snr: f64,
    pub error_dist: ErrorDist,
    pub reps: usize,
    pub seed: u64,
    pub prob_grid: Vec<f64>,
    pub q_dl: Vec<f64>,
    pub q_du: Vec<f64>,
    pub q_dav: Vec<f64>,
}

const GRID_MATCH: f64 = 1e-12;

impl CppQuantiles {
    pub fn quantile(&self, stat: ArgminStat, p: f64) -> Result<f64> {
        let idx = self
            .prob_grid
            .iter()
            .position(|g| (g - p).abs() < GRID_MATCH)
            .ok_or_else(|| {
                Error::MissingQuantiles(format!(
                    "probability {p} not on the tabulated grid (snr {})",
                    self.snr
                ))
            })?;
        Ok(match stat {
            ArgminStat::Lower => self.q_dl[idx],
            ArgminStat::Upper => self.q_du[idx],
            ArgminStat::Average => self.q_dav[idx],
        })
    }

    /// `C_zeta`, the upper-`zeta` quantile of the average minimizer.
    pub fn c_zeta(&self, zeta: f64) -> Result<f64> {
        self.quantile(ArgminStat::Average, 1.0 - zeta)
    }

    /// Whether the table was built for this SNR and error law.
    pub fn matches(&self, snr: f64, error_dist: ErrorDist) -> bool {
        let same_snr =
            (self.snr.is_infinite() && snr.is_infinite()) || (self.snr - snr).abs() < 1e-12;
        same_snr && self.error_dist == error_dist
    }
}

/// Sorted, deduplicated probability grid: the usual tail points, a 5% grid
/// in the body, and `extra` together with its complements.
pub fn prob_grid(extra: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = vec![0.0005, 0.001, 0.0025, 0.005, 0.01, 0.025];
    g.extend((1..20).map(|i| i as f64 * 0.05));
    for &p in extra {
        g.push(p);
    }
    let mirrored: Vec<f64> = g.iter().map(|p| 1.0 - p).collect();
    g.extend(mirrored);
    g.retain(|p| *p > 0.0 && *p < 1.0);
    g.sort_by(f64::total_cmp);
    g.dedup_by(|a, b| (*a - *b).abs() < GRID_MATCH);
    g
}

/// Replicates needed for at least 10 expected exceedances at every grid point.
pub fn required_reps(prob_grid: &[f64]) -> usize {
    let tail = prob_grid.iter().map(|p| p.min(1.0 - p)).fold(0.5, f64::min);
    (10.0 / tail - 1e-6).ceil() as usize
}

/// Simulates `reps` canonical paths (`A = snr`, unit-variance errors,
/// `Lambda = 1`) and tabulates type-1 quantiles of `d_l`, `d_u` and their
/// average on `prob_grid`, all from the same path set.
pub fn estimate_quantiles(
    snr: f64,
    error_dist: ErrorDist,
    reps: usize,
    prob_grid: &[f64],
    seed: StreamSeed,
) -> Result<CppQuantiles> {
    if prob_grid.is_empty() || prob_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::invalid(
            "probability grid must be nonempty and inside (0, 1)",
        ));
    }
    let needed = required_reps(prob_grid);
    if reps < needed {
        let prob = prob_grid.iter().map(|p| p.min(1.0 - p)).fold(0.5, f64::min);
        return Err(Error::InsufficientReps { reps, prob, needed });
    }
    let params = CppParams::canonical(snr, error_dist)?;
    let pairs = simulate_argmins(&params, reps, seed)?;
    let mut dl: Vec<f64> = pairs.iter().map(|p| p.d_l).collect();
    let mut du: Vec<f64> = pairs.iter().map(|p| p.d_u).collect();
    let mut dav: Vec<f64> = pairs.iter().map(|p| p.d_av()).collect();
    for v in [&mut dl, &mut du, &mut dav] {
        v.par_sort_by(f64::total_cmp);
    }
    let table = |v: &[f64]| prob_grid.iter().map(|&p| order_quantile(v, p)).collect();
    Ok(CppQuantiles {
        version: QUANTILE_CACHE_VERSION,
        snr,
        error_dist,
        reps,
        seed: seed.seed(),
        prob_grid: prob_grid.to_vec(),
        q_dl: table(&dl),
        q_du: table(&du),
        q_dav: table(&dav),
    })
}

/// Directory of persisted quantile tables keyed by the full parameter tuple.
#[derive(Debug, Clone)]
pub struct QuantileCache {
    dir: PathBuf,
}

impl QuantileCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(
        &self,
        snr: f64,
        error_dist: ErrorDist,
        reps: usize,
        seed: u64,
        grid: &[f64],
    ) -> PathBuf {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in grid {
            for b in p.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        self.dir.join(format!(
            "cpp_v{QUANTILE_CACHE_VERSION}_snr{snr}_{}_r{reps}_s{seed}_g{h:016x}.json",
            error_dist.name()
        ))
    }

    /// Loads the table if cached under the same key, else simulates and stores it.
    pub fn get_or_compute(
        &self,
        snr: f64,
        error_dist: ErrorDist,
        reps: usize,
        grid: &[f64],
        seed: StreamSeed,
    ) -> Result<CppQuantiles> {
        let path = self.path_for(snr, error_dist, reps, seed.seed(), grid);
        if let Ok(q) = load_quantiles(&path) {
            if q.version == QUANTILE_CACHE_VERSION
                && q.prob_grid == grid
                && q.matches(snr, error_dist)
            {
                return Ok(q);
            }
        }
        let q = estimate_quantiles(snr, error_dist, reps, grid, seed)?;
        std::fs::create_dir_all(&self.dir)?;
        save_quantiles(&q, &path)?;
        Ok(q)
    }
}

pub fn save_quantiles(q: &CppQuantiles, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(q)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_quantiles(path: &Path) -> Result<CppQuantiles> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

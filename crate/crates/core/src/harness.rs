// SPDX-License-Identifier: MIT OR Apache-2.0

//! Replicated Monte Carlo studies: interval coverage, efficiency relative
//! to the one-stage estimator, stage allocation, and convergence rate.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpp_limit::{estimate_quantiles, prob_grid, ArgminStat, CppQuantiles, QuantileCache};
use crate::design::{run_experiment, QuantileSource, RunResult, StagePlan};
use crate::error::{Error, Result};
use crate::intervals::{
    allocation_ci, conservative_ci, exact_ci, finite_sample_ci, limit_rate, normalization,
    IntervalFamily,
};
use crate::model::{
    ChangePointModel, ErrorDist, Layout, ModelFamily, ModelOracle, NoiseScale, NoiseSpec,
};
use crate::rng::StreamSeed;
use crate::stats;

/// Stump `alpha 1(x <= d0) + beta 1(x > d0)` with noise scaled to each SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StumpSpec {
    pub d0: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub error_dist: ErrorDist,
}

impl Default for StumpSpec {
    fn default() -> Self {
        Self {
            d0: 0.5,
            alpha: 0.5,
            beta: 1.5,
            error_dist: ErrorDist::Normal,
        }
    }
}

impl StumpSpec {
    pub fn model(&self, snr: f64) -> ChangePointModel {
        let sigma = if snr.is_infinite() {
            0.0
        } else {
            (self.beta - self.alpha).abs() / snr
        };
        let mut m = ChangePointModel::stump(self.d0, self.alpha, self.beta, sigma);
        m.noise = NoiseSpec {
            scale: NoiseScale::Homoscedastic { sigma },
            error_dist: if sigma == 0.0 {
                ErrorDist::Zero
            } else {
                self.error_dist
            },
        };
        m
    }
}

/// How limit-law quantile tables are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileSpec {
    #[serde(default = "default_quantile_reps")]
    pub reps: usize,
    #[serde(default = "default_quantile_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_quantile_reps() -> usize {
    2_000_000
}

fn default_quantile_seed() -> u64 {
    20_240_601
}

impl Default for QuantileSpec {
    fn default() -> Self {
        Self {
            reps: default_quantile_reps(),
            seed: default_quantile_seed(),
            cache_dir: None,
        }
    }
}

/// Memoized quantile tables on one probability grid, one per (SNR, error law).
pub struct QuantileBank {
    spec: QuantileSpec,
    grid: Vec<f64>,
    memo: Mutex<HashMap<(u64, ErrorDist), Arc<CppQuantiles>>>,
}

impl QuantileBank {
    pub fn new(spec: QuantileSpec, extra_probs: &[f64]) -> Self {
        Self {
            spec,
            grid: prob_grid(extra_probs),
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn get(&self, snr: f64, error_dist: ErrorDist) -> Result<Arc<CppQuantiles>> {
        let key = (snr.to_bits(), error_dist);
        if let Some(q) = self.memo.lock().expect("quantile memo").get(&key) {
            return Ok(q.clone());
        }
        let seed = StreamSeed::new(self.spec.seed);
        let q = match &self.spec.cache_dir {
            Some(dir) => QuantileCache::new(dir).get_or_compute(
                snr,
                error_dist,
                self.spec.reps,
                &self.grid,
                seed,
            )?,
            None => estimate_quantiles(snr, error_dist, self.spec.reps, &self.grid, seed)?,
        };
        let q = Arc::new(q);
        self.memo
            .lock()
            .expect("quantile memo")
            .insert(key, q.clone());
        Ok(q)
    }
}

/// Dispersion measures of replicate errors `d_hat - d0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Sd,
    /// Mean absolute error about the true change point.
    Mad,
    Iqr,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Sd, Measure::Mad, Measure::Iqr];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Sd => "sd",
            Measure::Mad => "mad",
            Measure::Iqr => "iqr",
        }
    }

    pub fn of(self, errors: &[f64]) -> f64 {
        match self {
            Measure::Sd => stats::std_dev(errors),
            Measure::Mad => stats::mean_abs_dev(errors, 0.0),
            Measure::Iqr => stats::iqr(errors),
        }
    }
}

/// Second-stage tuning of a coverage study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CoverageDesign {
    /// Fixed window constants with `lambda = gamma / (1 + gamma)`. The budget
    /// entries are stage-two sizes; stage one gets `round(gamma n)` more points.
    Tuned { gammas: Vec<f64>, ks: Vec<f64> },
    /// Equal two-stage allocation with the window sized by `C_{zeta_1}`.
    Allocation { zeta1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSpec {
    pub snr: Vec<f64>,
    pub budgets: Vec<usize>,
    pub design: CoverageDesign,
    pub families: Vec<IntervalFamily>,
    #[serde(default = "all_centers")]
    pub centers: Vec<ArgminStat>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub first_stage_design: Layout,
    #[serde(default)]
    pub later_stage_design: Layout,
}

fn all_centers() -> Vec<ArgminStat> {
    vec![ArgminStat::Lower, ArgminStat::Upper, ArgminStat::Average]
}

fn default_tau() -> f64 {
    0.05
}

fn default_gamma() -> f64 {
    0.5
}

fn default_f_x() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreSpec {
    pub snr: Vec<f64>,
    pub budgets: Vec<usize>,
    pub stages: usize,
    pub zeta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub trim: usize,
    #[serde(default = "all_measures")]
    pub measures: Vec<Measure>,
    /// Covariate density at the change point for the one-stage arm.
    #[serde(default = "default_f_x")]
    pub f_x: f64,
}

fn all_measures() -> Vec<Measure> {
    Measure::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSpec {
    pub snr: f64,
    pub budget: usize,
    pub lambda_grid: Vec<f64>,
    pub zeta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub trim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub snr: f64,
    pub budgets: Vec<usize>,
    pub gamma: f64,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StudySpec {
    Coverage(CoverageSpec),
    Are(AreSpec),
    Allocation(AllocationSpec),
    Rate(RateSpec),
}

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub model: StumpSpec,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub quantiles: QuantileSpec,
    pub study: StudySpec,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.replicates < 100 {
            return Err(Error::invalid(format!(
                "need at least 100 replicates, got {}",
                self.replicates
            )));
        }
        if !(self.model.d0 > 0.0 && self.model.d0 < 1.0) || self.model.alpha == self.model.beta {
            return Err(Error::invalid(
                "model needs d0 in (0, 1) and a nonzero jump",
            ));
        }
        let nonempty = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must not be empty")))
            }
        };
        let snr_ok = |s: &[f64]| s.iter().all(|v| *v > 0.0);
        let trim_ok = |t: usize| {
            if t * 10 < self.replicates {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "trim {t} must stay below replicates / 10"
                )))
            }
        };
        match &self.study {
            StudySpec::Coverage(c) => {
                nonempty(!c.snr.is_empty(), "snr list")?;
                nonempty(!c.budgets.is_empty(), "budget list")?;
                nonempty(!c.families.is_empty(), "interval families")?;
                nonempty(!c.centers.is_empty(), "centers")?;
                if !snr_ok(&c.snr) || !(c.tau > 0.0 && c.tau < 1.0) {
                    return Err(Error::invalid("snr must be positive and tau in (0, 1)"));
                }
                match &c.design {
                    CoverageDesign::Tuned { gammas, ks } => {
                        nonempty(!gammas.is_empty() && !ks.is_empty(), "gamma and K grids")?;
                        if c.families.iter().any(|f| {
                            !matches!(f, IntervalFamily::Conservative | IntervalFamily::Exact)
                        }) {
                            return Err(Error::invalid(
                                "tuned designs support conservative and exact intervals",
                            ));
                        }
                    }
                    CoverageDesign::Allocation { zeta1 } => {
                        if !(*zeta1 > 0.0 && *zeta1 < 0.5) {
                            return Err(Error::invalid("zeta1 must lie in (0, 0.5)"));
                        }
                        if c.families
                            .iter()
                            .any(|f| *f != IntervalFamily::FiniteSample)
                        {
                            return Err(Error::invalid(
                                "allocation designs support finite-sample intervals",
                            ));
                        }
                    }
                }
            }
            StudySpec::Are(a) => {
                nonempty(!a.snr.is_empty(), "snr list")?;
                nonempty(!a.budgets.is_empty(), "budget list")?;
                nonempty(!a.measures.is_empty(), "measures")?;
                if !snr_ok(&a.snr) || a.stages < 2 || !(a.f_x > 0.0) {
                    return Err(Error::invalid(
                        "ARE study needs positive snr and f_x and at least two stages",
                    ));
                }
                trim_ok(a.trim)?;
            }
            StudySpec::Allocation(a) => {
                nonempty(!a.lambda_grid.is_empty(), "lambda grid")?;
                if !(a.snr > 0.0) {
                    return Err(Error::invalid("snr must be positive"));
                }
                trim_ok(a.trim)?;
            }
            StudySpec::Rate(r) => {
                nonempty(r.budgets.len() >= 2, "budget list (two or more)")?;
                if !(r.snr > 0.0 && r.k > 0.0 && r.gamma > 0.0 && r.gamma < 1.0) {
                    return Err(Error::invalid(
                        "rate study needs positive snr and K, gamma in (0, 1)",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Probabilities every quantile table of this study must carry.
    pub fn required_probs(&self) -> Vec<f64> {
        match &self.study {
            StudySpec::Coverage(c) => {
                let mut p = vec![c.tau / 2.0];
                if let CoverageDesign::Allocation { zeta1 } = c.design {
                    p.push(zeta1);
                }
                p
            }
            StudySpec::Are(a) => vec![a.zeta],
            StudySpec::Allocation(a) => vec![a.zeta],
            StudySpec::Rate(_) => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub snr: f64,
    pub gamma: f64,
    pub k: Option<f64>,
    pub family: IntervalFamily,
    pub center: ArgminStat,
    pub replicates: usize,
    pub failures: usize,
    pub coverage: f64,
    pub mean_length: f64,
    pub miss_rate: f64,
}

/// Which multistage replicates enter a dispersion estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreSample {
    All,
    /// The configured number of extremes dropped per tail.
    Trimmed,
    /// Replicates whose windows all contained the change point.
    WindowHits,
}

impl AreSample {
    pub fn name(self) -> &'static str {
        match self {
            AreSample::All => "all",
            AreSample::Trimmed => "trimmed",
            AreSample::WindowHits => "window_hits",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreRow {
    pub n: usize,
    pub snr: f64,
    pub stages: usize,
    pub measure: Measure,
    pub sample: AreSample,
    pub replicates: usize,
    pub one_stage: f64,
    pub multi_stage: f64,
    pub empirical: f64,
    pub theoretical: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub lambda1: f64,
    pub n: usize,
    pub snr: f64,
    pub status: String,
    pub replicates: usize,
    pub sd_trimmed: f64,
    pub sd_trimmed_se: f64,
    pub sd: f64,
    pub mad: f64,
    pub iqr: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub snr: f64,
    pub replicates: usize,
    pub median_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub name: String,
    pub seed: u64,
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coverage: Vec<CoverageRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub are: Vec<AreRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allocation: Vec<AllocationRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rate: Vec<RateRow>,
    /// Least-squares slope of log median error on log n (rate studies).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_slope: Option<f64>,
}

impl McReport {
    fn empty(config: &McConfig) -> Self {
        Self {
            name: config.name.clone(),
            seed: config.seed,
            replicates: config.replicates,
            coverage: vec![],
            are: vec![],
            allocation: vec![],
            rate: vec![],
            rate_slope: None,
        }
    }

    /// One row per cell, header first.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if !self.coverage.is_empty() {
            w.write_record([
                "n",
                "n1",
                "n2",
                "snr",
                "gamma",
                "k",
                "family",
                "center",
                "replicates",
                "failures",
                "coverage",
                "mean_length",
                "miss_rate",
            ])?;
            for r in &self.coverage {
                w.write_record([
                    r.n.to_string(),
                    r.n1.to_string(),
                    r.n2.to_string(),
                    r.snr.to_string(),
                    r.gamma.to_string(),
                    r.k.map(|k| k.to_string()).unwrap_or_default(),
                    family_name(r.family).into(),
                    center_name(r.center).into(),
                    r.replicates.to_string(),
                    r.failures.to_string(),
                    r.coverage.to_string(),
                    r.mean_length.to_string(),
                    r.miss_rate.to_string(),
                ])?;
            }
        } else if !self.are.is_empty() {
            w.write_record([
                "n",
                "snr",
                "stages",
                "measure",
                "sample",
                "replicates",
                "one_stage",
                "multi_stage",
                "empirical",
                "theoretical",
                "miss_rate",
            ])?;
            for r in &self.are {
                w.write_record([
                    r.n.to_string(),
                    r.snr.to_string(),
                    r.stages.to_string(),
                    r.measure.name().into(),
                    r.sample.name().into(),
                    r.replicates.to_string(),
                    r.one_stage.to_string(),
                    r.multi_stage.to_string(),
                    r.empirical.to_string(),
                    r.theoretical.to_string(),
                    r.miss_rate.to_string(),
                ])?;
            }
        } else if !self.allocation.is_empty() {
            w.write_record([
                "lambda1",
                "n",
                "snr",
                "status",
                "replicates",
                "sd_trimmed",
                "sd_trimmed_se",
                "sd",
                "mad",
                "iqr",
                "miss_rate",
            ])?;
            for r in &self.allocation {
                w.write_record([
                    r.lambda1.to_string(),
                    r.n.to_string(),
                    r.snr.to_string(),
                    r.status.clone(),
                    r.replicates.to_string(),
                    r.sd_trimmed.to_string(),
                    r.sd_trimmed_se.to_string(),
                    r.sd.to_string(),
                    r.mad.to_string(),
                    r.iqr.to_string(),
                    r.miss_rate.to_string(),
                ])?;
            }
        } else {
            w.write_record(["n", "snr", "replicates", "median_abs_error"])?;
            for r in &self.rate {
                w.write_record([
                    r.n.to_string(),
                    r.snr.to_string(),
                    r.replicates.to_string(),
                    r.median_abs_error.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// ARE curve data: `n, snr, measure, sample, empirical, theoretical`.
    pub fn write_plot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "snr", "measure", "sample", "empirical", "theoretical"])?;
        for r in &self.are {
            w.write_record([
                r.n.to_string(),
                r.snr.to_string(),
                r.measure.name().into(),
                r.sample.name().into(),
                r.empirical.to_string(),
                r.theoretical.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn family_name(f: IntervalFamily) -> &'static str {
    match f {
        IntervalFamily::Conservative => "conservative",
        IntervalFamily::Exact => "exact",
        IntervalFamily::FiniteSample => "finite_sample",
        IntervalFamily::Multistage => "multistage",
    }
}

fn center_name(c: ArgminStat) -> &'static str {
    match c {
        ArgminStat::Lower => "d_lo",
        ArgminStat::Upper => "d_hi",
        ArgminStat::Average => "d_av",
    }
}

/// Runs `reps` replicates of `plan` against fresh model oracles, in parallel,
/// returning results in replicate order.
fn replicate_runs(
    model: &ChangePointModel,
    plan: &StagePlan,
    n: usize,
    reps: usize,
    quantiles: Option<&CppQuantiles>,
    seed: StreamSeed,
) -> Vec<Result<RunResult>> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut oracle = ModelOracle::new(model.clone(), n);
            let source = match quantiles {
                Some(q) => QuantileSource::Table(q),
                None => QuantileSource::None,
            };
            run_experiment(
                &mut oracle,
                plan,
                ModelFamily::STUMP,
                n,
                source,
                seed,
                r as u64,
            )
        })
        .collect()
}

fn cell_seed(config: &McConfig, tag: &[u64]) -> StreamSeed {
    tag.iter()
        .fold(StreamSeed::new(config.seed), |s, t| s.child(*t))
}

/// Dispatches on the study kind.
pub fn run_study(config: &McConfig) -> Result<McReport> {
    config.validate()?;
    let bank = QuantileBank::new(config.quantiles.clone(), &config.required_probs());
    match &config.study {
        StudySpec::Coverage(spec) => run_coverage_study(config, spec, &bank),
        StudySpec::Are(spec) => run_are_study(config, spec, &bank),
        StudySpec::Allocation(spec) => run_allocation_study(config, spec, &bank),
        StudySpec::Rate(spec) => run_rate_study(config, spec),
    }
}

pub fn run_coverage_study(
    config: &McConfig,
    spec: &CoverageSpec,
    bank: &QuantileBank,
) -> Result<McReport> {
    let mut report = McReport::empty(config);
    for (si, &snr) in spec.snr.iter().enumerate() {
        let model = config.model.model(snr);
        let q = bank.get(snr, config.model.error_dist)?;
        for &n in &spec.budgets {
            // (n1, n2, plan, gamma, k, rate, norm) per cell
            let mut cells = Vec::new();
            match &spec.design {
                CoverageDesign::Tuned { gammas, ks } => {
                    for &gamma in gammas {
                        for &k in ks {
                            let n1 = (gamma * n as f64).round() as usize;
                            let total = n1 + n;
                            let mut plan = StagePlan::gamma_rule(gamma, k)?;
                            plan.lambda = vec![n1 as f64 / total as f64, n as f64 / total as f64];
                            plan.first_stage_design = Some(spec.first_stage_design);
                            plan.later_stage_design = spec.later_stage_design;
                            let rate = limit_rate(k, plan.lambda[0], gamma)?;
                            let norm = normalization(n, 2, gamma);
                            cells.push((total, plan, gamma, Some(k), rate, norm));
                        }
                    }
                }
                CoverageDesign::Allocation { zeta1 } => {
                    let mut plan = StagePlan::two_stage(0.5, 0.5, *zeta1)?;
                    plan.first_stage_design = Some(spec.first_stage_design);
                    plan.later_stage_design = spec.later_stage_design;
                    plan.snr = Some(snr);
                    cells.push((n, plan, 0.5, None, 0.0, 0.0));
                }
            }
            for (ci, (total, plan, gamma, k, rate, norm)) in cells.into_iter().enumerate() {
                let sizes = plan.stage_sizes(total)?;
                let seed = cell_seed(config, &[si as u64, n as u64, ci as u64]);
                let runs = replicate_runs(&model, &plan, total, config.replicates, Some(&q), seed);
                for &family in &spec.families {
                    for &center in &spec.centers {
                        let (mut hits, mut len, mut ok, mut missed) = (0usize, 0.0, 0usize, 0usize);
                        for run in runs.iter().flatten() {
                            let fit = run.final_fit();
                            let interval = match family {
                                IntervalFamily::Conservative => {
                                    conservative_ci(fit, &q, rate, norm, spec.tau, center)?
                                }
                                IntervalFamily::Exact => {
                                    exact_ci(fit, &q, rate, norm, spec.tau, center)?
                                }
                                IntervalFamily::FiniteSample => {
                                    let c1 = q.c_zeta(plan.zeta[0])?;
                                    let ct = q.c_zeta(spec.tau / 2.0)?;
                                    finite_sample_ci(fit.d_av, total, c1, ct, spec.tau, &plan)?
                                }
                                IntervalFamily::Multistage => {
                                    allocation_ci(fit.d_av, &plan, &q, total, spec.tau)?
                                }
                            };
                            ok += 1;
                            hits += interval.covers(config.model.d0) as usize;
                            len += interval.length();
                            missed += run.any_window_missed() as usize;
                        }
                        let denom = ok.max(1) as f64;
                        report.coverage.push(CoverageRow {
                            n,
                            n1: sizes[0],
                            n2: sizes[1],
                            snr,
                            gamma,
                            k,
                            family,
                            center,
                            replicates: ok,
                            failures: runs.len() - ok,
                            coverage: hits as f64 / denom,
                            mean_length: len / denom,
                            miss_rate: missed as f64 / denom,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

/// `n^{P-1} / (2^{P-1} P^P f_X C_{zeta_1} ... C_{zeta_{P-1}})` under equal allocation.
pub fn theoretical_are(n: usize, stages: usize, c_zeta: &[f64], f_x: f64) -> f64 {
    let p = stages as i32;
    (n as f64).powi(p - 1)
        / (2f64.powi(p - 1) * (stages as f64).powi(p) * f_x * c_zeta.iter().product::<f64>())
}

/// Errors `d_av - d0` of successful runs, in replicate order.
fn errors(runs: &[Result<RunResult>], d0: f64) -> Vec<f64> {
    runs.iter().flatten().map(|r| r.d_av - d0).collect()
}

fn miss_rate(runs: &[Result<RunResult>]) -> f64 {
    let ok: Vec<&RunResult> = runs.iter().flatten().collect();
    ok.iter().filter(|r| r.any_window_missed()).count() as f64 / ok.len().max(1) as f64
}

pub fn run_are_study(config: &McConfig, spec: &AreSpec, bank: &QuantileBank) -> Result<McReport> {
    let mut report = McReport::empty(config);
    for (si, &snr) in spec.snr.iter().enumerate() {
        let model = config.model.model(snr);
        let q = bank.get(snr, config.model.error_dist)?;
        let mut plan = StagePlan::equal(spec.stages, spec.gamma, spec.zeta)?;
        plan.first_stage_design = Some(Layout::Random);
        plan.snr = Some(snr);
        let single = StagePlan {
            first_stage_design: Some(Layout::Random),
            ..StagePlan::single()
        };
        let c: Vec<f64> = plan
            .zeta
            .iter()
            .map(|z| q.c_zeta(*z))
            .collect::<Result<_>>()?;
        for &n in &spec.budgets {
            if plan.stage_sizes(n).is_err() {
                continue;
            }
            let one = replicate_runs(
                &model,
                &single,
                n,
                config.replicates,
                None,
                cell_seed(config, &[si as u64, n as u64, 0]),
            );
            let multi = replicate_runs(
                &model,
                &plan,
                n,
                config.replicates,
                Some(&q),
                cell_seed(config, &[si as u64, n as u64, 1]),
            );
            let e1 = errors(&one, config.model.d0);
            let e2 = errors(&multi, config.model.d0);
            let e2t = stats::trim(&e2, spec.trim);
            let e2h: Vec<f64> = multi
                .iter()
                .flatten()
                .filter(|r| !r.any_window_missed())
                .map(|r| r.d_av - config.model.d0)
                .collect();
            let theoretical = theoretical_are(n, spec.stages, &c, spec.f_x);
            let miss = miss_rate(&multi);
            for &m in &spec.measures {
                let base = m.of(&e1);
                for (sample, e) in [
                    (AreSample::All, &e2),
                    (AreSample::Trimmed, &e2t),
                    (AreSample::WindowHits, &e2h),
                ] {
                    let d = m.of(e);
                    report.are.push(AreRow {
                        n,
                        snr,
                        stages: spec.stages,
                        measure: m,
                        sample,
                        replicates: e.len(),
                        one_stage: base,
                        multi_stage: d,
                        empirical: base / d,
                        theoretical,
                        miss_rate: miss,
                    });
                }
            }
        }
    }
    Ok(report)
}

pub fn run_allocation_study(
    config: &McConfig,
    spec: &AllocationSpec,
    bank: &QuantileBank,
) -> Result<McReport> {
    let mut report = McReport::empty(config);
    let model = config.model.model(spec.snr);
    let q = bank.get(spec.snr, config.model.error_dist)?;
    for (li, &l1) in spec.lambda_grid.iter().enumerate() {
        let mut row = AllocationRow {
            lambda1: l1,
            n: spec.budget,
            snr: spec.snr,
            status: "ok".into(),
            replicates: 0,
            sd_trimmed: f64::NAN,
            sd_trimmed_se: f64::NAN,
            sd: f64::NAN,
            mad: f64::NAN,
            iqr: f64::NAN,
            miss_rate: f64::NAN,
        };
        let plan = StagePlan::two_stage(l1, spec.gamma, spec.zeta).and_then(|mut p| {
            p.first_stage_design = Some(Layout::Random);
            p.snr = Some(spec.snr);
            p.stage_sizes(spec.budget)?;
            Ok(p)
        });
        let plan = match plan {
            Ok(p) => p,
            Err(e @ Error::StageUnderflow { .. }) | Err(e @ Error::InvalidInput(_)) => {
                row.status = match e {
                    Error::StageUnderflow { .. } => "stage_underflow".into(),
                    _ => "invalid".into(),
                };
                report.allocation.push(row);
                continue;
            }
            Err(e) => return Err(e),
        };
        let runs = replicate_runs(
            &model,
            &plan,
            spec.budget,
            config.replicates,
            Some(&q),
            cell_seed(config, &[li as u64]),
        );
        let e = errors(&runs, config.model.d0);
        let et = stats::trim(&e, spec.trim);
        row.replicates = et.len();
        row.sd_trimmed = stats::std_dev(&et);
        row.sd_trimmed_se = stats::std_dev_se(&et);
        row.sd = stats::std_dev(&e);
        row.mad = stats::mean_abs_dev(&e, 0.0);
        row.iqr = stats::iqr(&e);
        row.miss_rate = miss_rate(&runs);
        report.allocation.push(row);
    }
    Ok(report)
}

/// Fixed-K two-stage runs (`lambda = gamma / (1 + gamma)`) at growing budgets.
pub fn run_rate_study(config: &McConfig, spec: &RateSpec) -> Result<McReport> {
    let mut report = McReport::empty(config);
    let model = config.model.model(spec.snr);
    let mut plan = StagePlan::gamma_rule(spec.gamma, spec.k)?;
    plan.first_stage_design = Some(Layout::Random);
    for &n in &spec.budgets {
        let runs = replicate_runs(
            &model,
            &plan,
            n,
            config.replicates,
            None,
            cell_seed(config, &[n as u64]),
        );
        let abs: Vec<f64> = errors(&runs, config.model.d0)
            .iter()
            .map(|e| e.abs())
            .collect();
        report.rate.push(RateRow {
            n,
            snr: spec.snr,
            replicates: abs.len(),
            median_abs_error: stats::median(&abs),
        });
    }
    let xs: Vec<f64> = report.rate.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = report
        .rate
        .iter()
        .map(|r| r.median_abs_error.ln())
        .collect();
    report.rate_slope = Some(ols_slope(&xs, &ys));
    Ok(report)
}

pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (stats::mean(xs), stats::mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Named studies covering the published tables and figures.
pub const PRESETS: [&str; 9] = [
    "table1",
    "table2",
    "table3",
    "table4",
    "table5",
    "fig2",
    "fig3",
    "allocation",
    "rate",
];

pub fn preset(name: &str, seed: u64) -> Result<McConfig> {
    let tuned = |families: Vec<IntervalFamily>| {
        StudySpec::Coverage(CoverageSpec {
            snr: vec![5.0],
            budgets: vec![50, 100, 200, 500, 1000],
            design: CoverageDesign::Tuned {
                gammas: vec![0.5, 2.0 / 3.0],
                ks: vec![1.0, 2.0],
            },
            families,
            centers: all_centers(),
            tau: 0.05,
            first_stage_design: Layout::Random,
            later_stage_design: Layout::Random,
        })
    };
    let finite = |first: Layout, later: Layout| {
        StudySpec::Coverage(CoverageSpec {
            snr: vec![2.0, 5.0, 8.0],
            budgets: vec![50, 100, 200, 500],
            design: CoverageDesign::Allocation { zeta1: 0.0005 },
            families: vec![IntervalFamily::FiniteSample],
            centers: vec![ArgminStat::Average],
            tau: 0.05,
            first_stage_design: first,
            later_stage_design: later,
        })
    };
    let fig_budgets: Vec<usize> = (1..=30).map(|i| 50 * i).collect();
    let (replicates, study) = match name {
        "table1" => (2000, tuned(vec![IntervalFamily::Conservative])),
        "table2" => (2000, tuned(vec![IntervalFamily::Exact])),
        "table3" => (5000, finite(Layout::Random, Layout::Random)),
        "table4" => (5000, finite(Layout::Equispaced, Layout::Random)),
        "table5" => (5000, finite(Layout::Equispaced, Layout::Equispaced)),
        "fig2" => (
            5000,
            StudySpec::Are(AreSpec {
                snr: vec![1.0, 2.0, 5.0, 8.0],
                budgets: fig_budgets,
                stages: 2,
                zeta: 0.0025,
                gamma: 0.5,
                trim: 5,
                measures: all_measures(),
                f_x: 1.0,
            }),
        ),
        "fig3" => (
            5000,
            StudySpec::Are(AreSpec {
                snr: vec![5.0, 8.0],
                budgets: fig_budgets,
                stages: 3,
                zeta: 0.0025,
                gamma: 0.5,
                trim: 3,
                measures: all_measures(),
                f_x: 1.0,
            }),
        ),
        "allocation" => (
            1000,
            StudySpec::Allocation(AllocationSpec {
                snr: 5.0,
                budget: 1000,
                lambda_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7],
                zeta: 0.0005,
                gamma: 0.5,
                trim: 5,
            }),
        ),
        "rate" => (
            500,
            StudySpec::Rate(RateSpec {
                snr: 5.0,
                budgets: vec![200, 400, 800, 1600],
                gamma: 0.5,
                k: 1.0,
            }),
        ),
        other => {
            return Err(Error::invalid(format!(
                "unknown preset `{other}`; known: {}",
                PRESETS.join(", ")
            )));
        }
    };
    Ok(McConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        model: StumpSpec::default(),
        replicates,
        seed,
        quantiles: QuantileSpec::default(),
        study,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_quantiles() -> QuantileSpec {
        QuantileSpec {
            reps: 20_000,
            seed: 1,
            cache_dir: None,
        }
    }

    #[test]
    fn theoretical_are_forms() {
        assert!((theoretical_are(1000, 2, &[2.5], 1.0) - 1000.0 / 20.0).abs() < 1e-12);
        let three = theoretical_are(600, 3, &[2.0, 2.0], 1.0);
        assert!((three - 600.0f64.powi(2) / (4.0 * 27.0 * 4.0)).abs() < 1e-9);
    }

    #[test]
    fn slope_of_power_law() {
        let xs: Vec<f64> = [200.0f64, 400.0, 800.0].iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 1.5 * x).collect();
        assert!((ols_slope(&xs, &ys) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            preset(p, 1).unwrap().validate().unwrap();
        }
        assert!(preset("table9", 1).is_err());
    }

    #[test]
    fn empty_grid_rejected_before_compute() {
        let mut c = preset("table3", 1).unwrap();
        if let StudySpec::Coverage(s) = &mut c.study {
            s.budgets.clear();
        }
        assert!(matches!(run_study(&c), Err(Error::InvalidInput(_))));
        let mut c = preset("allocation", 1).unwrap();
        if let StudySpec::Allocation(s) = &mut c.study {
            s.trim = 100;
        }
        assert!(c.validate().is_err());
        let mut c = preset("rate", 1).unwrap();
        c.replicates = 50;
        assert!(c.validate().is_err());
    }

    #[test]
    fn allocation_underflow_is_recorded() {
        let mut c = preset("allocation", 3).unwrap();
        c.replicates = 100;
        c.quantiles = small_quantiles();
        if let StudySpec::Allocation(s) = &mut c.study {
            s.budget = 10;
            s.lambda_grid = vec![0.1, 0.5];
        }
        let r = run_study(&c).unwrap();
        assert_eq!(r.allocation[0].status, "stage_underflow");
        assert_eq!(r.allocation[1].status, "ok");
        assert_eq!(r.allocation[1].replicates, 100 - 2 * 5);
    }

    #[test]
    fn coverage_study_is_deterministic() {
        let mut c = preset("table3", 42).unwrap();
        c.replicates = 200;
        c.quantiles = small_quantiles();
        if let StudySpec::Coverage(s) = &mut c.study {
            s.snr = vec![5.0];
            s.budgets = vec![100];
        }
        let a = run_study(&c).unwrap();
        let b = run_study(&c).unwrap();
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        let row = &a.coverage[0];
        assert!(row.coverage > 0.8 && row.coverage <= 1.0);
        let json = serde_json::to_string(&a).unwrap();
        let back: McReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! P-stage sampling plans and the adaptive experiment loop.

use serde::{Deserialize, Serialize};

use crate::cpp_limit::CppQuantiles;
use crate::error::{Error, Result};
use crate::estimator::{fit_fixed, fit_free, stump_means, SplitFit, Window};
use crate::model::{
    draw_density_covariates, draw_uniform_covariates, Layout, ModelFamily, Oracle, Sample,
    SamplingDensity,
};
use crate::rng::StreamSeed;

/// Smallest admissible stage size.
pub const MIN_STAGE_SIZE: usize = 2;

/// Budget per stage below which stage one defaults to an equispaced design.
pub const EQUISPACED_BELOW: f64 = 60.0;

/// Which minimizer of a stage seeds the next window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    #[default]
    Average,
    Lower,
}

/// Schedule of a P-stage procedure.
///
/// `lambda` has one entry per stage; `gamma`, `zeta` and `k` have one entry
/// per zoom step (P - 1). When `k` is absent the window constants follow
/// from `zeta` and the limit-law quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub zeta: Vec<f64>,
    #[serde(default)]
    pub k: Option<Vec<f64>>,
    /// `None` picks equispaced when `n / P < 60`, random otherwise.
    #[serde(default)]
    pub first_stage_design: Option<Layout>,
    /// Layout inside later windows when the density is uniform.
    #[serde(default)]
    pub later_stage_design: Layout,
    #[serde(default = "uniform_density")]
    pub second_stage_density: SamplingDensity,
    #[serde(default)]
    pub center: Center,
    /// Stump only: re-estimate both levels from all samples so far, split at
    /// the current center, before each zoomed fit.
    #[serde(default)]
    pub pooled_stump: bool,
    /// Stage-one search window is `[eps0, 1 - eps0]`.
    #[serde(default)]
    pub eps0: f64,
    /// Signal-to-noise ratio for planning; plugged in from stage one if absent.
    #[serde(default)]
    pub snr: Option<f64>,
}

fn uniform_density() -> SamplingDensity {
    SamplingDensity::Uniform
}

impl StagePlan {
    fn base(lambda: Vec<f64>, gamma: Vec<f64>, zeta: Vec<f64>, k: Option<Vec<f64>>) -> Self {
        Self {
            lambda,
            gamma,
            zeta,
            k,
            first_stage_design: None,
            later_stage_design: Layout::Random,
            second_stage_density: SamplingDensity::Uniform,
            center: Center::Average,
            pooled_stump: false,
            eps0: 0.0,
            snr: None,
        }
    }

    /// One stage on the full budget.
    pub fn single() -> Self {
        Self::base(vec![1.0], vec![], vec![], None)
    }

    /// Equal allocation over `stages` stages with a common miss level; the
    /// gamma schedule falls linearly from `gamma` at the first zoom step.
    pub fn equal(stages: usize, gamma: f64, zeta: f64) -> Result<Self> {
        if stages == 0 {
            return Err(Error::InvalidStageCount(stages));
        }
        let steps = stages - 1;
        let gammas = (0..steps)
            .map(|i| gamma * (steps - i) as f64 / steps as f64)
            .collect();
        let plan = Self::base(
            vec![1.0 / stages as f64; stages],
            gammas,
            vec![zeta; steps],
            None,
        );
        plan.validate()?;
        Ok(plan)
    }

    /// Two stages with `lambda = gamma / (1 + gamma)` and a fixed window constant.
    pub fn gamma_rule(gamma: f64, k: f64) -> Result<Self> {
        let l = gamma / (1.0 + gamma);
        let plan = Self::base(vec![l, 1.0 - l], vec![gamma], vec![0.0005], Some(vec![k]));
        plan.validate()?;
        Ok(plan)
    }

    /// Two stages with stage-one share `lambda1` and window from `C_zeta`.
    pub fn two_stage(lambda1: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let plan = Self::base(vec![lambda1, 1.0 - lambda1], vec![gamma], vec![zeta], None);
        plan.validate()?;
        Ok(plan)
    }

    pub fn stages(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.stages();
        if p == 0 {
            return Err(Error::InvalidStageCount(0));
        }
        if self.lambda.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            return Err(Error::invalid("stage fractions must lie in (0, 1]"));
        }
        let total: f64 = self.lambda.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "stage fractions sum to {total}, not 1"
            )));
        }
        if self.gamma.len() != p - 1 || self.zeta.len() != p - 1 {
            return Err(Error::invalid(format!(
                "gamma and zeta need {} entries for {p} stages",
                p - 1
            )));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::invalid("gamma entries must lie in (0, 1)"));
        }
        if self.gamma.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(
                "gamma must be strictly decreasing across stages",
            ));
        }
        if self.zeta.iter().any(|z| !(*z > 0.0 && *z < 0.5)) {
            return Err(Error::invalid("zeta entries must lie in (0, 0.5)"));
        }
        if let Some(k) = &self.k {
            if k.len() != p - 1 || k.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!(
                    "k needs {} positive entries",
                    p - 1
                )));
            }
        }
        if !(0.0..0.5).contains(&self.eps0) {
            return Err(Error::invalid("eps0 must lie in [0, 0.5)"));
        }
        if let Some(s) = self.snr {
            if !(s > 0.0) {
                return Err(Error::invalid("snr must be positive"));
            }
        }
        Ok(())
    }

    /// Integer stage sizes summing to `n` (largest remainder, ties to earlier stages).
    pub fn stage_sizes(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let exact: Vec<f64> = self.lambda.iter().map(|l| l * n as f64).collect();
        // snap values within rounding noise of an integer
        let exact: Vec<f64> = exact
            .iter()
            .map(|v| {
                if (v - v.round()).abs() < 1e-9 {
                    v.round()
                } else {
                    *v
                }
            })
            .collect();
        let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        for (q, &s) in sizes.iter().enumerate() {
            if s < MIN_STAGE_SIZE {
                return Err(Error::StageUnderflow {
                    stage: q + 1,
                    size: s,
                    min: MIN_STAGE_SIZE,
                });
            }
        }
        Ok(sizes)
    }

    fn first_layout(&self, n: usize) -> Layout {
        self.first_stage_design.unwrap_or(
            if (n as f64) / (self.stages() as f64) < EQUISPACED_BELOW {
                Layout::Equispaced
            } else {
                Layout::Random
            },
        )
    }
}

/// `psi = 1 - (1 - delta)^(1/(P-1))`; each stage then uses `zeta = psi / 2`.
pub fn zeta_from_delta(stages: usize, delta: f64) -> Result<f64> {
    if stages < 2 {
        return Err(Error::InvalidStageCount(stages));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    // 1 - (1 - delta)^(1/m) without cancellation
    Ok(-((-delta).ln_1p() / (stages - 1) as f64).exp_m1())
}

/// `C_zeta` for each zoom step of the plan.
pub fn c_factors(plan: &StagePlan, quantiles: &CppQuantiles) -> Result<Vec<f64>> {
    plan.zeta.iter().map(|&z| quantiles.c_zeta(z)).collect()
}

/// Window constant `K_{q-1}` from the products of `C_zeta` factors, sized so
/// that the stage-q window matches the level `1 - 2 zeta_{q-1}` neighborhood
/// of the stage-(q-1) estimate.
pub fn window_constant_from(
    q: usize,
    lambda: &[f64],
    gamma: &[f64],
    c: &[f64],
    n: usize,
) -> Result<f64> {
    if q < 2 || q > lambda.len() || gamma.len() < q - 1 || c.len() < q - 1 {
        return Err(Error::invalid(format!("no zoom step into stage {q}")));
    }
    let g = gamma[q - 2];
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    let num = 2f64.powi(q as i32 - 2) * c[..q - 1].iter().product::<f64>();
    let lam: f64 = lambda[..q - 2].iter().product();
    let den = (n as f64).powf(1.0 - g) * lam * lambda[q - 2].powf(-g - q as f64 + 3.0);
    Ok(num / den)
}

pub fn window_constant(
    q: usize,
    plan: &StagePlan,
    quantiles: &CppQuantiles,
    n: usize,
) -> Result<f64> {
    let c = c_factors(plan, quantiles)?;
    window_constant_from(q, &plan.lambda, &plan.gamma, &c, n)
}

/// A stage window with its nominal (pre-clip) half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWindow {
    pub window: Window,
    pub center: f64,
    pub half_width: f64,
}

/// `[center -/+ K_{q-1} n_{q-1}^{-((q-2) + gamma_{q-1})}]` clipped to [0, 1].
pub fn stage_window(
    center: f64,
    q: usize,
    k: f64,
    gamma: f64,
    prev_size: usize,
) -> Result<StageWindow> {
    if q < 2 {
        return Err(Error::invalid("stage windows start at stage 2"));
    }
    let half_width = k / (prev_size as f64).powf((q - 2) as f64 + gamma);
    Ok(StageWindow {
        window: Window::around(center, half_width)?,
        center,
        half_width,
    })
}

/// Where window constants come from when the plan does not fix them.
pub enum QuantileSource<'a> {
    None,
    Table(&'a CppQuantiles),
    /// Called with the planning SNR.
    Resolver(&'a dyn Fn(f64) -> Result<CppQuantiles>),
}

/// Artifacts of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub size: usize,
    pub window: Window,
    /// Pre-clip half-width (zero for stage one).
    pub half_width: f64,
    pub k: Option<f64>,
    pub fit: SplitFit,
    /// Parameters the fit was run with (stage one: fitted).
    pub beta_l: Vec<f64>,
    pub beta_u: Vec<f64>,
    /// Whether the true change point fell outside this stage's window.
    pub window_missed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub n: usize,
    pub stage_sizes: Vec<usize>,
    pub stages: Vec<StageRecord>,
    pub snr_used: Option<f64>,
    pub k_used: Vec<f64>,
    pub d_lo: f64,
    pub d_hi: f64,
    pub d_av: f64,
    pub budget_used: usize,
    pub budget_total: usize,
}

impl RunResult {
    pub fn final_fit(&self) -> &SplitFit {
        &self.stages.last().expect("at least one stage").fit
    }

    pub fn any_window_missed(&self) -> bool {
        self.stages.iter().any(|s| s.window_missed == Some(true))
    }
}

/// Planning SNR from a stage-one fit: `|jump| / sigma_hat` at the estimate.
pub fn plug_in_snr(fit: &SplitFit, family: ModelFamily) -> f64 {
    let jump = fit.jump_at(family, fit.d_av).abs();
    if fit.sigma_hat > 0.0 {
        jump / fit.sigma_hat
    } else {
        f64::INFINITY
    }
}

/// Runs the P-stage procedure with a budget of `n` queries.
///
/// Stage q draws covariates from stream `2q` and oracle noise from stream
/// `2q + 1` of `replicate`, so later stages do not depend on how many draws
/// earlier ones consumed.
pub fn run_experiment(
    oracle: &mut dyn Oracle,
    plan: &StagePlan,
    family: ModelFamily,
    n: usize,
    source: QuantileSource<'_>,
    seed: StreamSeed,
    replicate: u64,
) -> Result<RunResult> {
    let sizes = plan.stage_sizes(n)?;
    if oracle.budget_left() < n {
        return Err(Error::BudgetExhausted {
            used: oracle.budget_used(),
            total: oracle.budget_total(),
        });
    }
    let truth = oracle.true_change_point();
    let design_rng = |q: usize| seed.stream(replicate, 2 * q as u64);

    // stage one
    let mut rng = design_rng(1);
    let xs = draw_uniform_covariates(Window::UNIT, sizes[0], plan.first_layout(n), &mut rng)?;
    let mut noise = seed.stream(replicate, 3);
    let mut all: Vec<Sample> = oracle.query_batch(&xs, &mut noise)?;
    let search = Window::new(plan.eps0, 1.0 - plan.eps0)?;
    let first = fit_free(&all, search, family)?;
    let (mut beta_l, mut beta_u) = (first.beta_l.clone(), first.beta_u.clone());
    let mut stages = vec![StageRecord {
        stage: 1,
        size: sizes[0],
        window: search,
        half_width: 0.0,
        k: None,
        fit: first.clone(),
        beta_l: beta_l.clone(),
        beta_u: beta_u.clone(),
        window_missed: truth.map(|d| !search.contains(d)),
    }];

    let p = plan.stages();
    let mut snr_used = None;
    let mut k_used = Vec::new();
    if p > 1 {
        k_used = match &plan.k {
            Some(k) => k.clone(),
            None => {
                let snr = plan.snr.unwrap_or_else(|| plug_in_snr(&first, family));
                snr_used = Some(snr);
                let owned;
                let table = match source {
                    QuantileSource::Table(t) => t,
                    QuantileSource::Resolver(f) => {
                        owned = f(snr)?;
                        &owned
                    }
                    QuantileSource::None => {
                        return Err(Error::MissingQuantiles(
                            "plan needs quantiles to size its windows".into(),
                        ))
                    }
                };
                let c = c_factors(plan, table)?;
                (2..=p)
                    .map(|q| window_constant_from(q, &plan.lambda, &plan.gamma, &c, n))
                    .collect::<Result<_>>()?
            }
        };
    }

    let mut prev = first;
    for q in 2..=p {
        let center = match plan.center {
            Center::Average => prev.d_av,
            Center::Lower => prev.d_lo,
        };
        let k = k_used[q - 2];
        let sw = stage_window(center, q, k, plan.gamma[q - 2], sizes[q - 2])?;
        let mut rng = design_rng(q);
        let xs = match plan.second_stage_density {
            SamplingDensity::Uniform => {
                draw_uniform_covariates(sw.window, sizes[q - 1], plan.later_stage_design, &mut rng)?
            }
            ref h => draw_density_covariates(sw.window, sizes[q - 1], h, &mut rng)?,
        };
        let mut noise = seed.stream(replicate, 2 * q as u64 + 1);
        let batch = oracle.query_batch(&xs, &mut noise)?;
        all.extend_from_slice(&batch);
        if plan.pooled_stump && family.is_stump() {
            if let Some((a, b)) = stump_means(&all, center) {
                beta_l = vec![a];
                beta_u = vec![b];
            }
        }
        let fit = fit_fixed(&batch, sw.window, &beta_l, &beta_u, family)?;
        stages.push(StageRecord {
            stage: q,
            size: sizes[q - 1],
            window: sw.window,
            half_width: sw.half_width,
            k: Some(k),
            fit: fit.clone(),
            beta_l: beta_l.clone(),
            beta_u: beta_u.clone(),
            window_missed: truth.map(|d| !sw.window.contains(d)),
        });
        prev = fit;
    }

    Ok(RunResult {
        n,
        stage_sizes: sizes,
        snr_used,
        k_used,
        d_lo: prev.d_lo,
        d_hi: prev.d_hi,
        d_av: prev.d_av,
        budget_used: oracle.budget_used(),
        budget_total: oracle.budget_total(),
        stages,
    })
}

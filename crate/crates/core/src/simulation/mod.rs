//! Monte Carlo studies of the pooled estimators.
//!
//! Two generating designs are supported: reference categories drawn
//! directly from study-specific multinomial logits in the local value, and
//! a joint normal model for (local, reference) values whose reference
//! value is then cut into levels. Matched sets are built by rejection:
//! candidates are drawn, outcomes assigned from the logistic outcome
//! model, and the first draw with exactly one case is kept.

mod report;
pub mod rng;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::calibration::category_probs;
use crate::data::{categorize, CategoryScheme, Participant, PooledDataset, Stratum, Study};
use crate::error::{Error, Result};
use crate::inference::{fit_method, FitMethod};

pub use report::{
    aggregate, mc_standard_error, CoefficientSummary, MethodOutcome, ReplicateOutcome, SimulationReport,
};

/// Rejection-sampling attempts allowed per matched set.
const MAX_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Design {
    /// Reference category drawn from `log P(p|w)/P(1|w) = a_p + b_p w`.
    DirectMultinomial {
        w_sd: f64,
        /// Per study: `a_2..a_P`.
        intercepts: Vec<Vec<f64>>,
        /// Per study: `b_2..b_P`.
        slopes: Vec<Vec<f64>>,
    },
    /// `(W, X)` jointly normal with mean `(mu, a + b mu)` and covariance
    /// `[[tau2 + sigma_ww, b tau2 + sigma_xw], [., b^2 tau2 + sigma_xx]]`.
    BivariateNormal {
        tau2: f64,
        sigma_ww: f64,
        sigma_xx: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        sigma_xw: f64,
        a: f64,
        b: f64,
        cut_points: Vec<f64>,
    },
}

impl Design {
    pub fn label(&self) -> &'static str {
        match self {
            Design::DirectMultinomial { .. } => "direct_multinomial",
            Design::BivariateNormal { .. } => "bivariate_normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub name: String,
    pub design: Design,
    /// Mean local value of each study; its length is the number of studies.
    pub w_means: Vec<f64>,
    pub strata_per_study: usize,
    pub controls_per_case: usize,
    pub beta_x: Vec<f64>,
    pub intercept_mean: f64,
    pub intercept_sd: f64,
    /// Controls per study sampled into the calibration subset.
    pub calibration_size: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn study_count(&self) -> usize {
        self.w_means.len()
    }

    pub fn category_count(&self) -> usize {
        self.beta_x.len() + 1
    }

    /// The scheme analyses of this scenario should use.
    pub fn scheme(&self) -> Result<CategoryScheme> {
        match &self.design {
            Design::DirectMultinomial { .. } => CategoryScheme::direct(self.category_count()),
            Design::BivariateNormal { cut_points, .. } => CategoryScheme::cut_points(cut_points.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        let s = self.study_count();
        let p = self.category_count();
        if s == 0 || self.strata_per_study == 0 || self.controls_per_case == 0 {
            return bad("studies, strata per study and controls per case must be positive".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.beta_x.is_empty() {
            return bad("beta_x needs at least one level effect".into());
        }
        if self.calibration_size > self.strata_per_study * self.controls_per_case {
            return bad(format!(
                "calibration size {} exceeds the {} controls per study",
                self.calibration_size,
                self.strata_per_study * self.controls_per_case
            ));
        }
        if !(self.intercept_sd >= 0.0) || !self.intercept_mean.is_finite() {
            return bad("intercept distribution is invalid".into());
        }
        if self.w_means.iter().chain(&self.beta_x).any(|v| !v.is_finite()) {
            return bad("non-finite scenario parameter".into());
        }
        match &self.design {
            Design::DirectMultinomial {
                w_sd,
                intercepts,
                slopes,
            } => {
                if !(*w_sd > 0.0) {
                    return bad("w_sd must be positive".into());
                }
                if intercepts.len() != s || slopes.len() != s {
                    return bad(format!("need calibration parameters for {s} studies"));
                }
                if intercepts.iter().chain(slopes).any(|v| v.len() != p - 1) {
                    return bad(format!("each study needs {} intercepts and slopes", p - 1));
                }
            }
            Design::BivariateNormal {
                tau2,
                sigma_ww,
                sigma_xx,
                sigma_xw,
                b,
                cut_points,
                ..
            } => {
                CategoryScheme::cut_points(cut_points.clone())?;
                if cut_points.len() + 1 != p {
                    return bad(format!(
                        "{} cut points give {} levels but beta_x implies {p}",
                        cut_points.len(),
                        cut_points.len() + 1
                    ));
                }
                let var_w = tau2 + sigma_ww;
                let var_x = b * b * tau2 + sigma_xx;
                let cov = b * tau2 + sigma_xw;
                if !(*tau2 >= 0.0) || !(var_w > 0.0) || !(var_x * var_w - cov * cov > 0.0) {
                    return bad("bivariate normal covariance is not positive definite".into());
                }
            }
        }
        Ok(())
    }
}

/// A generated dataset plus the values the analyst never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: PooledDataset,
    /// True category of every participant, per stratum in dataset order.
    pub true_categories: Vec<Vec<usize>>,
    /// True continuous reference values (joint normal design only).
    pub true_values: Option<Vec<Vec<f64>>>,
}

impl SimulatedData {
    /// The same data with every category revealed, for the known-exposure fit.
    pub fn with_known_categories(&self) -> Result<PooledDataset> {
        let offsets: Vec<usize> = self
            .dataset
            .studies()
            .iter()
            .scan(0, |acc, study| {
                let start = *acc;
                *acc += study.strata.len();
                Some(start)
            })
            .collect();
        self.dataset
            .with_categories(|s, j, i| self.true_categories[offsets[s] + j][i])
    }
}

struct Candidate {
    w: f64,
    x: Option<f64>,
    category: usize,
}

fn draw_candidate<R: Rng + ?Sized>(config: &ScenarioConfig, study: usize, rng: &mut R) -> Result<Candidate> {
    let mu = config.w_means[study];
    match &config.design {
        Design::DirectMultinomial {
            w_sd,
            intercepts,
            slopes,
        } => {
            let z: f64 = StandardNormal.sample(rng);
            let w = mu + w_sd * z;
            let probs = category_probs(&intercepts[study], &slopes[study], w);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut category = probs.len();
            for (p, pr) in probs.iter().enumerate() {
                acc += pr;
                if u < acc {
                    category = p + 1;
                    break;
                }
            }
            Ok(Candidate { w, x: None, category })
        }
        Design::BivariateNormal {
            tau2,
            sigma_ww,
            sigma_xx,
            sigma_xw,
            a,
            b,
            cut_points,
        } => {
            let var_w = tau2 + sigma_ww;
            let var_x = b * b * tau2 + sigma_xx;
            let cov = b * tau2 + sigma_xw;
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            let sd_w = libm::sqrt(var_w);
            let w = mu + sd_w * z1;
            let slope = cov / var_w;
            let resid_sd = libm::sqrt(var_x - cov * cov / var_w);
            let x = a + b * mu + slope * (w - mu) + resid_sd * z2;
            let category = categorize(x, cut_points)?;
            Ok(Candidate {
                w,
                x: Some(x),
                category,
            })
        }
    }
}

/// One participant drawn from a study's source population, before any
/// outcome is assigned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationDraw {
    pub w: f64,
    /// Continuous reference value (joint normal design only).
    pub x: Option<f64>,
    pub category: usize,
}

/// Draws `count` participants of study `study` from its source population.
pub fn population_sample<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    study: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PopulationDraw>> {
    config.validate()?;
    if study >= config.study_count() {
        return Err(Error::Input(format!("study index {study} out of range")));
    }
    (0..count)
        .map(|_| {
            draw_candidate(config, study, rng).map(|c| PopulationDraw {
                w: c.w,
                x: c.x,
                category: c.category,
            })
        })
        .collect()
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

/// Generates replicate `replicate` of a scenario. The result depends only
/// on `(config.seed, replicate)`.
pub fn simulate_dataset(config: &ScenarioConfig, replicate: usize) -> Result<SimulatedData> {
    config.validate()?;
    let p = config.category_count();
    let n = config.controls_per_case + 1;
    let intercept = Normal::new(config.intercept_mean, config.intercept_sd)
        .map_err(|e| Error::Input(format!("intercept distribution: {e}")))?;
    let continuous = matches!(config.design, Design::BivariateNormal { .. });

    let mut studies = Vec::with_capacity(config.study_count());
    let mut true_categories = Vec::new();
    let mut true_values = Vec::new();
    for s in 0..config.study_count() {
        let mut strata = Vec::with_capacity(config.strata_per_study);
        let mut hidden: Vec<(Vec<usize>, Vec<Option<f64>>)> = Vec::new();
        for j in 0..config.strata_per_study {
            let mut rng = rng::substream(config.seed, replicate as u64, s as u32, j as u32);
            let beta0 = intercept.sample(&mut rng);
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS {
                let mut members = Vec::with_capacity(n);
                let mut cases = 0;
                for _ in 0..n {
                    let cand = draw_candidate(config, s, &mut rng)?;
                    let effect = if cand.category > 1 {
                        config.beta_x[cand.category - 2]
                    } else {
                        0.0
                    };
                    let y = rng.random::<f64>() < expit(beta0 + effect);
                    cases += usize::from(y);
                    members.push((y, cand));
                }
                if cases == 1 {
                    accepted = Some(members);
                    break;
                }
            }
            let mut members = accepted.ok_or_else(|| {
                Error::Simulation(format!(
                    "no matched set with exactly one case after {MAX_ATTEMPTS} attempts"
                ))
            })?;
            let case_at = members.iter().position(|(y, _)| *y).expect("one case");
            members.swap(0, case_at);
            // Keep controls in draw order after the swap.
            if case_at > 1 {
                members[1..=case_at].rotate_left(1);
            }
            let participants = members
                .iter()
                .map(|(y, c)| Participant {
                    id: None,
                    outcome: *y,
                    local_value: c.w,
                    covariates: Vec::new(),
                    ref_category: None,
                    ref_value: None,
                    in_calibration: false,
                })
                .collect();
            hidden.push((
                members.iter().map(|(_, c)| c.category).collect(),
                members.iter().map(|(_, c)| c.x).collect(),
            ));
            strata.push(Stratum {
                id: (j + 1).to_string(),
                participants,
            });
        }

        // Simple random sample of controls into the calibration subset.
        let controls: Vec<(usize, usize)> = (0..strata.len())
            .flat_map(|j| (1..n).map(move |i| (j, i)))
            .collect();
        let mut cal_rng = rng::substream(config.seed, replicate as u64, s as u32, rng::CALIBRATION_STREAM);
        for k in sample(&mut cal_rng, controls.len(), config.calibration_size) {
            let (j, i) = controls[k];
            let member = &mut strata[j].participants[i];
            member.in_calibration = true;
            member.ref_category = Some(hidden[j].0[i]);
            member.ref_value = hidden[j].1[i];
        }

        for (cats, xs) in hidden {
            true_categories.push(cats);
            if continuous {
                true_values.push(xs.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect());
            }
        }
        studies.push(Study {
            id: format!("study{}", s + 1),
            strata,
        });
    }
    Ok(SimulatedData {
        dataset: PooledDataset::new(studies, 0, p)?,
        true_categories,
        true_values: continuous.then_some(true_values),
    })
}

/// Simulates one replicate and fits every requested method.
pub fn run_replicate(
    config: &ScenarioConfig,
    methods: &[FitMethod],
    replicate: usize,
) -> Result<ReplicateOutcome> {
    let data = simulate_dataset(config, replicate)?;
    let scheme = config.scheme()?;
    let mut fits = Vec::with_capacity(methods.len());
    for &method in methods {
        let result = match method {
            FitMethod::ClrKnownX => data
                .with_known_categories()
                .and_then(|known| fit_method(&known, &scheme, method)),
            _ => fit_method(&data.dataset, &scheme, method),
        };
        fits.push(MethodOutcome::from_fit(method, result));
    }
    Ok(ReplicateOutcome { replicate, fits })
}

/// Runs all replicates sequentially and aggregates them.
pub fn run_simulation(config: &ScenarioConfig, methods: &[FitMethod]) -> Result<SimulationReport> {
    config.validate()?;
    let outcomes = (0..config.replicates)
        .map(|r| run_replicate(config, methods, r))
        .collect::<Result<Vec<_>>>()?;
    aggregate(config, methods, &outcomes)
}

/// Methods a scenario's data can support.
pub fn default_methods(config: &ScenarioConfig) -> Vec<FitMethod> {
    match config.design {
        Design::DirectMultinomial { .. } => vec![FitMethod::Internalized, FitMethod::Full],
        Design::BivariateNormal { .. } => vec![
            FitMethod::Internalized,
            FitMethod::Full,
            FitMethod::LinearCalibration,
            FitMethod::Naive,
        ],
    }
}

/// The direct multinomial scenario with the calibration parameters of the
/// three simulated studies, 500 matched pairs each.
pub fn table1_scenario() -> ScenarioConfig {
    let ln15 = libm::log(1.5);
    ScenarioConfig {
        name: "table1".into(),
        design: Design::DirectMultinomial {
            w_sd: 16.0,
            intercepts: vec![
                vec![-13.7925, -29.8290],
                vec![-13.5167, -29.6692],
                vec![-13.5219, -29.7058],
            ],
            slopes: vec![vec![0.3259, 0.6324], vec![0.3203, 0.6348], vec![0.3246, 0.6427]],
        },
        w_means: vec![33.8657, 41.3204, 47.7603],
        strata_per_study: 500,
        controls_per_case: 1,
        beta_x: vec![-ln15 / 2.0, -ln15],
        intercept_mean: -1.0,
        intercept_sd: 0.1,
        calibration_size: 50,
        replicates: 200,
        seed: 20_240_101,
    }
}

/// The joint normal scenario cut at 62.9 and 76.3.
pub fn table2_scenario() -> ScenarioConfig {
    let ln15 = libm::log(1.5);
    ScenarioConfig {
        name: "table2".into(),
        design: Design::BivariateNormal {
            tau2: 240.89,
            sigma_ww: 16.0,
            sigma_xx: 16.0,
            sigma_xw: 0.0,
            a: 5.0,
            b: 1.4,
            cut_points: vec![62.9, 76.3],
        },
        w_means: vec![33.87, 41.32, 47.76],
        strata_per_study: 500,
        controls_per_case: 1,
        beta_x: vec![-ln15 / 2.0, -ln15],
        intercept_mean: -1.0,
        intercept_sd: 0.1,
        calibration_size: 50,
        replicates: 200,
        seed: 20_240_102,
    }
}

//! Projected Nesterov descent over the filter intensities.
//!
//! The objective is `L(K) = L_QA(assess(apply(I, K))) + gamma * sum k^2`.
//! Each iteration evaluates the gradient at the look-ahead point `K + mu v`,
//! updates `v <- mu v - lr grad`, moves `K <- K + v` and projects every
//! intensity back into its box. Fixed intensities never move and keep a zero
//! velocity. After every iteration a callback may steer the run.

use serde::{Deserialize, Serialize};

use crate::assessor::{loss_gradient_wrt_params, Assessment, QualityAssessor, ScoreDistribution};
use crate::error::{Error, Result};
use crate::filters::{self, FilterId, ImageContext, ParamVector};
use crate::image::ImageBuffer;

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_MAX_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Consecutive iterations with `|loss change| < tolerance`.
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub max_steps: usize,
    pub target: ScoreDistribution,
    /// `None` runs the full step budget.
    pub early_stop: Option<EarlyStop>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            gamma: DEFAULT_GAMMA,
            max_steps: DEFAULT_MAX_STEPS,
            target: ScoreDistribution::high_aesthetic_target(),
            early_stop: Some(EarlyStop::default()),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        check_gamma(self.gamma)?;
        if let Some(es) = &self.early_stop {
            if es.patience == 0 || !(es.tolerance >= 0.0) {
                return Err(Error::InvalidConfig("early stop needs patience >= 1 and tolerance >= 0".into()));
            }
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma must be finite and >= 0, got {gamma}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Number of completed iterations, across runs.
    pub iteration: usize,
    pub velocity: [f64; 8],
    pub last_loss: Option<f64>,
    /// Absent for scalar assessors.
    pub last_distribution: Option<ScoreDistribution>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            iteration: 0,
            velocity: [0.0; 8],
            last_loss: None,
            last_distribution: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_qa: f64,
    pub l_im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub k: ParamVector,
    pub loss: f64,
    pub l_qa: f64,
    pub l_im: f64,
    /// Regularisation weight the loss was computed with.
    pub gamma: f64,
    pub mean_score: f64,
}

impl IterationRecord {
    pub fn new(iteration: usize, k: ParamVector, gamma: f64, breakdown: LossBreakdown, assessment: &Assessment) -> Self {
        IterationRecord {
            iteration,
            k,
            loss: breakdown.total,
            l_qa: breakdown.l_qa,
            l_im: breakdown.l_im,
            gamma,
            mean_score: assessment.mean_score(),
        }
    }
}

/// Everything a loss evaluation needs besides `K`.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub assessor: &'a dyn QualityAssessor,
    /// Working image at the assessor's resolution.
    pub image: &'a ImageBuffer,
    pub ctx: &'a ImageContext,
}

/// Evaluates the loss at `params`. The image is rated at its own resolution.
pub fn loss(
    problem: &Problem<'_>,
    params: &ParamVector,
    gamma: f64,
    target: &ScoreDistribution,
) -> Result<(LossBreakdown, Assessment)> {
    let filtered = filters::apply(problem.image, params, problem.ctx)?;
    let assessment = problem.assessor.assess(&filtered)?;
    let l_qa = assessment.quality_loss(target);
    let l_im = gamma * params.sum_squares();
    Ok((
        LossBreakdown {
            total: l_qa + l_im,
            l_qa,
            l_im,
        },
        assessment,
    ))
}

/// `K + mu v`, projected; fixed intensities stay put.
pub fn lookahead(state: &OptimizerState, params: &ParamVector, cfg: &OptimizerConfig) -> ParamVector {
    let mut ahead = *params;
    let mut k = *params.values();
    for id in FilterId::ALL {
        let i = id.index();
        if !params.is_fixed(id) {
            k[i] += cfg.momentum * state.velocity[i];
        }
    }
    ahead.set_projected(k);
    ahead
}

/// One Nesterov update with an already evaluated look-ahead gradient.
/// A non-finite gradient leaves `state` and `params` untouched.
pub fn step(state: &mut OptimizerState, params: &mut ParamVector, grad: &[f64; 8], cfg: &OptimizerConfig) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::DivergentGradient);
    }
    let mut k = *params.values();
    for id in FilterId::ALL {
        let i = id.index();
        if params.is_fixed(id) {
            state.velocity[i] = 0.0;
            continue;
        }
        state.velocity[i] = cfg.momentum * state.velocity[i] - cfg.learning_rate * grad[i];
        k[i] += state.velocity[i];
    }
    params.set_projected(k);
    Ok(())
}

/// A batch of user edits, applied all-or-nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamEdit {
    #[serde(default)]
    pub set: Vec<(FilterId, f64)>,
    #[serde(default)]
    pub fix: Vec<FilterId>,
    #[serde(default)]
    pub unfix: Vec<FilterId>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl ParamEdit {
    pub fn is_empty(&self) -> bool {
        self.set.is_empty() && self.fix.is_empty() && self.unfix.is_empty() && self.gamma.is_none()
    }

    /// Apply to copies first so that a bad value changes nothing. Unfix runs
    /// before set, set before fix. Returns the filters whose value or fixed
    /// flag was touched.
    pub fn apply(&self, params: &mut ParamVector, gamma: &mut f64) -> Result<Vec<FilterId>> {
        let mut next = *params;
        if let Some(g) = self.gamma {
            check_gamma(g)?;
        }
        let mut touched = Vec::new();
        for &id in &self.unfix {
            next.unfix(id);
            touched.push(id);
        }
        for &(id, value) in &self.set {
            next.set(id, value)?;
            touched.push(id);
        }
        for &id in &self.fix {
            next.fix(id);
            touched.push(id);
        }
        *params = next;
        if let Some(g) = self.gamma {
            *gamma = g;
        }
        touched.sort_by_key(|id| id.index());
        touched.dedup();
        Ok(touched)
    }

    /// Later edits win; fix/unfix lists are replayed in order.
    pub fn merge(&mut self, later: ParamEdit) {
        self.set.extend(later.set);
        for id in later.unfix {
            self.fix.retain(|f| *f != id);
            self.unfix.push(id);
        }
        for id in later.fix {
            self.unfix.retain(|f| *f != id);
            self.fix.push(id);
        }
        if later.gamma.is_some() {
            self.gamma = later.gamma;
        }
    }
}

/// Handle the per-iteration callback uses to steer a run. Edits take
/// effect at the next iteration; an edited intensity restarts with zero
/// velocity.
pub struct Steering<'a> {
    params: &'a mut ParamVector,
    velocity: &'a mut [f64; 8],
    gamma: &'a mut f64,
    stop: bool,
    edited: bool,
}

impl Steering<'_> {
    pub fn params(&self) -> &ParamVector {
        self.params
    }

    pub fn gamma(&self) -> f64 {
        *self.gamma
    }

    pub fn set(&mut self, id: FilterId, value: f64) -> Result<()> {
        self.apply(&ParamEdit {
            set: vec![(id, value)],
            ..ParamEdit::default()
        })
    }

    pub fn fix(&mut self, id: FilterId) {
        self.params.fix(id);
        self.velocity[id.index()] = 0.0;
        self.edited = true;
    }

    pub fn unfix(&mut self, id: FilterId) {
        self.params.unfix(id);
        self.edited = true;
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        *self.gamma = gamma;
        self.edited = true;
        Ok(())
    }

    pub fn apply(&mut self, edit: &ParamEdit) -> Result<()> {
        if edit.is_empty() {
            return Ok(());
        }
        for id in edit.apply(self.params, self.gamma)? {
            self.velocity[id.index()] = 0.0;
        }
        self.edited = true;
        Ok(())
    }

    pub fn stop(&mut self) {
        self.stop = true;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Converged,
    Stopped,
}

/// Hooks into a running optimisation.
pub trait Observer {
    /// Called after each step, before the iteration's loss is evaluated.
    /// Edits made here are part of the iteration's record.
    fn before_record(&mut self, _steering: &mut Steering<'_>) {}

    /// Called after each iteration with its record. Edits made here take
    /// effect in the next step.
    fn on_iteration(&mut self, record: &IterationRecord, steering: &mut Steering<'_>);
}

/// An observer that only sees completed iterations.
pub struct OnIteration<F>(pub F);

impl<F: FnMut(&IterationRecord, &mut Steering<'_>)> Observer for OnIteration<F> {
    fn on_iteration(&mut self, record: &IterationRecord, steering: &mut Steering<'_>) {
        (self.0)(record, steering)
    }
}

/// Runs up to `steps` iterations, calling `on_iteration` after each one.
pub fn run<F>(
    problem: &Problem<'_>,
    params: &mut ParamVector,
    state: &mut OptimizerState,
    cfg: &mut OptimizerConfig,
    steps: usize,
    on_iteration: F,
) -> Result<StopReason>
where
    F: FnMut(&IterationRecord, &mut Steering<'_>),
{
    run_observed(problem, params, state, cfg, steps, OnIteration(on_iteration))
}

/// Runs up to `steps` iterations, reporting each one to `observer`.
///
/// `params`, `state` and `cfg.gamma` always hold the last completed
/// iteration, also when an error is returned.
pub fn run_observed<O: Observer>(
    problem: &Problem<'_>,
    params: &mut ParamVector,
    state: &mut OptimizerState,
    cfg: &mut OptimizerConfig,
    steps: usize,
    mut observer: O,
) -> Result<StopReason> {
    cfg.validate()?;
    if steps == 0 {
        return Ok(StopReason::Budget);
    }
    let mut previous = loss(problem, params, cfg.gamma, &cfg.target)?.0.total;
    let mut calm = 0;
    for _ in 0..steps {
        let ahead = lookahead(state, params, cfg);
        let grad =
            loss_gradient_wrt_params(problem.assessor, problem.image, &ahead, problem.ctx, cfg.gamma, &cfg.target)?;
        let mut next_state = state.clone();
        let mut next_params = *params;
        step(&mut next_state, &mut next_params, &grad, cfg)?;

        let mut gamma = cfg.gamma;
        let mut steering = Steering {
            params: &mut next_params,
            velocity: &mut next_state.velocity,
            gamma: &mut gamma,
            stop: false,
            edited: false,
        };
        observer.before_record(&mut steering);
        let (early_stop, early_edit) = (steering.stop, steering.edited);

        let (breakdown, assessment) = loss(problem, &next_params, gamma, &cfg.target)?;
        if !breakdown.total.is_finite() {
            return Err(Error::DivergentGradient);
        }
        next_state.iteration += 1;
        next_state.last_loss = Some(breakdown.total);
        next_state.last_distribution = assessment.distribution().copied();
        *state = next_state;
        *params = next_params;
        cfg.gamma = gamma;

        let record = IterationRecord::new(state.iteration, *params, cfg.gamma, breakdown, &assessment);
        calm = if !early_edit && (breakdown.total - previous).abs() < cfg.early_stop.map_or(-1.0, |es| es.tolerance) {
            calm + 1
        } else {
            0
        };
        previous = breakdown.total;

        let mut steering = Steering {
            params,
            velocity: &mut state.velocity,
            gamma: &mut cfg.gamma,
            stop: early_stop,
            edited: false,
        };
        observer.on_iteration(&record, &mut steering);
        let (stop, edited) = (steering.stop, steering.edited);
        if stop {
            return Ok(StopReason::Stopped);
        }
        if edited {
            calm = 0;
            previous = loss(problem, params, cfg.gamma, &cfg.target)?.0.total;
        }
        if cfg.early_stop.is_some_and(|es| calm >= es.patience) {
            return Ok(StopReason::Converged);
        }
    }
    Ok(StopReason::Budget)
}

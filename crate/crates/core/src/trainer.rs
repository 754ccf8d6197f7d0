//! Physics-informed training of interaction force laws.
//!
//! A single network maps time to all agent positions; its first and second
//! time derivatives enter an ODE-residual loss that ties accelerations to
//! the propulsion term plus the polynomial pairwise forces, while a
//! pattern-specific ground-truth loss drives the trajectories toward the
//! commanded collective structure. Minimizing the sum over both the
//! network weights and the polynomial parameters yields an
//! [`InteractionModel`] that is then verified by forward simulation.
//!
//! Pattern families fix which force terms are trainable: ring, clumps, and
//! mill learn the distancing series with `g = 0`; the ordered state learns
//! the aligning series with `f = 0`; flock learns both.

use crate::autodiff::{AdError, Tape, Var};
use crate::dynamics::{init_random, DomainSpec, InitClass, IntegratorConfig, NoiseSpec, SwarmState};
use crate::forcemodel::{GroupAssignment, InteractionModel, ModelError, PatternMeta};
use crate::metrics::{trial_harness, TrialReport, TrialSetup};
use crate::network::{forward_on_tape, AgentJet, NetworkLayout, NetworkParameters};
use crate::optim::{lbfgs_optimize, AdamState, EvalError, LbfgsOptions, LbfgsTermination, Objective};
use crate::{stream_seed, R_FLOOR, V_FLOOR};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("optimization failed: {0}")]
    Eval(#[from] EvalError),
    #[error("loss diverged at epoch {epoch}; keeping last finite checkpoint")]
    Divergent { epoch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Ordered,
    Ring,
    Clumps,
    MillDouble,
    MillSingle,
    Flock,
}

impl PatternKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatternKind::Ordered => "ordered",
            PatternKind::Ring => "ring",
            PatternKind::Clumps => "clumps",
            PatternKind::MillDouble => "mill_double",
            PatternKind::MillSingle => "mill_single",
            PatternKind::Flock => "flock",
        }
    }

    pub fn parse(s: &str) -> Option<PatternKind> {
        match s {
            "ordered" => Some(PatternKind::Ordered),
            "ring" => Some(PatternKind::Ring),
            "clumps" => Some(PatternKind::Clumps),
            "mill_double" => Some(PatternKind::MillDouble),
            "mill_single" => Some(PatternKind::MillSingle),
            "flock" => Some(PatternKind::Flock),
            _ => None,
        }
    }

    /// Is the distancing series `f` trainable for this pattern?
    pub fn trains_distancing(&self) -> bool {
        !matches!(self, PatternKind::Ordered)
    }

    /// Is the aligning series `g` trainable for this pattern?
    pub fn trains_aligning(&self) -> bool {
        matches!(self, PatternKind::Ordered | PatternKind::Flock)
    }

    /// Initialization range for the polynomial parameters.
    pub fn poly_init_range(&self) -> f64 {
        match self {
            PatternKind::Ordered | PatternKind::Flock => 0.1,
            _ => 1.0,
        }
    }
}

/// A commanded target pattern with its geometric and dynamic knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Target average radius (ring, clumps, mill).
    pub radius: Option<f64>,
    /// Target radius-distribution spread (clumps).
    pub epsilon: Option<f64>,
    /// Commanded rotation direction: +1 counterclockwise, -1 clockwise.
    pub rotation_sign: Option<i8>,
    /// Commanded time at which the ordered state should appear.
    pub t_order: Option<f64>,
    /// Target maximum spatial extent (flock).
    pub flock_size: Option<f64>,
    /// Hinge threshold on agent radius; defaults to `flock_size`.
    pub r_max: Option<f64>,
    /// Hinge threshold on pair distance; defaults to half the equal-spacing
    /// arc on the target circle.
    pub d_min: Option<f64>,
    /// Interaction range of the aligning force (ordered state, flock).
    pub interaction_range: Option<f64>,
    /// Number density for field-class initial conditions.
    pub density: f64,
}

pub const DEFAULT_DENSITY: f64 = 4.0;

impl PatternSpec {
    fn base(kind: PatternKind) -> Self {
        PatternSpec {
            kind,
            radius: None,
            epsilon: None,
            rotation_sign: None,
            t_order: None,
            flock_size: None,
            r_max: None,
            d_min: None,
            interaction_range: None,
            density: DEFAULT_DENSITY,
        }
    }

    pub fn ring(radius: f64) -> Self {
        PatternSpec {
            radius: Some(radius),
            ..Self::base(PatternKind::Ring)
        }
    }

    pub fn clumps(radius: f64, epsilon: f64) -> Self {
        PatternSpec {
            radius: Some(radius),
            epsilon: Some(epsilon),
            ..Self::base(PatternKind::Clumps)
        }
    }

    pub fn mill_double(radius: f64) -> Self {
        PatternSpec {
            radius: Some(radius),
            ..Self::base(PatternKind::MillDouble)
        }
    }

    pub fn mill_single(radius: f64, rotation_sign: i8) -> Self {
        PatternSpec {
            radius: Some(radius),
            rotation_sign: Some(rotation_sign),
            ..Self::base(PatternKind::MillSingle)
        }
    }

    pub fn ordered(interaction_range: f64) -> Self {
        PatternSpec {
            interaction_range: Some(interaction_range),
            ..Self::base(PatternKind::Ordered)
        }
    }

    pub fn ordered_timed(interaction_range: f64, t_order: f64) -> Self {
        PatternSpec {
            t_order: Some(t_order),
            ..Self::ordered(interaction_range)
        }
    }

    pub fn flock(size: f64, interaction_range: f64) -> Self {
        PatternSpec {
            flock_size: Some(size),
            interaction_range: Some(interaction_range),
            ..Self::base(PatternKind::Flock)
        }
    }

    pub fn validate_for_training(&self) -> Result<(), TrainError> {
        let need = |cond: bool, what: &str| {
            if cond {
                Ok(())
            } else {
                Err(TrainError::Config(format!(
                    "pattern '{}' requires {what}",
                    self.kind.as_str()
                )))
            }
        };
        let positive = |v: Option<f64>, what: &str| match v {
            Some(x) if x > 0.0 => Ok(()),
            Some(x) => Err(TrainError::Config(format!("{what} must be positive, got {x}"))),
            None => Ok(()),
        };
        match self.kind {
            PatternKind::Ring | PatternKind::MillDouble => need(self.radius.is_some(), "a radius")?,
            PatternKind::Clumps => {
                need(self.radius.is_some(), "a radius")?;
                need(self.epsilon.is_some(), "a cluster size (epsilon)")?;
            }
            PatternKind::MillSingle => {
                need(self.radius.is_some(), "a radius")?;
                need(self.rotation_sign.is_some(), "a rotation direction")?;
                if let Some(s) = self.rotation_sign {
                    need(s == 1 || s == -1, "rotation_sign in {-1, +1}")?;
                }
            }
            PatternKind::Ordered => {
                need(self.interaction_range.is_some(), "an interaction range")?
            }
            PatternKind::Flock => {
                need(self.flock_size.is_some(), "a flock size")?;
                need(self.interaction_range.is_some(), "an interaction range")?;
            }
        }
        positive(self.radius, "radius")?;
        positive(self.epsilon, "epsilon")?;
        positive(self.t_order, "t_order")?;
        positive(self.flock_size, "flock_size")?;
        positive(self.r_max, "r_max")?;
        positive(self.d_min, "d_min")?;
        positive(self.interaction_range, "interaction_range")?;
        positive(Some(self.density), "density")?;
        Ok(())
    }

    /// Training (and default verification) horizon.
    pub fn default_horizon(&self) -> f64 {
        match self.kind {
            PatternKind::Ordered => self.t_order.map_or(40.0, |t| (t + 10.0).max(40.0)),
            _ => 50.0,
        }
    }

    /// The fixed output scale factor: the geometric target of the pattern,
    /// or the distance scale reachable within the horizon for the free-
    /// roaming ordered state.
    pub fn scale_factor(&self, horizon: f64, v0: f64) -> f64 {
        match self.kind {
            PatternKind::Ring | PatternKind::Clumps | PatternKind::MillDouble
            | PatternKind::MillSingle => self.radius.unwrap_or(1.0),
            PatternKind::Flock => self.flock_size.unwrap_or(1.0),
            PatternKind::Ordered => v0 * horizon,
        }
    }

    pub fn init_class(&self, n_agents: usize) -> InitClass {
        match self.kind {
            PatternKind::Ordered | PatternKind::Flock => InitClass::Field {
                extent: (n_agents as f64 / self.density).sqrt(),
            },
            _ => InitClass::BoundedSwarm,
        }
    }

    /// Simulation domain for verification: the ordered state lives in a
    /// periodic box sized by its density; everything else is unbounded.
    pub fn sim_domain(&self, n_agents: usize) -> DomainSpec {
        match self.kind {
            PatternKind::Ordered => DomainSpec::Periodic {
                side_length: (n_agents as f64 / self.density).sqrt(),
            },
            _ => DomainSpec::Unbounded,
        }
    }

    /// Verification noise: sigma 1 for the ordered state, 10 for flock,
    /// off otherwise.
    pub fn sim_noise(&self) -> NoiseSpec {
        match self.kind {
            PatternKind::Ordered => NoiseSpec::with_sigma(1.0),
            PatternKind::Flock => NoiseSpec::with_sigma(10.0),
            _ => NoiseSpec::off(),
        }
    }

    pub fn to_meta(&self) -> PatternMeta {
        let mut targets = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(x) = v {
                targets.insert(k.to_string(), x);
            }
        };
        put("radius", self.radius);
        put("epsilon", self.epsilon);
        put("rotation_sign", self.rotation_sign.map(f64::from));
        put("t_order", self.t_order);
        put("flock_size", self.flock_size);
        put("r_max", self.r_max);
        put("d_min", self.d_min);
        put("interaction_range", self.interaction_range);
        targets.insert("density".to_string(), self.density);
        PatternMeta {
            kind: self.kind.as_str().to_string(),
            targets,
        }
    }

    pub fn from_meta(meta: &PatternMeta) -> Result<PatternSpec, TrainError> {
        let kind = PatternKind::parse(&meta.kind)
            .ok_or_else(|| TrainError::Config(format!("unknown pattern kind '{}'", meta.kind)))?;
        let get = |k: &str| meta.targets.get(k).copied();
        Ok(PatternSpec {
            kind,
            radius: get("radius"),
            epsilon: get("epsilon"),
            rotation_sign: get("rotation_sign").map(|v| if v < 0.0 { -1 } else { 1 }),
            t_order: get("t_order"),
            flock_size: get("flock_size"),
            r_max: get("r_max"),
            d_min: get("d_min"),
            interaction_range: get("interaction_range"),
            density: get("density").unwrap_or(DEFAULT_DENSITY),
        })
    }
}

/// Weights of the ground-truth loss terms. Defaults reproduce the
/// per-pattern weight tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub v_initial: f64,
    pub r_initial: f64,
    pub center_of_mass: f64,
    pub per_agent_radius: f64,
    pub mean_radius: f64,
    pub radius_std: f64,
    pub min_distance_hinge: f64,
    pub o_r_abs: f64,
    pub o_r: f64,
    pub speed_norm: f64,
    pub order_final: f64,
    pub order_ramp: f64,
    pub max_radius_hinge: f64,
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            v_initial: 0.0,
            r_initial: 0.0,
            center_of_mass: 0.0,
            per_agent_radius: 0.0,
            mean_radius: 0.0,
            radius_std: 0.0,
            min_distance_hinge: 0.0,
            o_r_abs: 0.0,
            o_r: 0.0,
            speed_norm: 0.0,
            order_final: 0.0,
            order_ramp: 0.0,
            max_radius_hinge: 0.0,
        }
    }

    /// The per-pattern weight table rows. The timed ordered state adds the
    /// ramp term on top of its row.
    pub fn defaults_for(spec: &PatternSpec) -> Self {
        let mut w = LossWeights::zero();
        match spec.kind {
            PatternKind::Ring => {
                w.v_initial = 1.0;
                w.per_agent_radius = 5.0;
                w.o_r_abs = 5.0;
            }
            PatternKind::Clumps => {
                w.v_initial = 1.0;
                w.center_of_mass = 1.0;
                w.mean_radius = 1.0;
                w.radius_std = 5.0;
            }
            PatternKind::MillDouble => {
                w.v_initial = 1.0;
                w.center_of_mass = 1.0;
                w.mean_radius = 1.0;
                w.min_distance_hinge = 5.0;
                w.o_r_abs = 5.0;
            }
            PatternKind::MillSingle => {
                w.v_initial = 1.0;
                w.center_of_mass = 1.0;
                w.mean_radius = 1.0;
                w.min_distance_hinge = 5.0;
                w.o_r = 5.0;
            }
            PatternKind::Ordered => {
                w.r_initial = 5.0;
                w.v_initial = 5.0;
                w.speed_norm = 5.0;
                w.order_final = 5.0;
                if spec.t_order.is_some() {
                    w.order_ramp = 5.0;
                }
            }
            PatternKind::Flock => {
                w.r_initial = 1.0;
                w.v_initial = 1.0;
                w.speed_norm = 5.0;
                w.max_radius_hinge = 5.0;
                w.min_distance_hinge = 5.0;
            }
        }
        w
    }

    fn weight(&self, term: Term) -> f64 {
        match term {
            Term::OdeResidual => 1.0,
            Term::VInitial => self.v_initial,
            Term::RInitial => self.r_initial,
            Term::CenterOfMass => self.center_of_mass,
            Term::PerAgentRadius => self.per_agent_radius,
            Term::MeanRadius => self.mean_radius,
            Term::RadiusStd => self.radius_std,
            Term::MinDistanceHinge => self.min_distance_hinge,
            Term::OrAbs => self.o_r_abs,
            Term::Or => self.o_r,
            Term::SpeedNorm => self.speed_norm,
            Term::OrderFinal => self.order_final,
            Term::OrderRamp => self.order_ramp,
            Term::MaxRadiusHinge => self.max_radius_hinge,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Term {
    OdeResidual,
    VInitial,
    RInitial,
    CenterOfMass,
    PerAgentRadius,
    MeanRadius,
    RadiusStd,
    MinDistanceHinge,
    OrAbs,
    Or,
    SpeedNorm,
    OrderFinal,
    OrderRamp,
    MaxRadiusHinge,
}

const ALL_TERMS: [Term; 14] = [
    Term::OdeResidual,
    Term::VInitial,
    Term::RInitial,
    Term::CenterOfMass,
    Term::PerAgentRadius,
    Term::MeanRadius,
    Term::RadiusStd,
    Term::MinDistanceHinge,
    Term::OrAbs,
    Term::Or,
    Term::SpeedNorm,
    Term::OrderFinal,
    Term::OrderRamp,
    Term::MaxRadiusHinge,
];

impl Term {
    fn key(&self) -> &'static str {
        match self {
            Term::OdeResidual => "ode_residual",
            Term::VInitial => "v_initial",
            Term::RInitial => "r_initial",
            Term::CenterOfMass => "center_of_mass",
            Term::PerAgentRadius => "per_agent_radius",
            Term::MeanRadius => "mean_radius",
            Term::RadiusStd => "radius_std",
            Term::MinDistanceHinge => "min_distance_hinge",
            Term::OrAbs => "o_r_abs",
            Term::Or => "o_r",
            Term::SpeedNorm => "speed_norm",
            Term::OrderFinal => "order_final",
            Term::OrderRamp => "order_ramp",
            Term::MaxRadiusHinge => "max_radius_hinge",
        }
    }

    fn index(&self) -> usize {
        ALL_TERMS.iter().position(|t| t == self).expect("listed")
    }
}

const N_TERMS: usize = ALL_TERMS.len();

#[derive(Clone, Copy, Debug)]
pub struct TrainingConfig {
    /// Time horizon; defaults per pattern when `None`.
    pub horizon: Option<f64>,
    /// Points the horizon is discretized into.
    pub n_time_points: usize,
    pub adam_epochs: usize,
    pub adam_lr: f64,
    pub lbfgs_tolerance: f64,
    pub lbfgs_max_iterations: usize,
    pub lbfgs_history: usize,
    /// Polynomial terms per trainable coefficient function.
    pub poly_terms: usize,
    pub n_agents: usize,
    pub propulsion_speed: f64,
    pub rng_seed: u64,
}

impl TrainingConfig {
    pub fn defaults(rng_seed: u64) -> Self {
        TrainingConfig {
            horizon: None,
            n_time_points: 201,
            adam_epochs: 200,
            adam_lr: 1e-3,
            lbfgs_tolerance: 1e-4,
            lbfgs_max_iterations: 2000,
            lbfgs_history: 20,
            poly_terms: 4,
            n_agents: 40,
            propulsion_speed: 2.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        // 2 is the structural minimum (initial and final index); real runs
        // use hundreds, toy gradient checks use single digits
        if self.n_time_points < 2 {
            return Err(TrainError::Config(format!(
                "n_time_points must be at least 2, got {}",
                self.n_time_points
            )));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                return Err(TrainError::Config(format!("horizon must be positive, got {h}")));
            }
        }
        if self.n_agents < 2 {
            return Err(TrainError::Config(format!(
                "need at least 2 agents, got {}",
                self.n_agents
            )));
        }
        if self.poly_terms < 1 {
            return Err(TrainError::Config("poly_terms must be at least 1".into()));
        }
        if !(self.propulsion_speed > 0.0) {
            return Err(TrainError::Config("propulsion_speed must be positive".into()));
        }
        Ok(())
    }
}

/// Time indices where the loss is evaluated: the general set covers 10% of
/// the discretization, endpoints included; the hinge terms of the flock use
/// a sparser set confined to the second half where the pattern has settled.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocationPlan {
    pub general: Vec<usize>,
    pub flock_hinge: Vec<usize>,
}

fn equidistant_indices(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count <= 1 || lo == hi {
        return vec![hi.min(lo.max(hi))];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|j| {
            let frac = j as f64 / (count - 1) as f64;
            (lo as f64 + frac * (hi - lo) as f64).round() as usize
        })
        .collect();
    out.dedup();
    out
}

pub fn collocation_points(n_time_points: usize, kind: PatternKind) -> CollocationPlan {
    let hi = n_time_points - 1;
    let n_general = ((0.1 * n_time_points as f64).round() as usize).max(2);
    let general = equidistant_indices(0, hi, n_general);
    let flock_hinge = if matches!(kind, PatternKind::Flock) {
        let lo = (n_time_points as f64 / 2.0).ceil() as usize;
        let n_hinge = ((0.05 * n_time_points as f64).round() as usize).max(1);
        equidistant_indices(lo, hi, n_hinge)
    } else {
        Vec::new()
    };
    CollocationPlan {
        general,
        flock_hinge,
    }
}

/// One loss-evaluation site: a time index with the roles it plays.
#[derive(Clone, Copy, Debug)]
struct Site {
    t: f64,
    t_norm: f64,
    general: bool,
    flock_hinge: bool,
    is_initial: bool,
    is_final: bool,
}

/// Everything fixed for the duration of one training run.
pub struct TrainingProblem {
    spec: PatternSpec,
    config: TrainingConfig,
    layout: NetworkLayout,
    scale_factor: f64,
    horizon: f64,
    weights: LossWeights,
    controls: Vec<f64>,
    sites: Vec<Site>,
    n_general: usize,
    n_flock: usize,
    initial_state: SwarmState,
    /// Ramp start: the initial value of the order quantity from the
    /// sampled initial velocities.
    initial_order: f64,
    radius_target: f64,
    epsilon_target: f64,
    rotation_target: f64,
    r_max_target: f64,
    d_min_target: f64,
    t_order_target: f64,
    cutoff: Option<f64>,
}

impl TrainingProblem {
    pub fn new(spec: &PatternSpec, config: &TrainingConfig) -> Result<Self, TrainError> {
        spec.validate_for_training()?;
        config.validate()?;

        let horizon = config.horizon.unwrap_or_else(|| spec.default_horizon());
        let v0 = config.propulsion_speed;
        let n = config.n_agents;

        let k = config.poly_terms;
        let layout = NetworkLayout {
            n_inputs: 1 + usize::from(spec.t_order.is_some()),
            n_agents: n,
            k_f: if spec.kind.trains_distancing() { k } else { 0 },
            k_g: if spec.kind.trains_aligning() { k } else { 0 },
        };

        let plan = collocation_points(config.n_time_points, spec.kind);
        let nt = config.n_time_points;
        let time_of = |i: usize| horizon * i as f64 / (nt - 1) as f64;
        let mut site_map: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
        for &i in &plan.general {
            site_map.entry(i).or_insert((false, false)).0 = true;
        }
        for &i in &plan.flock_hinge {
            site_map.entry(i).or_insert((false, false)).1 = true;
        }
        let sites: Vec<Site> = site_map
            .iter()
            .map(|(&i, &(general, flock_hinge))| Site {
                t: time_of(i),
                t_norm: 2.0 * i as f64 / (nt - 1) as f64 - 1.0,
                general,
                flock_hinge,
                is_initial: i == 0,
                is_final: i == nt - 1,
            })
            .collect();

        // Fresh random initial conditions, drawn from the same family the
        // verification simulations use but on an independent stream.
        let initial_state = init_random(
            spec.init_class(n),
            n,
            v0,
            stream_seed(config.rng_seed, 0x1C),
        );
        let mean_v = initial_state.total_momentum() / n as f64;
        let initial_order = mean_v.norm() / v0;

        let radius_target = spec.radius.unwrap_or(1.0);
        let size_scale = match spec.kind {
            PatternKind::Flock => spec.flock_size.unwrap_or(1.0),
            _ => radius_target,
        };
        Ok(TrainingProblem {
            spec: spec.clone(),
            config: *config,
            layout,
            scale_factor: spec.scale_factor(horizon, v0),
            horizon,
            weights: LossWeights::defaults_for(spec),
            controls: spec
                .t_order
                .map(|t| vec![t / horizon])
                .unwrap_or_default(),
            sites,
            n_general: plan.general.len(),
            n_flock: plan.flock_hinge.len(),
            initial_state,
            initial_order,
            radius_target,
            epsilon_target: spec.epsilon.unwrap_or(0.0),
            rotation_target: spec.rotation_sign.map_or(1.0, f64::from),
            r_max_target: spec.r_max.or(spec.flock_size).unwrap_or(f64::INFINITY),
            d_min_target: spec
                .d_min
                .unwrap_or(std::f64::consts::PI * size_scale / n as f64),
            t_order_target: spec.t_order.unwrap_or(0.0),
            cutoff: spec.interaction_range,
        })
    }

    /// Override the loss weights (mainly for ablation tests).
    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn layout(&self) -> NetworkLayout {
        self.layout
    }

    pub fn initial_parameters(&self) -> NetworkParameters {
        NetworkParameters::init(
            self.layout,
            self.scale_factor,
            self.spec.kind.poly_init_range(),
            self.config.rng_seed,
        )
    }

    /// Total loss, its gradient, and the unweighted per-term values.
    pub fn eval(&self, values: &[f64]) -> Result<(f64, Vec<f64>, [f64; N_TERMS]), TrainError> {
        let evals: Vec<Result<SiteEval, TrainError>> = self
            .sites
            .par_iter()
            .map(|site| self.eval_site(values, site))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; values.len()];
        let mut terms = [0.0; N_TERMS];
        for e in evals {
            let e = e?;
            loss += e.loss;
            for (g, s) in grad.iter_mut().zip(&e.grad) {
                *g += s;
            }
            for (t, s) in terms.iter_mut().zip(&e.terms) {
                *t += s;
            }
        }
        Ok((loss, grad, terms))
    }

    /// The ODE-residual part of the loss.
    pub fn ode_residual_loss(&self, values: &[f64]) -> Result<f64, TrainError> {
        Ok(self.eval(values)?.2[Term::OdeResidual.index()])
    }

    /// The weighted ground-truth part of the loss.
    pub fn ground_truth_loss(&self, values: &[f64]) -> Result<f64, TrainError> {
        let (_, _, terms) = self.eval(values)?;
        Ok(ALL_TERMS
            .iter()
            .filter(|t| !matches!(t, Term::OdeResidual))
            .map(|t| self.weights.weight(*t) * terms[t.index()])
            .sum())
    }

    pub fn term_values(&self, values: &[f64]) -> Result<BTreeMap<String, f64>, TrainError> {
        let (_, _, terms) = self.eval(values)?;
        Ok(ALL_TERMS
            .iter()
            .map(|t| (t.key().to_string(), terms[t.index()]))
            .collect())
    }

    fn eval_site(&self, values: &[f64], site: &Site) -> Result<SiteEval, TrainError> {
        let mut tape = Tape::with_capacity(values.len() + 80_000);
        let vars = tape.leaves(values);
        let jets = forward_on_tape(
            &self.layout,
            self.scale_factor,
            &mut tape,
            &vars,
            site.t_norm,
            self.horizon,
            &self.controls,
        );
        let contributions = self.site_terms(&mut tape, &vars, &jets, site);
        let mut total = tape.zero();
        let mut terms = [0.0; N_TERMS];
        for (term, var) in &contributions {
            terms[term.index()] = tape.value(*var);
            let weighted = tape.mul_const(*var, self.weights.weight(*term));
            total = tape.add(total, weighted);
        }
        let (loss, grad) = tape.backward(total)?;
        Ok(SiteEval { loss, grad, terms })
    }

    /// All loss-term contributions of one site, unweighted. Each term is
    /// pre-divided by its site count so summing over sites yields the mean.
    fn site_terms(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        jets: &[AgentJet],
        site: &Site,
    ) -> Vec<(Term, Var)> {
        let n = self.layout.n_agents;
        let n_f = n as f64;
        let v0 = self.config.propulsion_speed;
        let mut out: Vec<(Term, Var)> = Vec::new();
        let mut scratch = SiteScratch::default();

        if site.general {
            let per_site = 1.0 / self.n_general as f64;
            let w = &self.weights;

            let residual = self.ode_residual_terms(tape, vars, jets, &mut scratch);
            let residual = tape.mul_const(residual, per_site / n_f);
            out.push((Term::OdeResidual, residual));

            if w.center_of_mass > 0.0 {
                let (cx, cy) = scratch.center_of_mass(tape, jets, n_f);
                let cx2 = tape.square(cx);
                let cy2 = tape.square(cy);
                let v = tape.add(cx2, cy2);
                out.push((Term::CenterOfMass, tape.mul_const(v, per_site)));
            }
            if w.per_agent_radius > 0.0 {
                let radii = scratch.radii(tape, jets).to_vec();
                let mut acc = tape.zero();
                for r in radii {
                    let d = tape.add_const(r, -self.radius_target);
                    let d2 = tape.square(d);
                    acc = tape.add(acc, d2);
                }
                out.push((Term::PerAgentRadius, tape.mul_const(acc, per_site / n_f)));
            }
            if w.mean_radius > 0.0 {
                let mean = scratch.mean_radius(tape, jets, n_f);
                let d = tape.add_const(mean, -self.radius_target);
                let d2 = tape.square(d);
                out.push((Term::MeanRadius, tape.mul_const(d2, per_site)));
            }
            if w.radius_std > 0.0 {
                let mean = scratch.mean_radius(tape, jets, n_f);
                let radii = scratch.radii(tape, jets).to_vec();
                let mut acc = tape.zero();
                for r in radii {
                    let d = tape.sub(r, mean);
                    let d2 = tape.square(d);
                    acc = tape.add(acc, d2);
                }
                let var = tape.mul_const(acc, 1.0 / n_f);
                let guarded = tape.max_const(var, 1e-24);
                let std = tape.sqrt(guarded);
                let d = tape.add_const(std, -self.epsilon_target);
                let d2 = tape.square(d);
                out.push((Term::RadiusStd, tape.mul_const(d2, per_site)));
            }
            if w.min_distance_hinge > 0.0 && !matches!(self.spec.kind, PatternKind::Flock) {
                let v = self.min_distance_hinge(tape, jets, &mut scratch);
                out.push((Term::MinDistanceHinge, tape.mul_const(v, per_site)));
            }
            if w.o_r_abs > 0.0 || w.o_r > 0.0 {
                let norm = 1.0 / (n_f * self.radius_target * v0);
                let mut signed = tape.zero();
                let mut absolute = tape.zero();
                for a in jets {
                    let t1 = tape.mul(a.x.v, a.y.d1);
                    let t2 = tape.mul(a.y.v, a.x.d1);
                    let cross = tape.sub(t1, t2);
                    signed = tape.add(signed, cross);
                    let c_abs = tape.abs(cross);
                    absolute = tape.add(absolute, c_abs);
                }
                if w.o_r_abs > 0.0 {
                    let q = tape.mul_const(absolute, norm);
                    let d = tape.add_const(q, -1.0);
                    let d2 = tape.square(d);
                    out.push((Term::OrAbs, tape.mul_const(d2, per_site)));
                }
                if w.o_r > 0.0 {
                    let q = tape.mul_const(signed, norm);
                    let d = tape.add_const(q, -self.rotation_target);
                    let d2 = tape.square(d);
                    out.push((Term::Or, tape.mul_const(d2, per_site)));
                }
            }
            if w.speed_norm > 0.0 {
                let speeds = scratch.speeds(tape, jets).to_vec();
                let mut acc = tape.zero();
                for s in speeds {
                    acc = tape.add(acc, s);
                }
                let q = tape.mul_const(acc, 1.0 / (n_f * v0));
                let d = tape.add_const(q, -1.0);
                let d2 = tape.square(d);
                out.push((Term::SpeedNorm, tape.mul_const(d2, per_site)));
            }
            if w.order_ramp > 0.0 {
                let q = self.order_quantity(tape, jets, n_f, v0);
                let ramp = if self.t_order_target > 0.0 {
                    (site.t / self.t_order_target).min(1.0)
                } else {
                    1.0
                };
                let target = self.initial_order + (1.0 - self.initial_order) * ramp;
                let d = tape.add_const(q, -target);
                let d2 = tape.square(d);
                out.push((Term::OrderRamp, tape.mul_const(d2, per_site)));
            }
        }

        if site.flock_hinge {
            let per_site = 1.0 / self.n_flock.max(1) as f64;
            if self.weights.max_radius_hinge > 0.0 {
                let (cx, cy) = scratch.center_of_mass(tape, jets, n_f);
                let mut acc = tape.zero();
                for a in jets {
                    let dx = tape.sub(a.x.v, cx);
                    let dy = tape.sub(a.y.v, cy);
                    let r = tape.norm2(dx, dy);
                    let over = tape.add_const(r, -self.r_max_target);
                    let h = tape.relu(over);
                    let h2 = tape.square(h);
                    acc = tape.add(acc, h2);
                }
                let v = tape.mul_const(acc, 1.0 / n_f);
                out.push((Term::MaxRadiusHinge, tape.mul_const(v, per_site)));
            }
            if self.weights.min_distance_hinge > 0.0 {
                let v = self.min_distance_hinge(tape, jets, &mut scratch);
                out.push((Term::MinDistanceHinge, tape.mul_const(v, per_site)));
            }
        }

        if site.is_initial {
            let w = &self.weights;
            if w.v_initial > 0.0 {
                let mut acc = tape.zero();
                for (a, init) in jets.iter().zip(&self.initial_state.agents) {
                    let dx = tape.add_const(a.x.d1, -init.velocity.x);
                    let dy = tape.add_const(a.y.d1, -init.velocity.y);
                    let dx2 = tape.square(dx);
                    let dy2 = tape.square(dy);
                    let s = tape.add(dx2, dy2);
                    acc = tape.add(acc, s);
                }
                out.push((Term::VInitial, tape.mul_const(acc, 1.0 / n_f)));
            }
            if w.r_initial > 0.0 {
                let mut acc = tape.zero();
                for (a, init) in jets.iter().zip(&self.initial_state.agents) {
                    let dx = tape.add_const(a.x.v, -init.position.x);
                    let dy = tape.add_const(a.y.v, -init.position.y);
                    let dx2 = tape.square(dx);
                    let dy2 = tape.square(dy);
                    let s = tape.add(dx2, dy2);
                    acc = tape.add(acc, s);
                }
                out.push((Term::RInitial, tape.mul_const(acc, 1.0 / n_f)));
            }
        }

        if site.is_final && self.weights.order_final > 0.0 {
            let q = self.order_quantity(tape, jets, n_f, v0);
            let d = tape.add_const(q, -1.0);
            let d2 = tape.square(d);
            out.push((Term::OrderFinal, d2));
        }

        out
    }

    /// `|sum_i v_i| / (N v_0)`: the speed-weighted order quantity.
    fn order_quantity(&self, tape: &mut Tape, jets: &[AgentJet], n_f: f64, v0: f64) -> Var {
        let mut sx = tape.zero();
        let mut sy = tape.zero();
        for a in jets {
            sx = tape.add(sx, a.x.d1);
            sy = tape.add(sy, a.y.d1);
        }
        let norm = tape.norm2(sx, sy);
        tape.mul_const(norm, 1.0 / (n_f * v0))
    }

    fn min_distance_hinge(
        &self,
        tape: &mut Tape,
        jets: &[AgentJet],
        scratch: &mut SiteScratch,
    ) -> Var {
        let pairs = scratch.pairs(tape, jets).to_vec();
        let n_pairs = pairs.len().max(1) as f64;
        let mut acc = tape.zero();
        for p in pairs {
            let short = tape.add_const(p.r, -self.d_min_target);
            let neg = tape.neg(short);
            let h = tape.relu(neg);
            let h2 = tape.square(h);
            acc = tape.add(acc, h2);
        }
        tape.mul_const(acc, 1.0 / n_pairs)
    }

    /// Sum over agents of the squared Eq-of-motion residual
    /// `dv/dt - propulsion - sum_j F_ij` (unnormalized).
    fn ode_residual_terms(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        jets: &[AgentJet],
        scratch: &mut SiteScratch,
    ) -> Var {
        let n = jets.len();
        let v0 = self.config.propulsion_speed;
        let zero = tape.zero();
        let mut force_x = vec![zero; n];
        let mut force_y = vec![zero; n];

        let f_vars: Vec<Var> = vars[self.layout.f_range()].to_vec();
        let g_vars: Vec<Var> = vars[self.layout.g_range()].to_vec();

        let pairs = scratch.pairs(tape, jets).to_vec();
        for p in &pairs {
            let rc = tape.max_const(p.r, R_FLOOR);
            let lnr = tape.ln(rc);

            // distancing: exactly antisymmetric across the pair
            if !f_vars.is_empty() {
                let coef = poly_on_tape(tape, &f_vars, lnr);
                let frac = tape.div(coef, rc);
                let fx = tape.mul(frac, p.dx);
                let fy = tape.mul(frac, p.dy);
                force_x[p.i] = tape.add(force_x[p.i], fx);
                force_y[p.i] = tape.add(force_y[p.i], fy);
                force_x[p.j] = tape.sub(force_x[p.j], fx);
                force_y[p.j] = tape.sub(force_y[p.j], fy);
            }

            // aligning: zero beyond the cutoff and below the speed floor
            if !g_vars.is_empty() {
                let within = match self.cutoff {
                    Some(rc_val) => tape.value(p.r) <= rc_val,
                    None => true,
                };
                if within {
                    let dvx = tape.sub(jets[p.j].x.d1, jets[p.i].x.d1);
                    let dvy = tape.sub(jets[p.j].y.d1, jets[p.i].y.d1);
                    let dv = tape.norm2(dvx, dvy);
                    if tape.value(dv) >= V_FLOOR {
                        let coef = poly_on_tape(tape, &g_vars, lnr);
                        let frac = tape.div(coef, dv);
                        let gx = tape.mul(frac, dvx);
                        let gy = tape.mul(frac, dvy);
                        force_x[p.i] = tape.add(force_x[p.i], gx);
                        force_y[p.i] = tape.add(force_y[p.i], gy);
                        force_x[p.j] = tape.sub(force_x[p.j], gx);
                        force_y[p.j] = tape.sub(force_y[p.j], gy);
                    }
                }
            }
        }

        let speeds = scratch.speeds(tape, jets).to_vec();
        let mut acc = tape.zero();
        for i in 0..n {
            let (px, py) = if tape.value(speeds[i]) >= V_FLOOR {
                let v0_var = tape.constant(v0);
                let ratio = tape.div(v0_var, speeds[i]);
                let factor = tape.add_const(ratio, -1.0);
                (
                    tape.mul(factor, jets[i].x.d1),
                    tape.mul(factor, jets[i].y.d1),
                )
            } else {
                (zero, zero)
            };
            let rx1 = tape.sub(jets[i].x.d2, px);
            let rx = tape.sub(rx1, force_x[i]);
            let ry1 = tape.sub(jets[i].y.d2, py);
            let ry = tape.sub(ry1, force_y[i]);
            let rx2 = tape.square(rx);
            let ry2 = tape.square(ry);
            let s = tape.add(rx2, ry2);
            acc = tape.add(acc, s);
        }
        acc
    }
}

/// `sum_k a_k exp(n_k ln r)` over interleaved (coefficient, exponent) vars.
fn poly_on_tape(tape: &mut Tape, poly_vars: &[Var], lnr: Var) -> Var {
    let mut acc = tape.zero();
    for pair in poly_vars.chunks_exact(2) {
        let e = tape.mul(pair[1], lnr);
        let p = tape.exp(e);
        let term = tape.mul(pair[0], p);
        acc = tape.add(acc, term);
    }
    acc
}

#[derive(Clone, Copy, Debug)]
struct PairGeom {
    i: usize,
    j: usize,
    dx: Var,
    dy: Var,
    r: Var,
}

/// Lazily shared per-site intermediates.
#[derive(Default)]
struct SiteScratch {
    radii: Option<Vec<Var>>,
    speeds: Option<Vec<Var>>,
    pairs: Option<Vec<PairGeom>>,
    com: Option<(Var, Var)>,
    mean_radius: Option<Var>,
}

impl SiteScratch {
    fn radii(&mut self, tape: &mut Tape, jets: &[AgentJet]) -> &[Var] {
        if self.radii.is_none() {
            self.radii = Some(
                jets.iter()
                    .map(|a| tape.norm2(a.x.v, a.y.v))
                    .collect::<Vec<_>>(),
            );
        }
        self.radii.as_ref().expect("just filled")
    }

    fn speeds(&mut self, tape: &mut Tape, jets: &[AgentJet]) -> &[Var] {
        if self.speeds.is_none() {
            self.speeds = Some(
                jets.iter()
                    .map(|a| tape.norm2(a.x.d1, a.y.d1))
                    .collect::<Vec<_>>(),
            );
        }
        self.speeds.as_ref().expect("just filled")
    }

    fn pairs(&mut self, tape: &mut Tape, jets: &[AgentJet]) -> &[PairGeom] {
        if self.pairs.is_none() {
            let n = jets.len();
            let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    let dx = tape.sub(jets[i].x.v, jets[j].x.v);
                    let dy = tape.sub(jets[i].y.v, jets[j].y.v);
                    let r = tape.norm2(dx, dy);
                    pairs.push(PairGeom { i, j, dx, dy, r });
                }
            }
            self.pairs = Some(pairs);
        }
        self.pairs.as_ref().expect("just filled")
    }

    fn center_of_mass(&mut self, tape: &mut Tape, jets: &[AgentJet], n_f: f64) -> (Var, Var) {
        if self.com.is_none() {
            let mut sx = tape.zero();
            let mut sy = tape.zero();
            for a in jets {
                sx = tape.add(sx, a.x.v);
                sy = tape.add(sy, a.y.v);
            }
            self.com = Some((
                tape.mul_const(sx, 1.0 / n_f),
                tape.mul_const(sy, 1.0 / n_f),
            ));
        }
        self.com.expect("just filled")
    }

    fn mean_radius(&mut self, tape: &mut Tape, jets: &[AgentJet], n_f: f64) -> Var {
        if self.mean_radius.is_none() {
            let radii = self.radii(tape, jets).to_vec();
            let mut acc = tape.zero();
            for r in radii {
                acc = tape.add(acc, r);
            }
            self.mean_radius = Some(tape.mul_const(acc, 1.0 / n_f));
        }
        self.mean_radius.expect("just filled")
    }
}

struct SiteEval {
    loss: f64,
    grad: Vec<f64>,
    terms: [f64; N_TERMS],
}

struct TrainObjective<'a> {
    problem: &'a TrainingProblem,
}

impl Objective for TrainObjective<'_> {
    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        match self.problem.eval(params) {
            Ok((loss, grad, _)) => Ok((loss, grad)),
            Err(e) => Err(EvalError(e.to_string())),
        }
    }
}

/// Result bundle of one training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainingReport {
    pub pattern: String,
    pub targets: BTreeMap<String, f64>,
    pub n_agents: usize,
    pub horizon: f64,
    pub seed: u64,
    pub adam_epochs_run: usize,
    pub lbfgs_iterations: usize,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub final_ode_loss: f64,
    pub final_terms: BTreeMap<String, f64>,
    pub termination: String,
    pub converged: bool,
    /// Populated only when `SWARM_REPORT_TIMING=1`; kept out of the default
    /// output so reruns are byte-identical.
    pub wall_time_seconds: Option<f64>,
}

impl TrainingReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

/// Train an interaction model for the commanded pattern: warm up with Adam
/// at the configured rate, then hand over to L-BFGS until tolerance.
pub fn train(
    spec: &PatternSpec,
    config: &TrainingConfig,
) -> Result<(InteractionModel, NetworkParameters, TrainingReport), TrainError> {
    let t_start = std::time::Instant::now();
    let problem = TrainingProblem::new(spec, config)?;
    let mut params = problem.initial_parameters();

    let mut loss_curve: Vec<f64> = Vec::with_capacity(config.adam_epochs + 64);
    let mut adam = AdamState::new(params.values.len(), config.adam_lr);
    let mut diverged = false;
    let mut adam_epochs_run = 0;

    let mut checkpoint = params.values.clone();
    for _epoch in 0..config.adam_epochs {
        match problem.eval(&params.values) {
            Ok((loss, grad, _)) => {
                loss_curve.push(loss);
                checkpoint.copy_from_slice(&params.values);
                adam.step(&mut params.values, &grad);
                adam_epochs_run += 1;
            }
            Err(_) => {
                // keep the last finite checkpoint and stop the warm-up
                params.values.copy_from_slice(&checkpoint);
                diverged = true;
                break;
            }
        }
    }

    let objective = TrainObjective { problem: &problem };
    let lbfgs = lbfgs_optimize(
        &params.values,
        &objective,
        &LbfgsOptions {
            max_iterations: config.lbfgs_max_iterations,
            history: config.lbfgs_history,
            ..LbfgsOptions::with_tolerance(config.lbfgs_tolerance)
        },
    )?;
    params.values = lbfgs.params;
    loss_curve.extend_from_slice(&lbfgs.loss_trace);

    let (final_loss, _, terms) = problem.eval(&params.values)?;
    let final_terms: BTreeMap<String, f64> = ALL_TERMS
        .iter()
        .map(|t| (t.key().to_string(), terms[t.index()]))
        .collect();

    let model = params
        .extract_model(spec.interaction_range)?
        .with_meta(spec.to_meta());

    let termination = if diverged {
        "diverged".to_string()
    } else {
        match lbfgs.termination {
            LbfgsTermination::LossBelowTolerance => "loss_below_tolerance",
            LbfgsTermination::SmallLossChange => "small_loss_change",
            LbfgsTermination::SmallGradient => "small_gradient",
            LbfgsTermination::MaxIterations => "max_iterations",
            LbfgsTermination::LineSearchFailure => "line_search_failure",
        }
        .to_string()
    };

    let wall_time_seconds = if std::env::var("SWARM_REPORT_TIMING").as_deref() == Ok("1") {
        Some(t_start.elapsed().as_secs_f64())
    } else {
        None
    };

    let meta = spec.to_meta();
    let report = TrainingReport {
        pattern: meta.kind,
        targets: meta.targets,
        n_agents: config.n_agents,
        horizon: problem.horizon,
        seed: config.rng_seed,
        adam_epochs_run,
        lbfgs_iterations: lbfgs.iterations,
        loss_curve,
        final_loss,
        final_ode_loss: terms[Term::OdeResidual.index()],
        final_terms,
        termination,
        converged: lbfgs.converged && !diverged,
        wall_time_seconds,
    };

    Ok((model, params, report))
}

/// Verification knobs; defaults mirror the training setup.
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub n_agents: usize,
    pub duration: Option<f64>,
    pub record_every: f64,
    pub max_step: f64,
    pub propulsion_speed: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            n_agents: 40,
            duration: None,
            record_every: 0.25,
            max_step: 0.01,
            propulsion_speed: 2.0,
        }
    }
}

/// Simulate the trained model from random initial conditions with the
/// pattern-appropriate domain, initialization, and noise, and classify the
/// outcome of every trial.
pub fn verify_by_simulation(
    model: &InteractionModel,
    spec: &PatternSpec,
    n_trials: usize,
    seed: u64,
) -> Result<TrialReport, crate::dynamics::SimError> {
    verify_with(model, spec, n_trials, seed, &VerifyOptions::default())
}

pub fn verify_with(
    model: &InteractionModel,
    spec: &PatternSpec,
    n_trials: usize,
    seed: u64,
    options: &VerifyOptions,
) -> Result<TrialReport, crate::dynamics::SimError> {
    let n = options.n_agents;
    let assignment = GroupAssignment::homogeneous(n, model.clone());
    let mut integrator = IntegratorConfig::new(options.max_step, options.propulsion_speed, seed)?;
    integrator.propulsion_enabled = true;
    let setup = TrialSetup {
        n_agents: n,
        duration: options.duration.unwrap_or_else(|| spec.default_horizon()),
        record_every: options.record_every,
        domain: spec.sim_domain(n),
        init: spec.init_class(n),
        noise: spec.sim_noise(),
        integrator,
    };
    trial_harness(spec, &assignment, &setup, n_trials, seed)
}

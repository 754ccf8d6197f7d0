//! Order parameters and geometric descriptors of swarm states, pattern
//! classification over a trajectory tail, and repeated-trial statistics.
//!
//! Conventions: the polarization `O = (1/N)|sum_i v_i/|v_i||`; the
//! normalized angular momentum `O_r = (1/N) sum_i cross(r_i, v_i)/(|r_i||v_i|)`
//! with `r_i` measured from the instantaneous center of mass (the only
//! translation-invariant choice); `O_r_abs` is the same sum over absolute
//! values. Counterclockwise circulation is positive.

use crate::dynamics::{
    init_random, minimum_image, rk4_integrate, DomainSpec, InitClass, IntegratorConfig, NoiseSpec,
    SimError, SwarmState, Trajectory,
};
use crate::forcemodel::GroupAssignment;
use crate::trainer::{PatternKind, PatternSpec};
use crate::vec2::Vec2;
use crate::{stream_seed, R_FLOOR, V_FLOOR};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("agent {agent} has speed below the floor; polarization undefined")]
    ZeroSpeed { agent: usize },
    #[error("trajectory spans {span} but the classification window needs {needed}")]
    InsufficientData { span: f64, needed: f64 },
    #[error("metric series is empty")]
    EmptySeries,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Polarization: magnitude of the mean heading unit vector, in [0, 1].
pub fn polarization(state: &SwarmState) -> Result<f64, MetricError> {
    let mut sum = Vec2::ZERO;
    for (agent, a) in state.agents.iter().enumerate() {
        let speed = a.velocity.norm();
        if speed < V_FLOOR {
            return Err(MetricError::ZeroSpeed { agent });
        }
        sum += a.velocity / speed;
    }
    Ok(sum.norm() / state.agents.len() as f64)
}

/// Signed and absolute normalized angular momentum about `center`.
#[derive(Clone, Copy, Debug, Default)]
pub struct AngularMomentum {
    pub signed: f64,
    pub absolute: f64,
    /// Agents skipped because they sat at the center or below the speed
    /// floor; they contribute zero to the (still 1/N-normalized) sums.
    pub excluded: usize,
}

pub fn angular_momentum(state: &SwarmState, center: Vec2) -> AngularMomentum {
    let n = state.agents.len() as f64;
    let mut signed = 0.0;
    let mut absolute = 0.0;
    let mut excluded = 0;
    for a in &state.agents {
        let r = a.position - center;
        let rn = r.norm();
        let vn = a.velocity.norm();
        if rn < R_FLOOR || vn < V_FLOOR {
            excluded += 1;
            continue;
        }
        let c = r.cross(a.velocity) / (rn * vn);
        signed += c;
        absolute += c.abs();
    }
    AngularMomentum {
        signed: signed / n,
        absolute: absolute / n,
        excluded,
    }
}

/// Geometric descriptors of one state, radii measured from the center of
/// mass, pair distances minimum-image in periodic domains.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub center_of_mass: Vec2,
    pub mean_radius: f64,
    pub radius_std: f64,
    pub max_extent: f64,
    pub min_pair_distance: f64,
}

pub fn geometry(state: &SwarmState, domain: &DomainSpec) -> Geometry {
    let n = state.agents.len() as f64;
    let com = state
        .agents
        .iter()
        .fold(Vec2::ZERO, |acc, a| acc + a.position)
        / n;
    let radii: Vec<f64> = state
        .agents
        .iter()
        .map(|a| (a.position - com).norm())
        .collect();
    let mean_radius = radii.iter().sum::<f64>() / n;
    let radius_std = (radii
        .iter()
        .map(|r| (r - mean_radius) * (r - mean_radius))
        .sum::<f64>()
        / n)
        .sqrt();
    let max_extent = radii.iter().cloned().fold(0.0, f64::max);
    let mut min_pair = f64::INFINITY;
    for i in 0..state.agents.len() {
        for j in (i + 1)..state.agents.len() {
            let d = minimum_image(
                state.agents[i].position - state.agents[j].position,
                domain,
            )
            .norm();
            min_pair = min_pair.min(d);
        }
    }
    Geometry {
        center_of_mass: com,
        mean_radius,
        radius_std,
        max_extent,
        min_pair_distance: min_pair,
    }
}

/// Metric time series derived from a trajectory.
#[derive(Clone, Debug, Default)]
pub struct MetricSeries {
    pub times: Vec<f64>,
    pub polarization: Vec<f64>,
    pub angular_momentum: Vec<f64>,
    pub absolute_angular_momentum: Vec<f64>,
    pub mean_radius: Vec<f64>,
    pub radius_std: Vec<f64>,
    pub max_extent: Vec<f64>,
    pub min_pair_distance: Vec<f64>,
}

impl MetricSeries {
    pub fn from_trajectory(traj: &Trajectory, domain: &DomainSpec) -> Result<Self, MetricError> {
        let mut series = MetricSeries::default();
        for state in &traj.states {
            let geo = geometry(state, domain);
            let am = angular_momentum(state, geo.center_of_mass);
            series.times.push(state.time);
            series.polarization.push(polarization(state)?);
            series.angular_momentum.push(am.signed);
            series.absolute_angular_momentum.push(am.absolute);
            series.mean_radius.push(geo.mean_radius);
            series.radius_std.push(geo.radius_std);
            series.max_extent.push(geo.max_extent);
            series.min_pair_distance.push(geo.min_pair_distance);
        }
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Mean of one series over `t >= t0`.
    fn tail_mean(&self, values: &[f64], t0: f64) -> f64 {
        let pairs: Vec<f64> = self
            .times
            .iter()
            .zip(values)
            .filter(|(t, _)| **t >= t0)
            .map(|(_, v)| *v)
            .collect();
        pairs.iter().sum::<f64>() / pairs.len().max(1) as f64
    }

    /// Write the `t,O,Or,Orabs,mean_radius,radius_std,max_extent,min_dist`
    /// CSV document with optional leading `#` comments.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<(), MetricError> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "t,O,Or,Orabs,mean_radius,radius_std,max_extent,min_dist")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.times[i],
                self.polarization[i],
                self.angular_momentum[i],
                self.absolute_angular_momentum[i],
                self.mean_radius[i],
                self.radius_std[i],
                self.max_extent[i],
                self.min_pair_distance[i]
            )?;
        }
        Ok(())
    }
}

/// First time the polarization crosses `threshold`, linearly interpolating
/// between samples; `None` if it never does.
pub fn time_to_order(series: &MetricSeries, threshold: f64) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    if series.polarization[0] >= threshold {
        return Some(series.times[0]);
    }
    for i in 1..series.len() {
        let (o0, o1) = (series.polarization[i - 1], series.polarization[i]);
        if o1 >= threshold {
            let (t0, t1) = (series.times[i - 1], series.times[i]);
            if o1 == o0 {
                return Some(t1);
            }
            return Some(t0 + (t1 - t0) * (threshold - o0) / (o1 - o0));
        }
    }
    None
}

/// Default tail window for steady-state classification: the final 20% of
/// the trajectory, but at least 5 time units.
pub fn default_window(traj: &Trajectory) -> f64 {
    (0.2 * traj.span()).max(5.0)
}

/// Relative tolerance on radii and sizes used by the classifier.
pub const TOL_R: f64 = 0.15;
/// Relative tolerance on the clump radius spread.
pub const TOL_EPS: f64 = 0.25;
/// Order-parameter threshold shared by all pattern classifiers.
pub const ORDER_THRESHOLD: f64 = 0.9;
/// A double mill must keep the signed momentum at most this large.
pub const DOUBLE_MILL_MAX_SIGNED: f64 = 0.3;

/// Classification verdict with the tail-averaged quantities it was based on.
#[derive(Clone, Debug, Serialize)]
pub struct Classification {
    pub success: bool,
    pub diagnostics: BTreeMap<String, f64>,
    pub reasons: Vec<String>,
}

/// Judge whether the trajectory tail realizes the commanded pattern.
///
/// All criteria are time-averages over the final `window` of the
/// trajectory. Fails with a diagnostic list rather than a bare flag.
pub fn classify_pattern(
    traj: &Trajectory,
    domain: &DomainSpec,
    spec: &PatternSpec,
    window: f64,
) -> Result<Classification, MetricError> {
    if traj.span() < window {
        return Err(MetricError::InsufficientData {
            span: traj.span(),
            needed: window,
        });
    }
    let series = MetricSeries::from_trajectory(traj, domain)?;
    classify_series(&series, spec, traj.end_time() - window)
}

/// Classification from a precomputed series; `t0` is the window start.
pub fn classify_series(
    series: &MetricSeries,
    spec: &PatternSpec,
    t0: f64,
) -> Result<Classification, MetricError> {
    if series.is_empty() {
        return Err(MetricError::EmptySeries);
    }
    let o = series.tail_mean(&series.polarization, t0);
    let or = series.tail_mean(&series.angular_momentum, t0);
    let or_abs = series.tail_mean(&series.absolute_angular_momentum, t0);
    let mean_radius = series.tail_mean(&series.mean_radius, t0);
    let radius_std = series.tail_mean(&series.radius_std, t0);
    let max_extent = series.tail_mean(&series.max_extent, t0);

    let mut diagnostics: BTreeMap<String, f64> = BTreeMap::new();
    diagnostics.insert("O".into(), o);
    diagnostics.insert("Or".into(), or);
    diagnostics.insert("Orabs".into(), or_abs);
    diagnostics.insert("mean_radius".into(), mean_radius);
    diagnostics.insert("radius_std".into(), radius_std);
    diagnostics.insert("max_extent".into(), max_extent);

    let mut reasons = Vec::new();
    let mut check = |ok: bool, reason: String| {
        if !ok {
            reasons.push(reason);
        }
    };

    match spec.kind {
        PatternKind::Ring => {
            let r = spec.radius.expect("ring spec has a radius");
            check(
                or_abs >= ORDER_THRESHOLD,
                format!("Orabs {or_abs:.3} < {ORDER_THRESHOLD}"),
            );
            check(
                radius_std / mean_radius.max(R_FLOOR) <= 0.1,
                format!("radius spread {:.3} > 0.1", radius_std / mean_radius.max(R_FLOOR)),
            );
            check(
                (mean_radius - r).abs() / r <= TOL_R,
                format!("mean radius {mean_radius:.3} not within {TOL_R} of {r}"),
            );
        }
        PatternKind::Clumps => {
            let r = spec.radius.expect("clumps spec has a radius");
            let eps = spec.epsilon.expect("clumps spec has a cluster size");
            check(
                (mean_radius - r).abs() / r <= TOL_R,
                format!("mean radius {mean_radius:.3} not within {TOL_R} of {r}"),
            );
            check(
                (radius_std - eps).abs() / eps <= TOL_EPS,
                format!("radius std {radius_std:.3} not within {TOL_EPS} of {eps}"),
            );
        }
        PatternKind::MillDouble => {
            check(
                or_abs >= ORDER_THRESHOLD,
                format!("Orabs {or_abs:.3} < {ORDER_THRESHOLD}"),
            );
            check(
                or.abs() <= DOUBLE_MILL_MAX_SIGNED,
                format!("|Or| {:.3} > {DOUBLE_MILL_MAX_SIGNED}", or.abs()),
            );
        }
        PatternKind::MillSingle => match spec.rotation_sign {
            Some(sign) => check(
                or * f64::from(sign) >= ORDER_THRESHOLD,
                format!("signed Or {or:.3} below {ORDER_THRESHOLD} for commanded direction"),
            ),
            None => check(
                or.abs() >= ORDER_THRESHOLD,
                format!("|Or| {:.3} < {ORDER_THRESHOLD}", or.abs()),
            ),
        },
        PatternKind::Ordered => {
            check(o >= ORDER_THRESHOLD, format!("O {o:.3} < {ORDER_THRESHOLD}"));
        }
        PatternKind::Flock => {
            let size = spec.flock_size.expect("flock spec has a size");
            check(o >= ORDER_THRESHOLD, format!("O {o:.3} < {ORDER_THRESHOLD}"));
            check(
                max_extent <= size * (1.0 + TOL_R),
                format!("max extent {max_extent:.3} > {:.3}", size * (1.0 + TOL_R)),
            );
        }
    }

    Ok(Classification {
        success: reasons.is_empty(),
        diagnostics,
        reasons,
    })
}

/// How one batch of verification trials is run.
#[derive(Clone, Debug)]
pub struct TrialSetup {
    pub n_agents: usize,
    pub duration: f64,
    pub record_every: f64,
    pub domain: DomainSpec,
    pub init: InitClass,
    pub noise: NoiseSpec,
    pub integrator: IntegratorConfig,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary {
        mean,
        std: var.sqrt(),
    }
}

/// Aggregate of repeated verification trials.
#[derive(Clone, Debug, Serialize)]
pub struct TrialReport {
    pub n_trials: usize,
    pub successes: usize,
    pub probability: f64,
    pub diverged: usize,
    pub per_metric: BTreeMap<String, Summary>,
    /// Tail-window diagnostics of every trial, in trial order.
    pub trials: Vec<TrialOutcome>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub success: bool,
    pub diverged: bool,
    pub diagnostics: BTreeMap<String, f64>,
    pub time_to_order: Option<f64>,
    pub reasons: Vec<String>,
}

impl TrialReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

/// Run `n_trials` independent init + integrate + classify rounds with RNG
/// streams derived from `seed`. Trials run in parallel and merge in trial
/// order, so the report does not depend on the thread count. A diverging
/// trial counts as a failure, not an error.
pub fn trial_harness(
    spec: &PatternSpec,
    assignment: &GroupAssignment,
    setup: &TrialSetup,
    n_trials: usize,
    seed: u64,
) -> Result<TrialReport, SimError> {
    let outcomes: Vec<TrialOutcome> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = stream_seed(seed, trial as u64);
            run_one_trial(spec, assignment, setup, trial_seed)
        })
        .collect();

    let successes = outcomes.iter().filter(|o| o.success).count();
    let diverged = outcomes.iter().filter(|o| o.diverged).count();

    let mut per_metric: BTreeMap<String, Summary> = BTreeMap::new();
    let keys: Vec<String> = outcomes
        .iter()
        .find(|o| !o.diagnostics.is_empty())
        .map(|o| o.diagnostics.keys().cloned().collect())
        .unwrap_or_default();
    for key in keys {
        let values: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.diagnostics.get(&key).copied())
            .collect();
        per_metric.insert(key, summarize(&values));
    }
    let tto: Vec<f64> = outcomes.iter().filter_map(|o| o.time_to_order).collect();
    if !tto.is_empty() {
        per_metric.insert("time_to_order".into(), summarize(&tto));
    }

    Ok(TrialReport {
        n_trials,
        successes,
        probability: successes as f64 / n_trials.max(1) as f64,
        diverged,
        per_metric,
        trials: outcomes,
    })
}

fn run_one_trial(
    spec: &PatternSpec,
    assignment: &GroupAssignment,
    setup: &TrialSetup,
    trial_seed: u64,
) -> TrialOutcome {
    let initial = init_random(
        setup.init,
        setup.n_agents,
        setup.integrator.propulsion_speed,
        trial_seed,
    );
    let mut integrator = setup.integrator;
    integrator.rng_seed = stream_seed(trial_seed, 1);
    let traj = match rk4_integrate(
        &initial,
        assignment,
        &setup.domain,
        &setup.noise,
        &integrator,
        setup.duration,
        setup.record_every,
    ) {
        Ok(t) => t,
        Err(_) => {
            return TrialOutcome {
                seed: trial_seed,
                success: false,
                diverged: true,
                diagnostics: BTreeMap::new(),
                time_to_order: None,
                reasons: vec!["divergence".into()],
            }
        }
    };
    let window = default_window(&traj);
    match classify_pattern(&traj, &setup.domain, spec, window) {
        Ok(c) => {
            let tto = MetricSeries::from_trajectory(&traj, &setup.domain)
                .ok()
                .and_then(|s| time_to_order(&s, ORDER_THRESHOLD));
            TrialOutcome {
                seed: trial_seed,
                success: c.success,
                diverged: false,
                diagnostics: c.diagnostics,
                time_to_order: tto,
                reasons: c.reasons,
            }
        }
        Err(e) => TrialOutcome {
            seed: trial_seed,
            success: false,
            diverged: false,
            diagnostics: BTreeMap::new(),
            time_to_order: None,
            reasons: vec![format!("metrics failed: {e}")],
        },
    }
}

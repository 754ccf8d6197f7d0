//! Self-propelled particle dynamics: each agent relaxes its speed toward a
//! reference `v_0` through linear propulsion, feels the summed pairwise
//! interaction forces, and optionally a white Gaussian kick,
//!
//! `dv_i/dt = v_i (v_0/|v_i| - 1) + sum_j F_ij + eta_i`,   `dr_i/dt = v_i`.
//!
//! Integration is classic fixed-step RK4 with one noise draw per agent per
//! step held constant across the four stages, reproducing the procedure the
//! model was calibrated with rather than a formally convergent SDE scheme.

use crate::forcemodel::{scheduled_force, total_force, GroupAssignment, ModelError, TransitionSchedule};
use crate::vec2::Vec2;
use crate::V_FLOOR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("state diverged at t = {time} (agent {agent} non-finite)")]
    Divergence {
        time: f64,
        agent: usize,
        partial: Box<Trajectory>,
    },
    #[error("force evaluation failed at t = {time}: {source}")]
    Force {
        time: f64,
        #[source]
        source: ModelError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trajectory parse error at line {line}: {message}")]
    TrajectoryParse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
}

/// Positions and velocities of all agents at one instant. Agent order is
/// stable: the index is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SwarmState {
    pub agents: Vec<AgentState>,
    pub time: f64,
}

impl SwarmState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn is_finite(&self) -> bool {
        self.agents
            .iter()
            .all(|a| a.position.is_finite() && a.velocity.is_finite())
    }

    /// Index of the first agent with a non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.agents
            .iter()
            .position(|a| !(a.position.is_finite() && a.velocity.is_finite()))
    }

    /// A state containing only the listed agents, preserving order.
    pub fn subset(&self, indices: &[usize]) -> SwarmState {
        SwarmState {
            agents: indices.iter().map(|&i| self.agents[i]).collect(),
            time: self.time,
        }
    }

    pub fn total_momentum(&self) -> Vec2 {
        self.agents
            .iter()
            .fold(Vec2::ZERO, |acc, a| acc + a.velocity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainSpec {
    Unbounded,
    Periodic { side_length: f64 },
}

impl DomainSpec {
    pub fn periodic(side_length: f64) -> Self {
        DomainSpec::Periodic { side_length }
    }
}

/// Gaussian velocity noise, per component, drawn once per agent per step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub standard_deviation: f64,
    pub enabled: bool,
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            standard_deviation: 0.0,
            enabled: false,
        }
    }

    pub fn with_sigma(sigma: f64) -> Self {
        NoiseSpec {
            standard_deviation: sigma,
            enabled: sigma > 0.0,
        }
    }
}

/// Piecewise-constant noise level over time, for scenario runs where the
/// noise turns on and off between segments.
#[derive(Clone, Debug, Default)]
pub struct NoisePlan {
    /// (start_time, sigma); each piece holds until the next start.
    pieces: Vec<(f64, f64)>,
}

impl NoisePlan {
    pub fn constant(noise: &NoiseSpec) -> Self {
        let sigma = if noise.enabled {
            noise.standard_deviation
        } else {
            0.0
        };
        NoisePlan {
            pieces: vec![(f64::NEG_INFINITY, sigma)],
        }
    }

    pub fn from_pieces(mut pieces: Vec<(f64, f64)>) -> Result<Self, SimError> {
        pieces.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite piece times"));
        Ok(NoisePlan { pieces })
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        let mut sigma = 0.0;
        for &(start, s) in &self.pieces {
            if t >= start {
                sigma = s;
            } else {
                break;
            }
        }
        sigma
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntegratorConfig {
    /// Fixed RK4 step size; the solver never exceeds it.
    pub max_step: f64,
    /// Reference self-propelled speed `v_0`.
    pub propulsion_speed: f64,
    pub rng_seed: u64,
    /// Test hook: disable the propulsion term entirely (used by the
    /// momentum-conservation checks).
    pub propulsion_enabled: bool,
}

impl IntegratorConfig {
    pub fn new(max_step: f64, propulsion_speed: f64, rng_seed: u64) -> Result<Self, SimError> {
        if !(max_step > 0.0 && max_step <= 0.01) {
            return Err(SimError::Config(format!(
                "max_step must be in (0, 0.01], got {max_step}"
            )));
        }
        if !(propulsion_speed > 0.0) {
            return Err(SimError::Config(format!(
                "propulsion_speed must be positive, got {propulsion_speed}"
            )));
        }
        Ok(IntegratorConfig {
            max_step,
            propulsion_speed,
            rng_seed,
            propulsion_enabled: true,
        })
    }

    pub fn defaults(rng_seed: u64) -> Self {
        IntegratorConfig {
            max_step: 0.01,
            propulsion_speed: 2.0,
            rng_seed,
            propulsion_enabled: true,
        }
    }
}

/// Linear propulsion `v (v_0/|v| - 1)`; zero below the speed floor where
/// the heading is undefined.
pub fn propulsion(vel: Vec2, v0: f64) -> Vec2 {
    let speed = vel.norm();
    if speed < V_FLOOR {
        return Vec2::ZERO;
    }
    vel * (v0 / speed - 1.0)
}

/// Wrap a displacement componentwise into `(-L/2, L/2]`.
pub fn minimum_image(displacement: Vec2, domain: &DomainSpec) -> Vec2 {
    match *domain {
        DomainSpec::Unbounded => displacement,
        DomainSpec::Periodic { side_length: l } => {
            let wrap = |x: f64| {
                let mut d = x % l;
                if d > 0.5 * l {
                    d -= l;
                } else if d <= -0.5 * l {
                    d += l;
                }
                d
            };
            Vec2::new(wrap(displacement.x), wrap(displacement.y))
        }
    }
}

/// Wrap a position componentwise into the domain box `[-L/2, L/2)`.
pub fn wrap_position(p: Vec2, domain: &DomainSpec) -> Vec2 {
    match *domain {
        DomainSpec::Unbounded => p,
        DomainSpec::Periodic { side_length: l } => {
            let wrap = |x: f64| x - l * ((x + 0.5 * l) / l).floor();
            Vec2::new(wrap(p.x), wrap(p.y))
        }
    }
}

/// Time derivative of the swarm state: position rate is the velocity,
/// velocity rate is propulsion + interaction forces + the supplied noise
/// draw (zeros when noise is disabled).
pub fn state_derivative(
    state: &SwarmState,
    assignment: &GroupAssignment,
    domain: &DomainSpec,
    noise_draw: &[Vec2],
    config: &IntegratorConfig,
) -> Result<Vec<(Vec2, Vec2)>, ModelError> {
    let forces = total_force(state, assignment, domain)?;
    Ok(derivative_from_forces(state, &forces, noise_draw, config))
}

fn derivative_from_forces(
    state: &SwarmState,
    forces: &[Vec2],
    noise_draw: &[Vec2],
    config: &IntegratorConfig,
) -> Vec<(Vec2, Vec2)> {
    state
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut accel = forces[i] + noise_draw[i];
            if config.propulsion_enabled {
                accel += propulsion(a.velocity, config.propulsion_speed);
            }
            (a.velocity, accel)
        })
        .collect()
}

enum ForceSource<'a> {
    Plain(&'a GroupAssignment),
    Scheduled(&'a TransitionSchedule),
}

impl ForceSource<'_> {
    fn eval(&self, state: &SwarmState, domain: &DomainSpec, t: f64) -> Result<Vec<Vec2>, ModelError> {
        match self {
            ForceSource::Plain(assignment) => total_force(state, assignment, domain),
            ForceSource::Scheduled(schedule) => scheduled_force(state, schedule, domain, t),
        }
    }

    fn membership(&self) -> Vec<usize> {
        match self {
            ForceSource::Plain(a) => a.membership().to_vec(),
            ForceSource::Scheduled(s) => s.segments()[0].assignment.membership().to_vec(),
        }
    }
}

/// A recorded run: states at the requested cadence plus the group index of
/// each agent (all zero for homogeneous runs).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<SwarmState>,
    pub membership: Vec<usize>,
}

impl Trajectory {
    pub fn start_time(&self) -> f64 {
        self.states.first().map_or(0.0, |s| s.time)
    }

    pub fn end_time(&self) -> f64 {
        self.states.last().map_or(0.0, |s| s.time)
    }

    pub fn span(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// States with `t0 <= t <= t1`.
    pub fn window(&self, t0: f64, t1: f64) -> Trajectory {
        Trajectory {
            states: self
                .states
                .iter()
                .filter(|s| s.time >= t0 && s.time <= t1)
                .cloned()
                .collect(),
            membership: self.membership.clone(),
        }
    }

    /// Write the `t,agent,group,x,y,vx,vy` CSV document. Any header
    /// comments are emitted as leading `#` lines.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<(), SimError> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "t,agent,group,x,y,vx,vy")?;
        for s in &self.states {
            for (i, a) in s.agents.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    s.time,
                    i,
                    self.membership.get(i).copied().unwrap_or(0),
                    a.position.x,
                    a.position.y,
                    a.velocity.x,
                    a.velocity.y
                )?;
            }
        }
        Ok(())
    }

    /// Parse a trajectory CSV produced by [`Trajectory::write_csv`],
    /// returning the trajectory and any leading `#` comment lines.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<(Trajectory, Vec<String>), SimError> {
        let mut comments = Vec::new();
        let mut states: Vec<SwarmState> = Vec::new();
        let mut membership: Vec<usize> = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let parse_err = |message: String| SimError::TrajectoryParse {
                line: lineno + 1,
                message,
            };
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(c) = trimmed.strip_prefix('#') {
                comments.push(c.trim().to_string());
                continue;
            }
            if !header_seen {
                if trimmed != "t,agent,group,x,y,vx,vy" {
                    return Err(parse_err(format!("unexpected header '{trimmed}'")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 7 {
                return Err(parse_err(format!("expected 7 fields, got {}", fields.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad number '{s}': {e}")))
            };
            let t = num(fields[0])?;
            let agent: usize = fields[1]
                .parse()
                .map_err(|e| parse_err(format!("bad agent index '{}': {e}", fields[1])))?;
            let group: usize = fields[2]
                .parse()
                .map_err(|e| parse_err(format!("bad group index '{}': {e}", fields[2])))?;
            let a = AgentState {
                position: Vec2::new(num(fields[3])?, num(fields[4])?),
                velocity: Vec2::new(num(fields[5])?, num(fields[6])?),
            };
            let need_new_state = states.last().map_or(true, |s| s.time != t);
            if need_new_state {
                states.push(SwarmState {
                    agents: Vec::new(),
                    time: t,
                });
            }
            let state = states.last_mut().expect("just ensured non-empty");
            if state.agents.len() != agent {
                return Err(parse_err(format!(
                    "agent index {agent} out of order (expected {})",
                    state.agents.len()
                )));
            }
            state.agents.push(a);
            if agent >= membership.len() {
                membership.push(group);
            } else if membership[agent] != group {
                return Err(parse_err(format!("agent {agent} changed group")));
            }
        }
        if states.is_empty() {
            return Err(SimError::TrajectoryParse {
                line: 0,
                message: "no data rows".into(),
            });
        }
        Ok((
            Trajectory {
                states,
                membership,
            },
            comments,
        ))
    }
}

/// Which random initial-condition family a pattern uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitClass {
    /// Ring / clumps / mill: positions and velocities uniform in [-1, 1].
    BoundedSwarm,
    /// Ordered state / flock: positions uniform over a box of the given
    /// side (chosen so the density comes out right), velocities uniform in
    /// [-v_0, v_0].
    Field { extent: f64 },
}

/// Draw a random initial swarm state. Same seed, same state.
pub fn init_random(class: InitClass, n: usize, v0: f64, rng_seed: u64) -> SwarmState {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let agents = (0..n)
        .map(|_| match class {
            InitClass::BoundedSwarm => AgentState {
                position: Vec2::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)),
                velocity: Vec2::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)),
            },
            InitClass::Field { extent } => {
                let half = 0.5 * extent;
                AgentState {
                    position: Vec2::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half)),
                    velocity: Vec2::new(rng.gen_range(-v0..=v0), rng.gen_range(-v0..=v0)),
                }
            }
        })
        .collect();
    SwarmState { agents, time: 0.0 }
}

/// Integrate with a fixed single-assignment force law.
pub fn rk4_integrate(
    initial: &SwarmState,
    assignment: &GroupAssignment,
    domain: &DomainSpec,
    noise: &NoiseSpec,
    config: &IntegratorConfig,
    t_end: f64,
    record_every: f64,
) -> Result<Trajectory, SimError> {
    integrate(
        initial,
        ForceSource::Plain(assignment),
        domain,
        &NoisePlan::constant(noise),
        config,
        t_end,
        record_every,
    )
}

/// Integrate under a transition schedule and a piecewise noise plan.
pub fn rk4_integrate_scheduled(
    initial: &SwarmState,
    schedule: &TransitionSchedule,
    domain: &DomainSpec,
    noise: &NoisePlan,
    config: &IntegratorConfig,
    t_end: f64,
    record_every: f64,
) -> Result<Trajectory, SimError> {
    integrate(
        initial,
        ForceSource::Scheduled(schedule),
        domain,
        noise,
        config,
        t_end,
        record_every,
    )
}

fn integrate(
    initial: &SwarmState,
    source: ForceSource<'_>,
    domain: &DomainSpec,
    noise: &NoisePlan,
    config: &IntegratorConfig,
    t_end: f64,
    record_every: f64,
) -> Result<Trajectory, SimError> {
    if !(t_end > initial.time) {
        return Err(SimError::Config(format!(
            "t_end {t_end} must exceed start time {}",
            initial.time
        )));
    }
    if record_every < config.max_step {
        return Err(SimError::Config(format!(
            "record_every {record_every} must be at least the step size {}",
            config.max_step
        )));
    }

    let n = initial.agents.len();
    if n < 2 {
        return Err(SimError::Config(format!("need at least 2 agents, got {n}")));
    }

    let dt = config.max_step;
    let n_steps = ((t_end - initial.time) / dt).ceil() as u64;
    let record_stride = (record_every / dt).round().max(1.0) as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut state = initial.clone();
    let mut trajectory = Trajectory {
        states: vec![state.clone()],
        membership: source.membership(),
    };
    let mut noise_draw = vec![Vec2::ZERO; n];

    for step in 0..n_steps {
        // Final step may be shorter so the trajectory ends exactly at t_end.
        let h = dt.min(t_end - state.time);
        if h <= 0.0 {
            break;
        }
        let sigma = noise.sigma_at(state.time);
        if sigma > 0.0 {
            for d in noise_draw.iter_mut() {
                *d = Vec2::new(sigma * normal.sample(&mut rng), sigma * normal.sample(&mut rng));
            }
        } else {
            noise_draw.iter_mut().for_each(|d| *d = Vec2::ZERO);
        }

        // A force evaluation overflowing mid-step is the practical face of
        // divergence for explosive models; report it as such with the
        // offending agent and the partial trajectory.
        state = match rk4_step(&state, &source, domain, &noise_draw, config, h) {
            Ok(s) => s,
            Err(ModelError::Pair { i, .. }) => {
                return Err(SimError::Divergence {
                    time: state.time,
                    agent: i,
                    partial: Box::new(trajectory),
                })
            }
            Err(e) => {
                return Err(SimError::Force {
                    time: state.time,
                    source: e,
                })
            }
        };
        for a in state.agents.iter_mut() {
            a.position = wrap_position(a.position, domain);
        }

        if let Some(agent) = state.first_non_finite() {
            return Err(SimError::Divergence {
                time: state.time,
                agent,
                partial: Box::new(trajectory),
            });
        }

        let is_last = step + 1 == n_steps || state.time >= t_end;
        if (step + 1) % record_stride == 0 || is_last {
            trajectory.states.push(state.clone());
        }
    }

    Ok(trajectory)
}

fn rk4_step(
    state: &SwarmState,
    source: &ForceSource<'_>,
    domain: &DomainSpec,
    noise_draw: &[Vec2],
    config: &IntegratorConfig,
    h: f64,
) -> Result<SwarmState, ModelError> {
    let eval = |s: &SwarmState| -> Result<Vec<(Vec2, Vec2)>, ModelError> {
        let forces = source.eval(s, domain, s.time)?;
        Ok(derivative_from_forces(s, &forces, noise_draw, config))
    };
    let advanced = |k: &[(Vec2, Vec2)], h: f64| -> SwarmState {
        SwarmState {
            agents: state
                .agents
                .iter()
                .zip(k)
                .map(|(a, &(dp, dv))| AgentState {
                    position: a.position + dp * h,
                    velocity: a.velocity + dv * h,
                })
                .collect(),
            time: state.time + h,
        }
    };

    let k1 = eval(state)?;
    let k2 = eval(&advanced(&k1, 0.5 * h))?;
    let k3 = eval(&advanced(&k2, 0.5 * h))?;
    let k4 = eval(&advanced(&k3, h))?;

    Ok(SwarmState {
        agents: state
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| AgentState {
                position: a.position
                    + (k1[i].0 + (k2[i].0 + k3[i].0) * 2.0 + k4[i].0) * (h / 6.0),
                velocity: a.velocity
                    + (k1[i].1 + (k2[i].1 + k3[i].1) * 2.0 + k4[i].1) * (h / 6.0),
            })
            .collect(),
        time: state.time + h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcemodel::InteractionModel;
    use approx::assert_relative_eq;

    fn zero_model() -> InteractionModel {
        InteractionModel::distancing_only(&[(0.0, 0.0)]).unwrap()
    }

    fn two_far_agents(v: Vec2) -> SwarmState {
        SwarmState {
            agents: vec![
                AgentState {
                    position: Vec2::new(0.0, 0.0),
                    velocity: v,
                },
                AgentState {
                    position: Vec2::new(1e6, 1e6),
                    velocity: v,
                },
            ],
            time: 0.0,
        }
    }

    #[test]
    fn propulsion_anchors() {
        assert_eq!(propulsion(Vec2::new(2.0, 0.0), 2.0), Vec2::ZERO);
        assert_eq!(propulsion(Vec2::new(1.0, 0.0), 2.0), Vec2::new(1.0, 0.0));
        assert_eq!(propulsion(Vec2::new(4.0, 0.0), 2.0), Vec2::new(-2.0, 0.0));
        assert_eq!(propulsion(Vec2::ZERO, 2.0), Vec2::ZERO);
    }

    #[test]
    fn minimum_image_wraps() {
        let domain = DomainSpec::periodic(10.0);
        assert_eq!(
            minimum_image(Vec2::new(6.0, 0.0), &domain),
            Vec2::new(-4.0, 0.0)
        );
        assert_eq!(minimum_image(Vec2::ZERO, &domain), Vec2::ZERO);
        // half-open convention: exactly L/2 stays, exactly -L/2 flips
        assert_eq!(
            minimum_image(Vec2::new(5.0, -5.0), &domain),
            Vec2::new(5.0, 5.0)
        );
        assert_eq!(
            minimum_image(Vec2::new(-5.5, 5.5), &domain),
            Vec2::new(4.5, -4.5)
        );
    }

    #[test]
    fn minimum_image_matches_scalar_modulo_oracle() {
        let domain = DomainSpec::periodic(7.0);
        let oracle = |x: f64| {
            let l = 7.0;
            let mut d = x - l * (x / l).round();
            // round() is half-away-from-zero; fix up the boundary to (-L/2, L/2]
            if d <= -l / 2.0 {
                d += l;
            } else if d > l / 2.0 {
                d -= l;
            }
            d
        };
        for i in -40..40 {
            let x = i as f64 * 0.37;
            let got = minimum_image(Vec2::new(x, 0.0), &domain).x;
            assert_relative_eq!(got, oracle(x), epsilon = 1e-12);
            assert!(got > -3.5 && got <= 3.5);
        }
    }

    #[test]
    fn zero_force_straight_line_is_exact() {
        let v = Vec2::new(2.0, 0.0); // at reference speed: propulsion vanishes
        let state = two_far_agents(v);
        let assignment = GroupAssignment::homogeneous(2, zero_model());
        let config = IntegratorConfig::defaults(0);
        let traj = rk4_integrate(
            &state,
            &assignment,
            &DomainSpec::Unbounded,
            &NoiseSpec::off(),
            &config,
            10.0,
            1.0,
        )
        .unwrap();
        let end = traj.states.last().unwrap();
        assert_relative_eq!(end.time, 10.0, epsilon = 1e-12);
        assert_relative_eq!(end.agents[0].position.x, 20.0, epsilon = 1e-10);
        assert_relative_eq!(end.agents[0].position.y, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn speed_relaxes_to_v0_with_unit_rate() {
        // isolated agent: ds/dt = v0 - s, s(t) = v0 + (s0 - v0) e^{-t}
        let s0 = 0.5;
        let v0 = 2.0;
        let state = two_far_agents(Vec2::new(s0, 0.0));
        let assignment = GroupAssignment::homogeneous(2, zero_model());
        let config = IntegratorConfig::defaults(0);
        for t_end in [1.0, 5.0] {
            let traj = rk4_integrate(
                &state,
                &assignment,
                &DomainSpec::Unbounded,
                &NoiseSpec::off(),
                &config,
                t_end,
                t_end,
            )
            .unwrap();
            let got = traj.states.last().unwrap().agents[0].velocity.norm();
            let exact = v0 + (s0 - v0) * (-t_end).exp();
            assert_relative_eq!(got, exact, epsilon = 1e-9);
        }
        // and the approach is monotone
        let traj = rk4_integrate(
            &state,
            &assignment,
            &DomainSpec::Unbounded,
            &NoiseSpec::off(),
            &config,
            5.0,
            0.05,
        )
        .unwrap();
        let speeds: Vec<f64> = traj
            .states
            .iter()
            .map(|s| s.agents[0].velocity.norm())
            .collect();
        assert!(speeds.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn rk4_halving_step_shrinks_error_sixteenfold() {
        let s0 = 0.5;
        let v0 = 2.0;
        let assignment = GroupAssignment::homogeneous(2, zero_model());
        let error_at = |dt: f64| {
            let config = IntegratorConfig::new(dt, v0, 0).unwrap();
            let traj = rk4_integrate(
                &two_far_agents(Vec2::new(s0, 0.0)),
                &assignment,
                &DomainSpec::Unbounded,
                &NoiseSpec::off(),
                &config,
                1.0,
                1.0,
            )
            .unwrap();
            let got = traj.states.last().unwrap().agents[0].velocity.norm();
            let exact = v0 + (s0 - v0) * (-1.0f64).exp();
            (got - exact).abs()
        };
        let ratio = error_at(0.01) / error_at(0.005);
        let order = ratio.log2();
        assert!(
            (3.7..=4.3).contains(&order),
            "measured convergence order {order}"
        );
    }

    #[test]
    fn same_seed_same_trajectory_bits() {
        let state = init_random(InitClass::BoundedSwarm, 8, 2.0, 42);
        let model = InteractionModel::distancing_only(&[(-0.3, 1.0)]).unwrap();
        let assignment = GroupAssignment::homogeneous(8, model);
        let config = IntegratorConfig::defaults(7);
        let run = || {
            rk4_integrate(
                &state,
                &assignment,
                &DomainSpec::Unbounded,
                &NoiseSpec::with_sigma(1.0),
                &config,
                2.0,
                0.5,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn init_random_is_deterministic_and_in_range() {
        let a = init_random(InitClass::BoundedSwarm, 40, 2.0, 9);
        let b = init_random(InitClass::BoundedSwarm, 40, 2.0, 9);
        assert_eq!(a, b);
        for agent in &a.agents {
            assert!(agent.position.x.abs() <= 1.0 && agent.position.y.abs() <= 1.0);
            assert!(agent.velocity.x.abs() <= 1.0 && agent.velocity.y.abs() <= 1.0);
        }
        let c = init_random(InitClass::BoundedSwarm, 40, 2.0, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn field_init_respects_density_box() {
        // N = 40 at density 4 puts agents in a box of side sqrt(10)
        let extent = (40.0f64 / 4.0).sqrt();
        assert_relative_eq!(extent, 3.16227766016838, epsilon = 1e-12);
        let s = init_random(InitClass::Field { extent }, 40, 2.0, 3);
        for agent in &s.agents {
            assert!(agent.position.x.abs() <= extent / 2.0);
            assert!(agent.position.y.abs() <= extent / 2.0);
            assert!(agent.velocity.x.abs() <= 2.0 && agent.velocity.y.abs() <= 2.0);
        }
    }

    #[test]
    fn periodic_positions_stay_inside_box() {
        let l = 3.0;
        let domain = DomainSpec::periodic(l);
        let state = init_random(InitClass::Field { extent: l }, 10, 2.0, 5);
        let model = InteractionModel::distancing_only(&[(0.0, 0.0)]).unwrap();
        let assignment = GroupAssignment::homogeneous(10, model);
        let config = IntegratorConfig::defaults(11);
        let traj = rk4_integrate(
            &state,
            &assignment,
            &domain,
            &NoiseSpec::with_sigma(1.0),
            &config,
            5.0,
            0.25,
        )
        .unwrap();
        for s in &traj.states {
            for a in &s.agents {
                assert!(a.position.x >= -l / 2.0 && a.position.x < l / 2.0);
                assert!(a.position.y >= -l / 2.0 && a.position.y < l / 2.0);
            }
        }
    }

    #[test]
    fn momentum_conserved_without_propulsion() {
        // homogeneous smooth attraction, noise off, propulsion disabled
        let mut state = init_random(InitClass::BoundedSwarm, 20, 2.0, 13);
        for a in state.agents.iter_mut() {
            a.velocity += Vec2::new(0.5, 0.3); // ensure |P(0)| is well away from zero
        }
        let p0 = state.total_momentum();
        assert!(p0.norm() > 1.0);
        let model = InteractionModel::distancing_only(&[(-0.5, 1.0)]).unwrap();
        let assignment = GroupAssignment::homogeneous(20, model);
        let mut config = IntegratorConfig::defaults(0);
        config.propulsion_enabled = false;
        let traj = rk4_integrate(
            &state,
            &assignment,
            &DomainSpec::Unbounded,
            &NoiseSpec::off(),
            &config,
            10.0,
            10.0,
        )
        .unwrap();
        let p1 = traj.states.last().unwrap().total_momentum();
        assert!((p1 - p0).norm() / p0.norm() <= 1e-8);
    }

    #[test]
    fn divergence_reports_time_and_partial() {
        // strongly repulsive with huge positive exponent blows up fast
        let model = InteractionModel::distancing_only(&[(1e3, 6.0)]).unwrap();
        let state = init_random(InitClass::BoundedSwarm, 6, 2.0, 1);
        let assignment = GroupAssignment::homogeneous(6, model);
        let config = IntegratorConfig::defaults(0);
        match rk4_integrate(
            &state,
            &assignment,
            &DomainSpec::Unbounded,
            &NoiseSpec::off(),
            &config,
            50.0,
            0.5,
        ) {
            Err(SimError::Divergence { time, partial, .. }) => {
                assert!(time < 50.0);
                assert!(!partial.states.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn state_derivative_matches_term_oracle() {
        let state = init_random(InitClass::BoundedSwarm, 5, 2.0, 21);
        let model = InteractionModel::new(
            crate::forcemodel::PolySeries::from_pairs(&[(0.4, 1.0), (-0.1, 0.0)]).unwrap(),
            crate::forcemodel::PolySeries::from_pairs(&[(0.2, 0.5)]).unwrap(),
            Some(3.0),
        )
        .unwrap();
        let assignment = GroupAssignment::homogeneous(5, model);
        let config = IntegratorConfig::defaults(0);
        let noise: Vec<Vec2> = (0..5).map(|i| Vec2::new(i as f64 * 0.1, -0.2)).collect();
        let deriv = state_derivative(&state, &assignment, &DomainSpec::Unbounded, &noise, &config)
            .unwrap();
        let forces = total_force(&state, &assignment, &DomainSpec::Unbounded).unwrap();
        for i in 0..5 {
            assert_eq!(deriv[i].0, state.agents[i].velocity);
            let expect = propulsion(state.agents[i].velocity, 2.0) + forces[i] + noise[i];
            assert_relative_eq!(deriv[i].1.x, expect.x, epsilon = 1e-14);
            assert_relative_eq!(deriv[i].1.y, expect.y, epsilon = 1e-14);
        }
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let state = init_random(InitClass::BoundedSwarm, 3, 2.0, 2);
        let model = InteractionModel::distancing_only(&[(-0.2, 1.0)]).unwrap();
        let assignment = GroupAssignment::homogeneous(3, model);
        let config = IntegratorConfig::defaults(0);
        let traj = rk4_integrate(
            &state,
            &assignment,
            &DomainSpec::Unbounded,
            &NoiseSpec::off(),
            &config,
            1.0,
            0.25,
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &["seed=2 config=test".to_string()])
            .unwrap();
        let (back, comments) = Trajectory::read_csv(&buf[..]).unwrap();
        assert_eq!(back, traj);
        assert_eq!(comments, vec!["seed=2 config=test".to_string()]);
    }
}

//! Pairwise interaction force model: a distancing coefficient function `f`
//! acting along the relative-position unit vector and an aligning
//! coefficient function `g` acting along the relative-velocity unit vector,
//! the latter nullified beyond a cutoff radius. Both coefficient functions
//! are polynomial series with real exponents.
//!
//! Sign conventions, fixed here once for the whole crate:
//!
//! * the displacement passed to [`pair_force`] points from agent `j` to
//!   agent `i` (`pos_i - pos_j`, minimum-image in periodic domains), so a
//!   negative `f(r)` attracts and a positive `f(r)` repels;
//! * the aligning unit vector is `(v_j - v_i)/|v_j - v_i|`, so a positive
//!   `g(r)` accelerates `i` toward `j`'s velocity.

use crate::dynamics::{minimum_image, DomainSpec, SwarmState};
use crate::vec2::Vec2;
use crate::{R_FLOOR, V_FLOOR};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("polynomial series must have at least one term")]
    EmptySeries,
    #[error("term {index} (coefficient {coefficient}, exponent {exponent}) is not finite")]
    NonFiniteTerm {
        index: usize,
        coefficient: f64,
        exponent: f64,
    },
    #[error(
        "evaluation of term {index} (coefficient {coefficient}, exponent {exponent}) at r = {r} is not finite"
    )]
    Evaluation {
        index: usize,
        coefficient: f64,
        exponent: f64,
        r: f64,
    },
    #[error("coincident agents: pair distance is zero")]
    CoincidentAgents,
    #[error("agents {i} and {j}: {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("cutoff radius must be positive, got {0}")]
    InvalidCutoff(f64),
    #[error("group assignment: {0}")]
    Assignment(String),
    #[error("transition schedule: {0}")]
    Schedule(String),
    #[error("model file parse error: {0}")]
    Parse(String),
    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
}

/// One `a_k * r^{n_k}` term. Serialized as the pair `[a_k, n_k]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct PolyTerm {
    pub coefficient: f64,
    pub exponent: f64,
}

impl From<(f64, f64)> for PolyTerm {
    fn from((coefficient, exponent): (f64, f64)) -> Self {
        PolyTerm {
            coefficient,
            exponent,
        }
    }
}

impl From<PolyTerm> for (f64, f64) {
    fn from(t: PolyTerm) -> (f64, f64) {
        (t.coefficient, t.exponent)
    }
}

/// Polynomial series `sum_k a_k * r^{n_k}` with real exponents; the form
/// shared by the distancing and aligning coefficient functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolySeries {
    terms: Vec<PolyTerm>,
}

impl PolySeries {
    pub fn new(terms: Vec<PolyTerm>) -> Result<Self, ModelError> {
        if terms.is_empty() {
            return Err(ModelError::EmptySeries);
        }
        for (index, t) in terms.iter().enumerate() {
            if !t.coefficient.is_finite() || !t.exponent.is_finite() {
                return Err(ModelError::NonFiniteTerm {
                    index,
                    coefficient: t.coefficient,
                    exponent: t.exponent,
                });
            }
        }
        Ok(PolySeries { terms })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, ModelError> {
        Self::new(pairs.iter().copied().map(PolyTerm::from).collect())
    }

    /// The identically-zero series.
    pub fn zero() -> Self {
        PolySeries {
            terms: vec![PolyTerm {
                coefficient: 0.0,
                exponent: 0.0,
            }],
        }
    }

    pub fn terms(&self) -> &[PolyTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coefficient == 0.0)
    }

    /// Every coefficient multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        PolySeries {
            terms: self
                .terms
                .iter()
                .map(|t| PolyTerm {
                    coefficient: t.coefficient * s,
                    exponent: t.exponent,
                })
                .collect(),
        }
    }

    /// Evaluate the series at distance `r >= 0`. The base is clamped to
    /// `R_FLOOR` before exponentiation since exponents may be negative.
    pub fn eval(&self, r: f64) -> Result<f64, ModelError> {
        let base = r.max(R_FLOOR);
        let mut sum = 0.0;
        for (index, t) in self.terms.iter().enumerate() {
            let term = t.coefficient * base.powf(t.exponent);
            if !term.is_finite() {
                return Err(ModelError::Evaluation {
                    index,
                    coefficient: t.coefficient,
                    exponent: t.exponent,
                    r,
                });
            }
            sum += term;
        }
        Ok(sum)
    }
}

/// A learned interaction law: distancing series `f`, aligning series `g`,
/// and the cutoff radius beyond which the aligning term is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionModel {
    pub distancing: PolySeries,
    pub aligning: PolySeries,
    /// Cutoff for the aligning term; `None` means unbounded.
    pub cutoff_radius: Option<f64>,
    /// Optional cutoff for the distancing term. Off by default.
    pub distancing_cutoff: Option<f64>,
    /// Provenance carried through the model file: pattern kind and targets.
    pub pattern_meta: Option<PatternMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMeta {
    pub kind: String,
    pub targets: BTreeMap<String, f64>,
}

impl InteractionModel {
    pub fn new(
        distancing: PolySeries,
        aligning: PolySeries,
        cutoff_radius: Option<f64>,
    ) -> Result<Self, ModelError> {
        if let Some(rc) = cutoff_radius {
            if !(rc > 0.0) {
                return Err(ModelError::InvalidCutoff(rc));
            }
        }
        Ok(InteractionModel {
            distancing,
            aligning,
            cutoff_radius,
            distancing_cutoff: None,
            pattern_meta: None,
        })
    }

    pub fn with_meta(mut self, meta: PatternMeta) -> Self {
        self.pattern_meta = Some(meta);
        self
    }

    /// Distancing-only model, handy in tests and fixtures.
    pub fn distancing_only(pairs: &[(f64, f64)]) -> Result<Self, ModelError> {
        Self::new(PolySeries::from_pairs(pairs)?, PolySeries::zero(), None)
    }
}

/// Serialized layout of a model file. `schema_version` gates parsing.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    f: PolySeries,
    g: PolySeries,
    cutoff_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distancing_cutoff: Option<f64>,
    pattern_meta: Option<PatternMeta>,
}

const MODEL_SCHEMA_VERSION: u32 = 1;

/// Serialize a model to its JSON document. Numbers round-trip exactly.
pub fn serialize_model(model: &InteractionModel) -> String {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        f: model.distancing.clone(),
        g: model.aligning.clone(),
        cutoff_radius: model.cutoff_radius,
        distancing_cutoff: model.distancing_cutoff,
        pattern_meta: model.pattern_meta.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serialization cannot fail");
    s.push('\n');
    s
}

/// Parse a model JSON document, validating schema version and invariants.
pub fn deserialize_model(text: &str) -> Result<InteractionModel, ModelError> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(ModelError::SchemaVersion {
            found: file.schema_version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    // Re-validate through the constructors so a hand-edited file cannot
    // smuggle in an empty series or a non-positive cutoff.
    let f = PolySeries::new(file.f.terms)?;
    let g = PolySeries::new(file.g.terms)?;
    let mut model = InteractionModel::new(f, g, file.cutoff_radius)?;
    if let Some(rc) = file.distancing_cutoff {
        if !(rc > 0.0) {
            return Err(ModelError::InvalidCutoff(rc));
        }
        model.distancing_cutoff = Some(rc);
    }
    model.pattern_meta = file.pattern_meta;
    Ok(model)
}

/// Which model governs each agent. Forces are non-reciprocal across groups:
/// agent `i` feels its own group's model acting against every other agent.
#[derive(Clone, Debug)]
pub struct GroupAssignment {
    membership: Vec<usize>,
    models: Vec<InteractionModel>,
}

impl GroupAssignment {
    pub fn new(membership: Vec<usize>, models: Vec<InteractionModel>) -> Result<Self, ModelError> {
        if models.is_empty() {
            return Err(ModelError::Assignment("no models given".into()));
        }
        if let Some(&bad) = membership.iter().find(|&&g| g >= models.len()) {
            return Err(ModelError::Assignment(format!(
                "group index {bad} out of range for {} models",
                models.len()
            )));
        }
        Ok(GroupAssignment { membership, models })
    }

    /// All agents share one model.
    pub fn homogeneous(n_agents: usize, model: InteractionModel) -> Self {
        GroupAssignment {
            membership: vec![0; n_agents],
            models: vec![model],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.membership.len()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.models.len() == 1
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn group_of(&self, agent: usize) -> usize {
        self.membership[agent]
    }

    pub fn model_of(&self, agent: usize) -> &InteractionModel {
        &self.models[self.membership[agent]]
    }

    pub fn models(&self) -> &[InteractionModel] {
        &self.models
    }
}

/// A timeline of group assignments with exponential blending at each
/// boundary, plus optional windows in which interaction forces are zeroed
/// and only noise and propulsion act.
#[derive(Clone, Debug)]
pub struct TransitionSchedule {
    segments: Vec<ScheduleSegment>,
    noise_windows: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct ScheduleSegment {
    pub start_time: f64,
    pub assignment: GroupAssignment,
}

impl TransitionSchedule {
    pub fn new(
        segments: Vec<ScheduleSegment>,
        noise_windows: Vec<(f64, f64)>,
    ) -> Result<Self, ModelError> {
        if segments.is_empty() {
            return Err(ModelError::Schedule("no segments".into()));
        }
        for pair in segments.windows(2) {
            if pair[1].start_time <= pair[0].start_time {
                return Err(ModelError::Schedule(
                    "segment start times must be strictly increasing".into(),
                ));
            }
        }
        for &(w0, w1) in &noise_windows {
            if !(w1 > w0) {
                return Err(ModelError::Schedule(format!(
                    "noise window [{w0}, {w1}] is empty"
                )));
            }
            for seg in &segments {
                if w0 < seg.start_time && seg.start_time < w1 {
                    return Err(ModelError::Schedule(format!(
                        "noise window [{w0}, {w1}] overlaps segment boundary at t = {}",
                        seg.start_time
                    )));
                }
            }
        }
        Ok(TransitionSchedule {
            segments,
            noise_windows,
        })
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    pub fn noise_windows(&self) -> &[(f64, f64)] {
        &self.noise_windows
    }

    pub fn in_noise_window(&self, t: f64) -> bool {
        self.noise_windows.iter().any(|&(w0, w1)| t >= w0 && t < w1)
    }

    /// Index of the segment active at time `t` (the last one started).
    pub fn active_segment(&self, t: f64) -> usize {
        match self
            .segments
            .iter()
            .rposition(|seg| seg.start_time <= t)
        {
            Some(p) => p,
            None => 0,
        }
    }
}

/// Blend weight of the incoming segment: `1 - exp(t_p - t)` for `t >= t_p`.
/// Reaches 0.99 five time units past the boundary.
pub fn blend_weight(t: f64, t_p: f64) -> f64 {
    1.0 - (t_p - t).exp()
}

/// Pairwise interaction force on agent `i` from agent `j`.
///
/// `displacement` must be the domain-aware displacement from `j` to `i`
/// (`pos_i - pos_j`, minimum-image under periodic boundaries). Velocities
/// closer than `V_FLOOR` contribute no aligning force; the aligning term is
/// exactly zero beyond the cutoff radius.
pub fn pair_force(
    model: &InteractionModel,
    vel_i: Vec2,
    vel_j: Vec2,
    displacement: Vec2,
) -> Result<Vec2, ModelError> {
    let r = displacement.norm();
    if r == 0.0 {
        return Err(ModelError::CoincidentAgents);
    }

    let mut force = Vec2::ZERO;

    let distancing_active = match model.distancing_cutoff {
        Some(rc) => r <= rc,
        None => true,
    };
    if distancing_active && !model.distancing.is_zero() {
        let f = model.distancing.eval(r)?;
        force += displacement * (f / r);
    }

    let aligning_active = match model.cutoff_radius {
        Some(rc) => r <= rc,
        None => true,
    };
    if aligning_active && !model.aligning.is_zero() {
        let dv = vel_j - vel_i;
        let speed = dv.norm();
        if speed >= V_FLOOR {
            let g = model.aligning.eval(r)?;
            force += dv * (g / speed);
        }
    }

    Ok(force)
}

/// Sum of pairwise forces on every agent under a single assignment.
///
/// Each agent uses its own group's model against all other agents, so with
/// more than one group the total is not momentum-conserving. The
/// homogeneous case takes an exactly antisymmetric fast path.
pub fn total_force(
    state: &SwarmState,
    assignment: &GroupAssignment,
    domain: &DomainSpec,
) -> Result<Vec<Vec2>, ModelError> {
    let n = state.agents.len();
    let mut forces = vec![Vec2::ZERO; n];
    if assignment.is_homogeneous() {
        let model = &assignment.models()[0];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = minimum_image(
                    state.agents[i].position - state.agents[j].position,
                    domain,
                );
                let fij = pair_force(model, state.agents[i].velocity, state.agents[j].velocity, d)
                    .map_err(|e| ModelError::Pair {
                        i,
                        j,
                        source: Box::new(e),
                    })?;
                forces[i] += fij;
                forces[j] -= fij;
            }
        }
    } else {
        for i in 0..n {
            let model = assignment.model_of(i);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = minimum_image(
                    state.agents[i].position - state.agents[j].position,
                    domain,
                );
                let fij = pair_force(model, state.agents[i].velocity, state.agents[j].velocity, d)
                    .map_err(|e| ModelError::Pair {
                        i,
                        j,
                        source: Box::new(e),
                    })?;
                forces[i] += fij;
            }
        }
    }
    Ok(forces)
}

/// Total force under a transition schedule at time `t`: the active segment's
/// force blended against the previous segment's, both zeroed inside
/// noise-only windows.
pub fn scheduled_force(
    state: &SwarmState,
    schedule: &TransitionSchedule,
    domain: &DomainSpec,
    t: f64,
) -> Result<Vec<Vec2>, ModelError> {
    let n = state.agents.len();
    if schedule.in_noise_window(t) {
        return Ok(vec![Vec2::ZERO; n]);
    }
    let p = schedule.active_segment(t);
    let current = total_force(state, &schedule.segments()[p].assignment, domain)?;
    if p == 0 {
        return Ok(current);
    }
    let w = blend_weight(t, schedule.segments()[p].start_time);
    let previous = total_force(state, &schedule.segments()[p - 1].assignment, domain)?;
    Ok(current
        .into_iter()
        .zip(previous)
        .map(|(c, q)| c * w + q * (1.0 - w))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AgentState;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn state_from(agents: Vec<(Vec2, Vec2)>) -> SwarmState {
        SwarmState {
            agents: agents
                .into_iter()
                .map(|(position, velocity)| AgentState { position, velocity })
                .collect(),
            time: 0.0,
        }
    }

    #[test]
    fn eval_single_square_term() {
        let p = PolySeries::from_pairs(&[(1.0, 2.0)]).unwrap();
        assert_eq!(p.eval(2.0).unwrap(), 4.0);
    }

    #[test]
    fn eval_zero_coefficient_is_zero() {
        for n in [-3.0, 0.0, 0.5, 7.0] {
            let p = PolySeries::from_pairs(&[(0.0, n)]).unwrap();
            assert_eq!(p.eval(3.7).unwrap(), 0.0);
        }
    }

    #[test]
    fn eval_two_terms() {
        let p = PolySeries::from_pairs(&[(1.0, 1.0), (-2.0, 0.0)]).unwrap();
        assert_eq!(p.eval(3.0).unwrap(), 1.0);
    }

    #[test]
    fn eval_overflow_names_the_term() {
        let p = PolySeries::from_pairs(&[(1.0, 1.0), (1e300, 4.0)]).unwrap();
        match p.eval(1e10).unwrap_err() {
            ModelError::Evaluation { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_series_rejected() {
        assert!(matches!(
            PolySeries::new(vec![]),
            Err(ModelError::EmptySeries)
        ));
    }

    #[test]
    fn positive_f_repels() {
        // f(r) = r, i at origin, j at (2, 0): e_r points from j to i, i.e.
        // (-1, 0), and f(2) = 2 > 0 pushes i away from j.
        let model = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        let f = pair_force(
            &model,
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(-2.0, 0.0),
        )
        .unwrap();
        assert_eq!(f, Vec2::new(-2.0, 0.0));
    }

    #[test]
    fn negative_f_attracts() {
        // f(r) = -r, i at origin, j at (3, 0): force on i points toward j.
        let model = InteractionModel::distancing_only(&[(-1.0, 1.0)]).unwrap();
        let d = Vec2::new(-3.0, 0.0);
        let f = pair_force(&model, Vec2::ZERO, Vec2::ZERO, d).unwrap();
        // independent scalar route: f(r) * e_r componentwise
        let r = d.norm();
        let expected = Vec2::new(-r * (d.x / r), -r * (d.y / r));
        assert_relative_eq!(f.x, expected.x, max_relative = 1e-15);
        assert_relative_eq!(f.y, expected.y, max_relative = 1e-15);
        assert_eq!(f, Vec2::new(3.0, 0.0));
    }

    #[test]
    fn aligning_zero_beyond_cutoff() {
        let model = InteractionModel::new(
            PolySeries::zero(),
            PolySeries::from_pairs(&[(1.0, 0.0)]).unwrap(),
            Some(3.0),
        )
        .unwrap();
        let f = pair_force(
            &model,
            Vec2::new(1.0, 0.0),
            Vec2::new(-1.0, 0.0),
            Vec2::new(5.0, 0.0),
        )
        .unwrap();
        assert_eq!(f, Vec2::ZERO);
    }

    #[test]
    fn aligning_points_toward_other_velocity() {
        // g = 1, i moving +x, j moving +y: force on i along unit(v_j - v_i).
        let model = InteractionModel::new(
            PolySeries::zero(),
            PolySeries::from_pairs(&[(1.0, 0.0)]).unwrap(),
            Some(10.0),
        )
        .unwrap();
        let f = pair_force(
            &model,
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 0.0),
        )
        .unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(f.x, -s, max_relative = 1e-15);
        assert_relative_eq!(f.y, s, max_relative = 1e-15);
    }

    #[test]
    fn coincident_agents_error() {
        let model = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        assert!(matches!(
            pair_force(&model, Vec2::ZERO, Vec2::ZERO, Vec2::ZERO),
            Err(ModelError::CoincidentAgents)
        ));
    }

    #[test]
    fn homogeneous_pair_forces_cancel() {
        let model = InteractionModel::distancing_only(&[(0.7, 1.3), (-0.2, -0.5)]).unwrap();
        let state = state_from(vec![
            (Vec2::new(0.1, -0.4), Vec2::new(1.0, 0.2)),
            (Vec2::new(1.4, 0.9), Vec2::new(-0.3, 0.8)),
        ]);
        let assignment = GroupAssignment::homogeneous(2, model);
        let forces = total_force(&state, &assignment, &DomainSpec::Unbounded).unwrap();
        assert_eq!(forces[0] + forces[1], Vec2::ZERO);
    }

    #[test]
    fn symmetric_middle_agent_feels_nothing() {
        let model = InteractionModel::distancing_only(&[(1.0, 0.0)]).unwrap();
        let v = Vec2::new(0.5, 0.5);
        let state = state_from(vec![
            (Vec2::new(-1.0, 0.0), v),
            (Vec2::new(0.0, 0.0), v),
            (Vec2::new(1.0, 0.0), v),
        ]);
        let assignment = GroupAssignment::homogeneous(3, model);
        let forces = total_force(&state, &assignment, &DomainSpec::Unbounded).unwrap();
        assert_eq!(forces[1], Vec2::ZERO);
    }

    #[test]
    fn two_group_forces_do_not_conserve_momentum() {
        // brute-force oracle: per-agent sum with each agent's own model
        let model_a = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        let model_b = InteractionModel::distancing_only(&[(-0.5, 2.0)]).unwrap();
        let state = state_from(vec![
            (Vec2::new(0.3, 0.1), Vec2::new(1.0, 0.0)),
            (Vec2::new(-0.8, 0.7), Vec2::new(0.0, 1.0)),
            (Vec2::new(0.9, -0.6), Vec2::new(-1.0, 0.5)),
            (Vec2::new(-0.2, -1.1), Vec2::new(0.4, -0.7)),
        ]);
        let assignment = GroupAssignment::new(
            vec![0, 0, 1, 1],
            vec![model_a.clone(), model_b.clone()],
        )
        .unwrap();
        let forces = total_force(&state, &assignment, &DomainSpec::Unbounded).unwrap();

        let mut oracle = vec![Vec2::ZERO; 4];
        let models = [&model_a, &model_a, &model_b, &model_b];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let d = state.agents[i].position - state.agents[j].position;
                    oracle[i] += pair_force(
                        models[i],
                        state.agents[i].velocity,
                        state.agents[j].velocity,
                        d,
                    )
                    .unwrap();
                }
            }
        }
        let mut net = Vec2::ZERO;
        for i in 0..4 {
            assert_relative_eq!(forces[i].x, oracle[i].x, max_relative = 1e-14);
            assert_relative_eq!(forces[i].y, oracle[i].y, max_relative = 1e-14);
            net += forces[i];
        }
        assert!(net.norm() > 1e-6, "two-group total should not cancel");
    }

    #[test]
    fn blend_weight_anchors() {
        assert_eq!(blend_weight(2.0, 2.0), 0.0);
        let w5 = blend_weight(7.0, 2.0);
        assert!(w5 > 0.99);
        assert_relative_eq!(w5, 1.0 - (-5.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(blend_weight(1e3, 0.0), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn schedule_rejects_window_over_boundary() {
        let model = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        let seg = |t| ScheduleSegment {
            start_time: t,
            assignment: GroupAssignment::homogeneous(2, model.clone()),
        };
        assert!(TransitionSchedule::new(vec![seg(0.0), seg(10.0)], vec![(8.0, 12.0)]).is_err());
        assert!(TransitionSchedule::new(vec![seg(0.0), seg(10.0)], vec![(11.0, 12.0)]).is_ok());
    }

    #[test]
    fn scheduled_force_blends_between_segments() {
        let strong = InteractionModel::distancing_only(&[(2.0, 1.0)]).unwrap();
        let weak = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        let state = state_from(vec![
            (Vec2::new(0.0, 0.0), Vec2::ZERO),
            (Vec2::new(1.0, 0.0), Vec2::ZERO),
        ]);
        let schedule = TransitionSchedule::new(
            vec![
                ScheduleSegment {
                    start_time: 0.0,
                    assignment: GroupAssignment::homogeneous(2, weak.clone()),
                },
                ScheduleSegment {
                    start_time: 10.0,
                    assignment: GroupAssignment::homogeneous(2, strong.clone()),
                },
            ],
            vec![],
        )
        .unwrap();
        let t = 11.0;
        let w = blend_weight(t, 10.0);
        let blended = scheduled_force(&state, &schedule, &DomainSpec::Unbounded, t).unwrap();
        let f_weak = total_force(
            &state,
            &GroupAssignment::homogeneous(2, weak),
            &DomainSpec::Unbounded,
        )
        .unwrap();
        let f_strong = total_force(
            &state,
            &GroupAssignment::homogeneous(2, strong),
            &DomainSpec::Unbounded,
        )
        .unwrap();
        for i in 0..2 {
            let expect = f_strong[i] * w + f_weak[i] * (1.0 - w);
            assert_relative_eq!(blended[i].x, expect.x, max_relative = 1e-14);
        }
    }

    #[test]
    fn noise_window_zeroes_forces() {
        let model = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        let state = state_from(vec![
            (Vec2::new(0.0, 0.0), Vec2::ZERO),
            (Vec2::new(1.0, 0.0), Vec2::ZERO),
        ]);
        let schedule = TransitionSchedule::new(
            vec![ScheduleSegment {
                start_time: 0.0,
                assignment: GroupAssignment::homogeneous(2, model),
            }],
            vec![(5.0, 6.0)],
        )
        .unwrap();
        let inside = scheduled_force(&state, &schedule, &DomainSpec::Unbounded, 5.5).unwrap();
        assert!(inside.iter().all(|f| *f == Vec2::ZERO));
        let outside = scheduled_force(&state, &schedule, &DomainSpec::Unbounded, 6.5).unwrap();
        assert!(outside.iter().any(|f| *f != Vec2::ZERO));
    }

    #[test]
    fn model_roundtrip_is_exact() {
        let mut model = InteractionModel::new(
            PolySeries::from_pairs(&[(0.123456789123456789, -1.75), (-3.5e-7, 2.0)]).unwrap(),
            PolySeries::from_pairs(&[(1.0 / 3.0, 0.1)]).unwrap(),
            Some(2.5000000000000004),
        )
        .unwrap();
        model.pattern_meta = Some(PatternMeta {
            kind: "ring".into(),
            targets: [("radius".to_string(), 4.0)].into_iter().collect(),
        });
        let text = serialize_model(&model);
        let back = deserialize_model(&text).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn deserialize_rejects_empty_terms() {
        let text = r#"{"schema_version":1,"f":[],"g":[[0.0,0.0]],"cutoff_radius":null,"pattern_meta":null}"#;
        assert!(matches!(
            deserialize_model(text),
            Err(ModelError::EmptySeries)
        ));
    }

    #[test]
    fn deserialize_rejects_truncated_file() {
        let model = InteractionModel::distancing_only(&[(1.0, 1.0)]).unwrap();
        let text = serialize_model(&model);
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            deserialize_model(truncated),
            Err(ModelError::Parse(_))
        ));
    }

    #[test]
    fn deserialize_rejects_wrong_schema_version() {
        let text = r#"{"schema_version":2,"f":[[1.0,1.0]],"g":[[0.0,0.0]],"cutoff_radius":null,"pattern_meta":null}"#;
        assert!(matches!(
            deserialize_model(text),
            Err(ModelError::SchemaVersion { found: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn reciprocity_of_homogeneous_pairs(
            px in -5.0f64..5.0, py in -5.0f64..5.0,
            vx in -3.0f64..3.0, vy in -3.0f64..3.0,
            ux in -3.0f64..3.0, uy in -3.0f64..3.0,
            a0 in -2.0f64..2.0, n0 in -2.0f64..2.0,
            b0 in -2.0f64..2.0, m0 in -2.0f64..2.0,
        ) {
            prop_assume!(px.abs() + py.abs() > 1e-3);
            let model = InteractionModel::new(
                PolySeries::from_pairs(&[(a0, n0)]).unwrap(),
                PolySeries::from_pairs(&[(b0, m0)]).unwrap(),
                Some(4.0),
            ).unwrap();
            let d = Vec2::new(px, py);
            let vi = Vec2::new(vx, vy);
            let vj = Vec2::new(ux, uy);
            let fij = pair_force(&model, vi, vj, d).unwrap();
            let fji = pair_force(&model, vj, vi, -d).unwrap();
            let scale = fij.norm().max(1.0);
            prop_assert!((fij + fji).norm() <= 1e-12 * scale);
        }

        #[test]
        fn cutoff_is_a_hard_zero(r in 3.0001f64..50.0, g0 in -3.0f64..3.0) {
            let model = InteractionModel::new(
                PolySeries::zero(),
                PolySeries::from_pairs(&[(g0, 0.5)]).unwrap(),
                Some(3.0),
            ).unwrap();
            let f = pair_force(
                &model,
                Vec2::new(1.0, 0.0),
                Vec2::new(0.0, 1.0),
                Vec2::new(r, 0.0),
            ).unwrap();
            prop_assert_eq!(f, Vec2::ZERO);
        }

        #[test]
        fn distancing_scales_exactly_by_powers_of_two(
            k in -4i32..5,
            r in 0.1f64..10.0,
            a in -2.0f64..2.0,
            n in -1.5f64..2.5,
        ) {
            let s = (2.0f64).powi(k);
            let base = InteractionModel::distancing_only(&[(a, n), (0.3, 0.0)]).unwrap();
            let scaled = InteractionModel::new(
                base.distancing.scaled(s),
                PolySeries::zero(),
                None,
            ).unwrap();
            let d = Vec2::new(r, -0.2 * r);
            let f1 = pair_force(&base, Vec2::ZERO, Vec2::ZERO, d).unwrap();
            let f2 = pair_force(&scaled, Vec2::ZERO, Vec2::ZERO, d).unwrap();
            prop_assert_eq!(f2, f1 * s);
        }

        #[test]
        fn eval_is_linear_in_terms(
            r in 0.0f64..10.0,
            terms in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..6),
        ) {
            let series = PolySeries::from_pairs(&terms).unwrap();
            let whole = series.eval(r).unwrap();
            let mut sum = 0.0;
            for &t in &terms {
                sum += PolySeries::from_pairs(&[t]).unwrap().eval(r).unwrap();
            }
            prop_assert_eq!(whole, sum);
        }
    }
}

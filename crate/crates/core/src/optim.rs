//! Optimizers for the training loop: full-batch Adam for the warm-up phase
//! and limited-memory BFGS (two-loop recursion, strong Wolfe line search)
//! for the polish phase.

use std::collections::VecDeque;

/// An evaluation failure (typically a non-finite loss). The line search
/// treats failing trial points as infinitely bad and backtracks.
#[derive(Debug, Clone, thiserror::Error)]
#[error("objective evaluation failed: {0}")]
pub struct EvalError(pub String);

/// A differentiable scalar objective over a flat parameter vector.
pub trait Objective {
    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), EvalError>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), EvalError>,
{
    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        self(params)
    }
}

/// Standard Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One in-place update from a full-batch gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LbfgsOptions {
    /// Stop as soon as the loss itself drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub history: usize,
    /// Stop when the loss improves by less than this between iterations.
    pub loss_change_tol: f64,
    /// Stop when the gradient max-norm drops below this.
    pub grad_tol: f64,
    pub max_line_search: usize,
}

impl LbfgsOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        LbfgsOptions {
            tolerance,
            max_iterations: 2000,
            history: 20,
            loss_change_tol: 1e-9,
            grad_tol: 1e-7,
            max_line_search: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfgsTermination {
    LossBelowTolerance,
    SmallLossChange,
    SmallGradient,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    /// Best parameters seen (not necessarily the last iterate).
    pub params: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub termination: LbfgsTermination,
    /// False only for line-search failure and iteration exhaustion.
    pub converged: bool,
    /// Loss after every completed iteration, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Minimize `objective` starting from `initial`. Only the initial
/// evaluation can error out; later failures are absorbed by the line
/// search or reported as a non-converged outcome.
pub fn lbfgs_optimize<O: Objective>(
    initial: &[f64],
    objective: &O,
    options: &LbfgsOptions,
) -> Result<LbfgsOutcome, EvalError> {
    let n = initial.len();
    let mut x = initial.to_vec();
    let (mut f, mut g) = objective.value_grad(&x)?;
    let mut trace = vec![f];
    let mut best_f = f;
    let mut best_x = x.clone();

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new(); // (s, y, rho)
    let mut termination = LbfgsTermination::MaxIterations;
    let mut iterations = 0;

    if f < options.tolerance {
        return Ok(LbfgsOutcome {
            params: x,
            loss: f,
            iterations: 0,
            termination: LbfgsTermination::LossBelowTolerance,
            converged: true,
            loss_trace: trace,
        });
    }
    if max_abs(&g) < options.grad_tol {
        return Ok(LbfgsOutcome {
            params: x,
            loss: f,
            iterations: 0,
            termination: LbfgsTermination::SmallGradient,
            converged: true,
            loss_trace: trace,
        });
    }

    for iter in 0..options.max_iterations {
        iterations = iter + 1;

        let mut d = two_loop_direction(&g, &history);
        let mut gtd = dot(&g, &d);
        if !(gtd < 0.0) {
            // not a descent direction: drop the curvature memory
            history.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
            if !(gtd < 0.0) {
                termination = LbfgsTermination::SmallGradient;
                break;
            }
        }

        let t0 = if iter == 0 {
            (1.0f64).min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>().max(1e-16))
        } else {
            1.0
        };

        let ls = strong_wolfe(objective, &x, t0, &d, f, &g, gtd, options);
        let ls = match ls {
            Some(res) => res,
            None => {
                termination = LbfgsTermination::LineSearchFailure;
                break;
            }
        };

        let mut s = vec![0.0; n];
        for i in 0..n {
            s[i] = ls.t * d[i];
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = ls.grad[i] - g[i];
        }
        let ys = dot(&y, &s);
        if ys > 1e-10 {
            if history.len() == options.history {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / ys));
        }

        for i in 0..n {
            x[i] += s[i];
        }
        let f_prev = f;
        f = ls.loss;
        g = ls.grad;
        trace.push(f);
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }

        if f < options.tolerance {
            termination = LbfgsTermination::LossBelowTolerance;
            break;
        }
        if (f_prev - f).abs() < options.loss_change_tol {
            termination = LbfgsTermination::SmallLossChange;
            break;
        }
        if max_abs(&g) < options.grad_tol {
            termination = LbfgsTermination::SmallGradient;
            break;
        }
    }

    let converged = matches!(
        termination,
        LbfgsTermination::LossBelowTolerance
            | LbfgsTermination::SmallLossChange
            | LbfgsTermination::SmallGradient
    );
    Ok(LbfgsOutcome {
        params: best_x,
        loss: best_f,
        iterations,
        termination,
        converged,
        loss_trace: trace,
    })
}

fn two_loop_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= alpha * y[i];
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y).max(1e-16);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += (alpha - beta) * s[i];
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct LineSearchResult {
    loss: f64,
    grad: Vec<f64>,
    t: f64,
}

/// Evaluate at `x + t d`; failures come back as an infinitely bad point so
/// the search backtracks away from them.
fn eval_along<O: Objective>(
    objective: &O,
    x: &[f64],
    d: &[f64],
    t: f64,
) -> (f64, Vec<f64>, f64) {
    let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
    match objective.value_grad(&trial) {
        Ok((f, g)) if f.is_finite() => {
            let gtd = dot(&g, d);
            (f, g, gtd)
        }
        _ => (f64::INFINITY, vec![0.0; x.len()], f64::INFINITY),
    }
}

fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, lo: f64, hi: f64) -> f64 {
    if !(f1.is_finite() && f2.is_finite() && g1.is_finite() && g2.is_finite()) {
        return 0.5 * (lo + hi);
    }
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_square = d1 * d1 - g1 * g2;
    if d2_square >= 0.0 {
        let d2 = d2_square.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_finite() {
            return min_pos.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

/// Strong Wolfe line search (bracket then zoom, cubic interpolation).
/// Returns `None` when no acceptable step was found.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<O: Objective>(
    objective: &O,
    x: &[f64],
    t0: f64,
    d: &[f64],
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    options: &LbfgsOptions,
) -> Option<LineSearchResult> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let tolerance_change = 1e-9;
    let d_norm = max_abs(d);

    let mut t = t0;
    let (mut f_new, mut g_new, mut gtd_new) = eval_along(objective, x, d, t);
    let mut ls_iter = 0;

    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut g_prev = g0.to_vec();
    let mut gtd_prev = gtd0;

    // bracketing phase
    let mut bracket: [f64; 2];
    let mut bracket_f: [f64; 2];
    let mut bracket_g: [Vec<f64>; 2];
    let mut bracket_gtd: [f64; 2];
    let mut done = false;

    loop {
        if ls_iter >= options.max_line_search {
            bracket = [0.0, t];
            bracket_f = [f0, f_new];
            bracket_g = [g0.to_vec(), g_new.clone()];
            bracket_gtd = [gtd0, gtd_new];
            break;
        }
        if f_new > f0 + C1 * t * gtd0 || (ls_iter > 1 && f_new >= f_prev) {
            bracket = [t_prev, t];
            bracket_f = [f_prev, f_new];
            bracket_g = [g_prev, g_new.clone()];
            bracket_gtd = [gtd_prev, gtd_new];
            break;
        }
        if gtd_new.abs() <= -C2 * gtd0 {
            bracket = [t, t];
            bracket_f = [f_new, f_new];
            bracket_g = [g_new.clone(), g_new.clone()];
            bracket_gtd = [gtd_new, gtd_new];
            done = true;
            break;
        }
        if gtd_new >= 0.0 {
            bracket = [t_prev, t];
            bracket_f = [f_prev, f_new];
            bracket_g = [g_prev, g_new.clone()];
            bracket_gtd = [gtd_prev, gtd_new];
            break;
        }
        let min_step = t + 0.01 * (t - t_prev);
        let max_step = t * 10.0;
        let tmp = t;
        t = cubic_interpolate(
            t_prev, f_prev, gtd_prev, t, f_new, gtd_new, min_step, max_step,
        );
        t_prev = tmp;
        f_prev = f_new;
        g_prev = g_new;
        gtd_prev = gtd_new;
        let e = eval_along(objective, x, d, t);
        f_new = e.0;
        g_new = e.1;
        gtd_new = e.2;
        ls_iter += 1;
    }

    // zoom phase
    let mut insuf_progress = false;
    let (mut low, mut high) = if bracket_f[0] <= bracket_f[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    while !done && ls_iter < options.max_line_search {
        if (bracket[1] - bracket[0]).abs() * d_norm < tolerance_change {
            break;
        }
        let lo = bracket[0].min(bracket[1]);
        let hi = bracket[0].max(bracket[1]);
        t = cubic_interpolate(
            bracket[0],
            bracket_f[0],
            bracket_gtd[0],
            bracket[1],
            bracket_f[1],
            bracket_gtd[1],
            lo,
            hi,
        );
        let eps = 0.1 * (hi - lo);
        if (hi - t).min(t - lo) < eps {
            if insuf_progress || t >= hi || t <= lo {
                t = if (t - hi).abs() < (t - lo).abs() {
                    hi - eps
                } else {
                    lo + eps
                };
                insuf_progress = false;
            } else {
                insuf_progress = true;
            }
        } else {
            insuf_progress = false;
        }

        let e = eval_along(objective, x, d, t);
        f_new = e.0;
        g_new = e.1;
        gtd_new = e.2;
        ls_iter += 1;

        if f_new > f0 + C1 * t * gtd0 || f_new >= bracket_f[low] {
            bracket[high] = t;
            bracket_f[high] = f_new;
            bracket_g[high] = g_new.clone();
            bracket_gtd[high] = gtd_new;
            let swap = bracket_f[0] > bracket_f[1];
            (low, high) = if swap { (1, 0) } else { (0, 1) };
        } else {
            if gtd_new.abs() <= -C2 * gtd0 {
                done = true;
            } else if gtd_new * (bracket[high] - bracket[low]) >= 0.0 {
                bracket[high] = bracket[low];
                bracket_f[high] = bracket_f[low];
                bracket_g[high] = bracket_g[low].clone();
                bracket_gtd[high] = bracket_gtd[low];
            }
            bracket[low] = t;
            bracket_f[low] = f_new;
            bracket_g[low] = g_new.clone();
            bracket_gtd[low] = gtd_new;
        }
    }

    let t_final = bracket[low];
    let f_final = bracket_f[low];
    let g_final = bracket_g[low].clone();
    if !f_final.is_finite() || f_final > f0 || t_final == 0.0 {
        return None;
    }
    Some(LineSearchResult {
        loss: f_final,
        grad: g_final,
        t: t_final,
    })
}

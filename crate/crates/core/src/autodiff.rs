//! Scalar reverse-mode differentiation on a tape, with second-order time
//! jets layered on top.
//!
//! The trainer's losses are scalar functions of a few thousand parameters
//! evaluated through trajectories `x(t)` and their first two time
//! derivatives. Time derivatives are cheap in forward mode (the only
//! "direction" is the scalar time input), so [`Jet`] carries value, first,
//! and second time derivative as three tape variables; every jet rule is
//! recorded as ordinary tape operations. One reverse sweep through the tape
//! then yields exact parameter gradients of anything built from jets,
//! including the derivative outputs.

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("loss evaluated non-finite (parameter 2-norm {param_norm:.6e})")]
    NonFiniteLoss { param_norm: f64 },
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    AddConst(u32),
    MulConst(u32),
    Tanh(u32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Relu(u32),
    Abs(u32),
    /// max(x, aux); gradient passes through when x >= aux.
    MaxConst(u32),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    aux: f64,
    value: f64,
}

/// Recording tape. Values are computed eagerly as operations are recorded;
/// `backward` replays the record once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    leaf_ids: Vec<u32>,
    zero: Var,
    one: Var,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let mut tape = Tape {
            nodes: Vec::with_capacity(1024),
            leaf_ids: Vec::new(),
            zero: Var(0),
            one: Var(1),
        };
        tape.zero = tape.push(Op::Const, 0.0, 0.0);
        tape.one = tape.push(Op::Const, 0.0, 1.0);
        tape
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut tape = Tape {
            nodes: Vec::with_capacity(nodes.max(2)),
            leaf_ids: Vec::new(),
            zero: Var(0),
            one: Var(1),
        };
        tape.zero = tape.push(Op::Const, 0.0, 0.0);
        tape.one = tape.push(Op::Const, 0.0, 1.0);
        tape
    }

    #[inline]
    fn push(&mut self, op: Op, aux: f64, value: f64) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { op, aux, value });
        Var(id)
    }

    #[inline]
    pub fn value(&self, x: Var) -> f64 {
        self.nodes[x.0 as usize].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input. Gradients come back in leaf creation order.
    pub fn leaf(&mut self, value: f64) -> Var {
        let v = self.push(Op::Leaf, 0.0, value);
        self.leaf_ids.push(v.0);
        v
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        if value == 0.0 {
            return self.zero;
        }
        if value == 1.0 {
            return self.one;
        }
        self.push(Op::Const, 0.0, value)
    }

    /// The cached constant zero.
    pub fn zero(&self) -> Var {
        self.zero
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        if a == self.zero {
            return b;
        }
        if b == self.zero {
            return a;
        }
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), 0.0, v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        if b == self.zero {
            return a;
        }
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), 0.0, v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        if a == self.zero || b == self.zero {
            return self.zero;
        }
        if a == self.one {
            return b;
        }
        if b == self.one {
            return a;
        }
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), 0.0, v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        if a == self.zero {
            return self.zero;
        }
        if b == self.one {
            return a;
        }
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a.0, b.0), 0.0, v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        if a == self.zero {
            return self.zero;
        }
        let v = -self.value(a);
        self.push(Op::Neg(a.0), 0.0, v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        if c == 0.0 {
            return a;
        }
        let v = self.value(a) + c;
        self.push(Op::AddConst(a.0), c, v)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        if a == self.zero || c == 1.0 {
            return a;
        }
        let v = self.value(a) * c;
        self.push(Op::MulConst(a.0), c, v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a.0), 0.0, v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a.0), 0.0, v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(Op::Ln(a.0), 0.0, v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).sqrt();
        self.push(Op::Sqrt(a.0), 0.0, v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).max(0.0);
        self.push(Op::Relu(a.0), 0.0, v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs();
        self.push(Op::Abs(a.0), 0.0, v)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).max(c);
        self.push(Op::MaxConst(a.0), c, v)
    }

    /// Squared value; convenience for the many sum-of-squares losses.
    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `x^e` for a variable base and variable exponent, computed as
    /// `exp(e * ln(max(x, floor)))`; the gradient with respect to the
    /// exponent flows through `ln(max(x, floor))`.
    pub fn pow_clamped(&mut self, x: Var, e: Var, floor: f64) -> Var {
        let clamped = self.max_const(x, floor);
        let l = self.ln(clamped);
        let el = self.mul(e, l);
        self.exp(el)
    }

    /// Euclidean norm of a 2-vector with a floor on the squared magnitude
    /// so the square root stays differentiable at the origin.
    pub fn norm2(&mut self, x: Var, y: Var) -> Var {
        let xx = self.mul(x, x);
        let yy = self.mul(y, y);
        let ss = self.add(xx, yy);
        let guarded = self.max_const(ss, 1e-24);
        self.sqrt(guarded)
    }

    /// Reverse sweep from `output`. Returns the output value and the
    /// gradient with respect to every leaf, in leaf creation order.
    pub fn backward(&self, output: Var) -> Result<(f64, Vec<f64>), AdError> {
        let value = self.value(output);
        if !value.is_finite() {
            let param_norm = self
                .leaf_ids
                .iter()
                .map(|&id| {
                    let v = self.nodes[id as usize].value;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            return Err(AdError::NonFiniteLoss { param_norm });
        }
        let mut adjoint = vec![0.0f64; self.nodes.len()];
        adjoint[output.0 as usize] = 1.0;
        for idx in (0..=output.0 as usize).rev() {
            let d = adjoint[idx];
            if d == 0.0 {
                continue;
            }
            let node = self.nodes[idx];
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    adjoint[a as usize] += d;
                    adjoint[b as usize] += d;
                }
                Op::Sub(a, b) => {
                    adjoint[a as usize] += d;
                    adjoint[b as usize] -= d;
                }
                Op::Mul(a, b) => {
                    adjoint[a as usize] += d * self.nodes[b as usize].value;
                    adjoint[b as usize] += d * self.nodes[a as usize].value;
                }
                Op::Div(a, b) => {
                    let bv = self.nodes[b as usize].value;
                    adjoint[a as usize] += d / bv;
                    adjoint[b as usize] -= d * node.value / bv;
                }
                Op::Neg(a) => adjoint[a as usize] -= d,
                Op::AddConst(a) => adjoint[a as usize] += d,
                Op::MulConst(a) => adjoint[a as usize] += d * node.aux,
                Op::Tanh(a) => {
                    adjoint[a as usize] += d * (1.0 - node.value * node.value);
                }
                Op::Exp(a) => adjoint[a as usize] += d * node.value,
                Op::Ln(a) => adjoint[a as usize] += d / self.nodes[a as usize].value,
                Op::Sqrt(a) => adjoint[a as usize] += d * 0.5 / node.value,
                Op::Relu(a) => {
                    if self.nodes[a as usize].value > 0.0 {
                        adjoint[a as usize] += d;
                    }
                }
                Op::Abs(a) => {
                    let av = self.nodes[a as usize].value;
                    if av > 0.0 {
                        adjoint[a as usize] += d;
                    } else if av < 0.0 {
                        adjoint[a as usize] -= d;
                    }
                }
                Op::MaxConst(a) => {
                    if self.nodes[a as usize].value >= node.aux {
                        adjoint[a as usize] += d;
                    }
                }
            }
        }
        let grad = self
            .leaf_ids
            .iter()
            .map(|&id| adjoint[id as usize])
            .collect();
        Ok((value, grad))
    }
}

/// Value and first two derivatives with respect to physical time, each a
/// tape variable so parameter gradients flow through all three.
#[derive(Clone, Copy, Debug)]
pub struct Jet {
    pub v: Var,
    pub d1: Var,
    pub d2: Var,
}

impl Jet {
    /// A quantity constant in time.
    pub fn constant(tape: &mut Tape, value: f64) -> Jet {
        let z = tape.zero();
        Jet {
            v: tape.constant(value),
            d1: z,
            d2: z,
        }
    }

    /// A time-constant differentiable parameter.
    pub fn from_leaf(tape: &Tape, v: Var) -> Jet {
        let z = tape.zero();
        Jet { v, d1: z, d2: z }
    }

    /// The time input itself: value `t`, first derivative `dt_scale`
    /// (the chain-rule factor of the normalization map), zero curvature.
    pub fn time_input(tape: &mut Tape, t: f64, dt_scale: f64) -> Jet {
        let z = tape.zero();
        Jet {
            v: tape.constant(t),
            d1: tape.constant(dt_scale),
            d2: z,
        }
    }

    pub fn add(tape: &mut Tape, a: Jet, b: Jet) -> Jet {
        Jet {
            v: tape.add(a.v, b.v),
            d1: tape.add(a.d1, b.d1),
            d2: tape.add(a.d2, b.d2),
        }
    }

    pub fn sub(tape: &mut Tape, a: Jet, b: Jet) -> Jet {
        Jet {
            v: tape.sub(a.v, b.v),
            d1: tape.sub(a.d1, b.d1),
            d2: tape.sub(a.d2, b.d2),
        }
    }

    /// Multiply by a time-constant variable (a network weight).
    pub fn scale_by(tape: &mut Tape, a: Jet, w: Var) -> Jet {
        Jet {
            v: tape.mul(a.v, w),
            d1: tape.mul(a.d1, w),
            d2: tape.mul(a.d2, w),
        }
    }

    pub fn mul_const(tape: &mut Tape, a: Jet, c: f64) -> Jet {
        Jet {
            v: tape.mul_const(a.v, c),
            d1: tape.mul_const(a.d1, c),
            d2: tape.mul_const(a.d2, c),
        }
    }

    /// Product rule through second order.
    pub fn mul(tape: &mut Tape, a: Jet, b: Jet) -> Jet {
        let v = tape.mul(a.v, b.v);
        let t1 = tape.mul(a.d1, b.v);
        let t2 = tape.mul(a.v, b.d1);
        let d1 = tape.add(t1, t2);
        let u1 = tape.mul(a.d2, b.v);
        let u2 = tape.mul(a.d1, b.d1);
        let u2 = tape.mul_const(u2, 2.0);
        let u3 = tape.mul(a.v, b.d2);
        let s = tape.add(u1, u2);
        let d2 = tape.add(s, u3);
        Jet { v, d1, d2 }
    }

    /// tanh through second order: with `s = 1 - tanh(u)^2`,
    /// `y'' = s u'' - 2 tanh(u) s (u')^2`.
    pub fn tanh(tape: &mut Tape, u: Jet) -> Jet {
        let t = tape.tanh(u.v);
        let tt = tape.mul(t, t);
        let ntt = tape.mul_const(tt, -1.0);
        let s = tape.add_const(ntt, 1.0);
        let d1 = tape.mul(s, u.d1);
        let lin = tape.mul(s, u.d2);
        let ts = tape.mul(t, s);
        let d1sq = tape.mul(u.d1, u.d1);
        let curve = tape.mul(ts, d1sq);
        let curve = tape.mul_const(curve, -2.0);
        let d2 = tape.add(lin, curve);
        Jet { v: t, d1, d2 }
    }
}

/// Evaluate a scalar loss built on a fresh tape and return its value and
/// gradient with respect to `params`.
pub fn gradient<F>(params: &[f64], build: F) -> Result<(f64, Vec<f64>), AdError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars = tape.leaves(params);
    let loss = build(&mut tape, &vars);
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Central-difference oracle used across the gradient tests.
    pub fn finite_difference<F: Fn(&[f64]) -> f64>(
        f: F,
        params: &[f64],
        coord: usize,
    ) -> f64 {
        let h = 1e-6 * params[coord].abs().max(1.0);
        let mut lo = params.to_vec();
        let mut hi = params.to_vec();
        lo[coord] -= h;
        hi[coord] += h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let params = [0.5, -1.25, 3.0, 0.0];
        let (value, grad) = gradient(&params, |t, vars| {
            let mut acc = t.zero();
            for &v in vars {
                let sq = t.square(v);
                acc = t.add(acc, sq);
            }
            acc
        })
        .unwrap();
        assert_relative_eq!(value, 0.25 + 1.5625 + 9.0, epsilon = 1e-14);
        for (g, p) in grad.iter().zip(params.iter()) {
            assert_relative_eq!(*g, 2.0 * p, epsilon = 1e-14);
        }
    }

    #[test]
    fn untouched_leaves_have_exactly_zero_gradient() {
        let params = [1.0, 2.0, 3.0];
        let (_, grad) = gradient(&params, |t, vars| t.square(vars[1])).unwrap();
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[2], 0.0);
        assert_eq!(grad[1], 4.0);
    }

    #[test]
    fn mixed_expression_matches_finite_differences() {
        let f = |p: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let vars = tape.leaves(p);
            let out = build_mixed(&mut tape, &vars);
            tape.value(out)
        };
        let params = [0.7, -0.3, 1.9, 0.45];
        let (_, grad) = gradient(&params, build_mixed).unwrap();
        for coord in 0..params.len() {
            let fd = finite_difference(f, &params, coord);
            assert_relative_eq!(grad[coord], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    fn build_mixed(t: &mut Tape, vars: &[Var]) -> Var {
        // tanh, exp/ln power, division, abs, relu, sqrt all in one scalar
        let p = t.pow_clamped(vars[2], vars[3], 1e-6);
        let th = t.tanh(vars[0]);
        let prod = t.mul(th, p);
        let n = t.norm2(vars[0], vars[1]);
        let q = t.div(prod, n);
        let a = t.abs(vars[1]);
        let r = t.relu(vars[0]);
        let s1 = t.add(q, a);
        let s2 = t.add(s1, r);
        t.square(s2)
    }

    #[test]
    fn tanh_derivative_identities_at_zero() {
        let mut tape = Tape::new();
        let u = Jet::time_input(&mut tape, 0.0, 1.0);
        let y = Jet::tanh(&mut tape, u);
        assert_eq!(tape.value(y.v), 0.0);
        assert_eq!(tape.value(y.d1), 1.0);
        assert_eq!(tape.value(y.d2), 0.0);
    }

    #[test]
    fn constant_jets_have_zero_derivatives() {
        let mut tape = Tape::new();
        let c = Jet::constant(&mut tape, 5.0);
        let y = Jet::tanh(&mut tape, c);
        assert_eq!(tape.value(y.d1), 0.0);
        assert_eq!(tape.value(y.d2), 0.0);
    }

    #[test]
    fn jet_product_rule() {
        // f(t) = tanh(t) * tanh(2t) at t = 0.3, derivatives vs central FD
        let eval = |t: f64| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let u = Jet::time_input(&mut tape, t, 1.0);
            let u2 = Jet::mul_const(&mut tape, u, 2.0);
            let a = Jet::tanh(&mut tape, u);
            let b = Jet::tanh(&mut tape, u2);
            let y = Jet::mul(&mut tape, a, b);
            (tape.value(y.v), tape.value(y.d1), tape.value(y.d2))
        };
        let h = 1e-5;
        let (v0, d1, d2) = eval(0.3);
        let (vp, _, _) = eval(0.3 + h);
        let (vm, _, _) = eval(0.3 - h);
        assert_relative_eq!(d1, (vp - vm) / (2.0 * h), max_relative = 1e-8);
        assert_relative_eq!(d2, (vp - 2.0 * v0 + vm) / (h * h), max_relative = 1e-4);
    }

    #[test]
    fn jets_are_linear() {
        // jet of a sum of functions equals the sum of the jets
        let mut tape = Tape::new();
        let u = Jet::time_input(&mut tape, 0.4, 2.0);
        let a = Jet::tanh(&mut tape, u);
        let half = Jet::mul_const(&mut tape, u, 0.5);
        let b = Jet::tanh(&mut tape, half);
        let sum_then = Jet::add(&mut tape, a, b);
        assert_relative_eq!(
            tape.value(sum_then.v),
            tape.value(a.v) + tape.value(b.v),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            tape.value(sum_then.d1),
            tape.value(a.d1) + tape.value(b.d1),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            tape.value(sum_then.d2),
            tape.value(a.d2) + tape.value(b.d2),
            epsilon = 1e-15
        );
    }

    #[test]
    fn gradient_flows_through_jet_derivatives() {
        // loss = (d/dt tanh(w t))^2 at t=0.5: dL/dw via tape vs FD
        let build = |t: &mut Tape, vars: &[Var]| -> Var {
            let u = Jet::time_input(t, 0.5, 1.0);
            let wu = Jet::scale_by(t, u, vars[0]);
            let y = Jet::tanh(t, wu);
            t.square(y.d1)
        };
        let params = [0.8];
        let (_, grad) = gradient(&params, build).unwrap();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let vars = tape.leaves(p);
            let out = build(&mut tape, &vars);
            tape.value(out)
        };
        let fd = finite_difference(f, &params, 0);
        assert_relative_eq!(grad[0], fd, max_relative = 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let params = [2.0];
        let err = gradient(&params, |t, vars| {
            let big = t.mul_const(vars[0], 1e308);
            t.exp(big)
        })
        .unwrap_err();
        match err {
            AdError::NonFiniteLoss { param_norm } => {
                assert_relative_eq!(param_norm, 2.0, epsilon = 1e-12)
            }
        }
    }
}

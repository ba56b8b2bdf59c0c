//! Reverse-mode automatic differentiation over real scalars.
//!
//! The [`Tape`] is an append-only list of nodes; a node's parents always have
//! smaller indices, so insertion order is a topological order. Every node keeps
//! its numeric local partials, which makes [`Tape::backward`] a single linear
//! sweep.
//!
//! [`Tape::grad_on_tape`] runs the same sweep but records the adjoint
//! arithmetic as new nodes. The gradients it returns are ordinary variables,
//! so a later `backward` differentiates *through* them. The meta-learned
//! optimizer relies on this: the update networks consume `∂R/∂W` and the
//! epoch loss is differentiated with respect to the network weights through
//! those gradients.
//!
//! Complex quantities are carried as real/imaginary pairs, see [`CVar`].

mod check;
mod complex;

pub use check::{finite_diff_check, FdReport};
pub use complex::CVar;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("variable {index} is not on this tape (tape holds {len} nodes)")]
    UnknownVariable { index: usize, len: usize },
}

/// Handle to a scalar recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// `a * c`; the constant is kept in `da`.
    Scale,
    /// `a + c`.
    Offset,
    Square,
    Sqrt,
    Exp,
    Ln,
    Sin,
    Cos,
    Relu,
    Abs,
}

impl Op {
    fn arity(self) -> u8 {
        match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }
}

/// One recorded operation: value, up to two parents and the local partials.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TapeNode {
    op: Op,
    a: u32,
    b: u32,
    value: f64,
    da: f64,
    db: f64,
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// `∂output/∂v`; zero for variables the output does not depend on.
    pub fn get(&self, v: Var) -> f64 {
        self.adj.get(v.index()).copied().unwrap_or(0.0)
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    #[inline]
    fn push(&mut self, op: Op, a: u32, b: u32, value: f64, da: f64, db: f64) -> Var {
        let idx = self.nodes.len();
        debug_assert!(idx < NONE as usize);
        self.nodes.push(TapeNode {
            op,
            a,
            b,
            value,
            da,
            db,
        });
        Var(idx as u32)
    }

    #[inline]
    fn val(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    /// Records a fresh leaf.
    pub fn var(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, NONE, NONE, value, 0.0, 0.0)
    }

    /// Same node kind as [`Tape::var`]; the name documents intent at call sites.
    pub fn constant(&mut self, value: f64) -> Var {
        self.var(value)
    }

    /// A leaf carrying `v`'s value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.val(v);
        self.var(value)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.val(v)
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.val(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a) + self.val(b);
        self.push(Op::Add, a.0, b.0, value, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a) - self.val(b);
        self.push(Op::Sub, a.0, b.0, value, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        self.push(Op::Mul, a.0, b.0, x * y, y, x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        let z = x / y;
        self.push(Op::Div, a.0, b.0, z, 1.0 / y, -z / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.val(a);
        self.push(Op::Neg, a.0, NONE, value, -1.0, 0.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a) * c;
        self.push(Op::Scale, a.0, NONE, value, c, 0.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a) + c;
        self.push(Op::Offset, a.0, NONE, value, 1.0, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.val(a);
        self.push(Op::Square, a.0, NONE, x * x, 2.0 * x, 0.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let z = self.val(a).sqrt();
        self.push(Op::Sqrt, a.0, NONE, z, 0.5 / z, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let z = self.val(a).exp();
        self.push(Op::Exp, a.0, NONE, z, z, 0.0)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.val(a);
        self.push(Op::Ln, a.0, NONE, x.ln(), 1.0 / x, 0.0)
    }

    pub fn log2(&mut self, a: Var) -> Var {
        let l = self.ln(a);
        self.scale(l, std::f64::consts::LOG2_E)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let x = self.val(a);
        self.push(Op::Sin, a.0, NONE, x.sin(), x.cos(), 0.0)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let x = self.val(a);
        self.push(Op::Cos, a.0, NONE, x.cos(), -x.sin(), 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let (z, d) = if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) };
        self.push(Op::Relu, a.0, NONE, z, d, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let d = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.push(Op::Abs, a.0, NONE, x.abs(), d, 0.0)
    }

    /// Left fold of additions; a zero constant for an empty slice.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// `Σ a_i b_i`.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        let mut acc: Option<Var> = None;
        for (&x, &y) in a.iter().zip(b) {
            let p = self.mul(x, y);
            acc = Some(match acc {
                None => p,
                Some(s) => self.add(s, p),
            });
        }
        acc.unwrap_or_else(|| self.constant(0.0))
    }

    fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.index() < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVariable {
                index: v.index(),
                len: self.nodes.len(),
            })
        }
    }

    /// Numeric reverse sweep from `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        self.check(output)?;
        let end = output.index();
        let mut adj = vec![0.0; end + 1];
        adj[end] = 1.0;
        for i in (0..=end).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            match node.op.arity() {
                0 => {}
                1 => adj[node.a as usize] += g * node.da,
                _ => {
                    adj[node.a as usize] += g * node.da;
                    adj[node.b as usize] += g * node.db;
                }
            }
        }
        Ok(Gradients { adj })
    }

    /// Gradient of `output` with respect to each of `wrt`, recorded on the tape.
    ///
    /// The entries of `wrt` must not depend on one another. Derivatives are
    /// total: any other input of `output` computed from a `wrt` entry carries
    /// that dependence along. Variables the output does not depend on get a
    /// zero constant.
    pub fn grad_on_tape(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let end = output.index();
        let start = match wrt.iter().map(|w| w.index()).filter(|&i| i <= end).min() {
            Some(s) => s,
            None => {
                let zero = self.constant(0.0);
                return Ok(vec![zero; wrt.len()]);
            }
        };

        let span = end + 1 - start;
        let mut dep = vec![false; span];
        for &w in wrt {
            if w.index() <= end {
                dep[w.index() - start] = true;
            }
        }
        for i in start..=end {
            let node = self.nodes[i];
            let hit = |p: u32| p != NONE && p as usize >= start && dep[p as usize - start];
            if node.op.arity() >= 1 && (hit(node.a) || (node.op.arity() == 2 && hit(node.b))) {
                dep[i - start] = true;
            }
        }
        if !dep[end - start] {
            let zero = self.constant(0.0);
            return Ok(vec![zero; wrt.len()]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; span];
        adj[end - start] = Some(self.constant(1.0));

        for i in (start..=end).rev() {
            if !dep[i - start] {
                continue;
            }
            let Some(g) = adj[i - start] else { continue };
            let node = self.nodes[i];
            let (a, b, z) = (Var(node.a), Var(node.b), Var(i as u32));
            match node.op {
                Op::Leaf => {}
                Op::Add => {
                    self.accumulate(&mut adj, &dep, start, a, g);
                    self.accumulate(&mut adj, &dep, start, b, g);
                }
                Op::Sub => {
                    self.accumulate(&mut adj, &dep, start, a, g);
                    if self.depends(&dep, start, b) {
                        let c = self.neg(g);
                        self.accumulate(&mut adj, &dep, start, b, c);
                    }
                }
                Op::Mul => {
                    if self.depends(&dep, start, a) {
                        let c = self.mul(g, b);
                        self.accumulate(&mut adj, &dep, start, a, c);
                    }
                    if self.depends(&dep, start, b) {
                        let c = self.mul(g, a);
                        self.accumulate(&mut adj, &dep, start, b, c);
                    }
                }
                Op::Div => {
                    if self.depends(&dep, start, a) {
                        let c = self.div(g, b);
                        self.accumulate(&mut adj, &dep, start, a, c);
                    }
                    if self.depends(&dep, start, b) {
                        let q = self.div(z, b);
                        let gq = self.mul(g, q);
                        let c = self.neg(gq);
                        self.accumulate(&mut adj, &dep, start, b, c);
                    }
                }
                Op::Neg => {
                    let c = self.neg(g);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
                Op::Scale | Op::Abs => {
                    if node.da != 0.0 {
                        let c = self.scale(g, node.da);
                        self.accumulate(&mut adj, &dep, start, a, c);
                    }
                }
                Op::Offset => self.accumulate(&mut adj, &dep, start, a, g),
                Op::Relu => {
                    if node.da != 0.0 {
                        self.accumulate(&mut adj, &dep, start, a, g);
                    }
                }
                Op::Square => {
                    let two_a = self.scale(a, 2.0);
                    let c = self.mul(g, two_a);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
                Op::Sqrt => {
                    let q = self.div(g, z);
                    let c = self.scale(q, 0.5);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
                Op::Exp => {
                    let c = self.mul(g, z);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
                Op::Ln => {
                    let c = self.div(g, a);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
                Op::Sin => {
                    let cos = self.cos(a);
                    let c = self.mul(g, cos);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
                Op::Cos => {
                    let sin = self.sin(a);
                    let gs = self.mul(g, sin);
                    let c = self.neg(gs);
                    self.accumulate(&mut adj, &dep, start, a, c);
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        let mut zero = None;
        for &w in wrt {
            let g = if w.index() <= end { adj[w.index() - start] } else { None };
            out.push(match g {
                Some(g) => g,
                None => *zero.get_or_insert_with(|| self.constant(0.0)),
            });
        }
        Ok(out)
    }

    #[inline]
    fn depends(&self, dep: &[bool], start: usize, v: Var) -> bool {
        v.index() >= start && dep[v.index() - start]
    }

    #[inline]
    fn accumulate(&mut self, adj: &mut [Option<Var>], dep: &[bool], start: usize, to: Var, contrib: Var) {
        if !self.depends(dep, start, to) {
            return;
        }
        let slot = to.index() - start;
        adj[slot] = Some(match adj[slot] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_gradient_is_one() {
        let mut t = Tape::new();
        let x = t.var(0.0);
        assert_eq!(t.backward(x).unwrap().get(x), 1.0);
    }

    #[test]
    fn add_gives_unit_gradients() {
        let mut t = Tape::new();
        let x = t.var(1.5);
        let y = t.var(-2.0);
        let z = t.add(x, y);
        let g = t.backward(z).unwrap();
        assert_eq!((g.get(x), g.get(y)), (1.0, 1.0));
    }

    #[test]
    fn square_and_product() {
        let mut t = Tape::new();
        let x = t.var(3.0);
        let sq = t.mul(x, x);
        assert_eq!(t.backward(sq).unwrap().get(x), 6.0);

        let a = t.var(2.0);
        let b = t.var(5.0);
        let p = t.mul(a, b);
        let g = t.backward(p).unwrap();
        assert_eq!((g.get(a), g.get(b)), (5.0, 2.0));
    }

    #[test]
    fn modulus_squared_partials() {
        let mut t = Tape::new();
        let re = t.var(0.7);
        let im = t.var(-1.3);
        let z = CVar { re, im };
        let m = z.abs2(&mut t);
        let g = t.backward(m).unwrap();
        assert!((g.get(re) - 1.4).abs() < 1e-15);
        assert!((g.get(im) + 2.6).abs() < 1e-15);
    }

    #[test]
    fn stale_handle_is_rejected() {
        let mut t = Tape::new();
        let x = t.var(1.0);
        t.clear();
        assert_eq!(
            t.backward(x).unwrap_err(),
            AutodiffError::UnknownVariable { index: 0, len: 0 }
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.var(2.0);
        let y = t.square(x);
        let d = t.detach(y);
        let z = t.mul(d, x);
        // z = 4 * x with the square treated as constant
        assert_eq!(t.backward(z).unwrap().get(x), 4.0);
    }

    #[test]
    fn second_order_through_recorded_gradient() {
        // f(x) = x^3 sin(x); f'(x) recorded on tape, then differentiated again.
        let x0 = 0.8_f64;
        let mut t = Tape::new();
        let x = t.var(x0);
        let x2 = t.square(x);
        let x3 = t.mul(x2, x);
        let s = t.sin(x);
        let f = t.mul(x3, s);
        let df = t.grad_on_tape(f, &[x]).unwrap()[0];
        let expected_d1 = 3.0 * x0 * x0 * x0.sin() + x0.powi(3) * x0.cos();
        assert!((t.value(df) - expected_d1).abs() < 1e-12);
        let d2 = t.backward(df).unwrap().get(x);
        let expected_d2 =
            6.0 * x0 * x0.sin() + 6.0 * x0 * x0 * x0.cos() - x0.powi(3) * x0.sin();
        assert!((d2 - expected_d2).abs() < 1e-12);
    }

    #[test]
    fn recorded_gradient_of_every_op_matches_numeric_sweep() {
        let mut t = Tape::new();
        let x = t.var(0.9);
        let y = t.var(1.7);
        let a = t.div(x, y);
        let b = t.exp(a);
        let c = t.ln(y);
        let d = t.sqrt(b);
        let e = t.cos(d);
        let f = t.sub(e, c);
        let g = t.abs(f);
        let h = t.relu(g);
        let i = t.neg(h);
        let j = t.offset(i, 3.0);
        let k = t.scale(j, -0.25);
        let l = t.mul(k, x);
        let numeric = t.backward(l).unwrap();
        let on_tape = t.grad_on_tape(l, &[x, y]).unwrap();
        assert!((t.value(on_tape[0]) - numeric.get(x)).abs() < 1e-14);
        assert!((t.value(on_tape[1]) - numeric.get(y)).abs() < 1e-14);
    }

    #[test]
    fn unrelated_variable_gets_zero() {
        let mut t = Tape::new();
        let x = t.var(1.0);
        let y = t.var(2.0);
        let z = t.square(x);
        let g = t.grad_on_tape(z, &[y, x]).unwrap();
        assert_eq!(t.value(g[0]), 0.0);
        assert_eq!(t.value(g[1]), 2.0);
    }

    #[test]
    fn identical_tapes_give_identical_gradients() {
        let build = || {
            let mut t = Tape::new();
            let xs: Vec<Var> = (0..6).map(|i| t.var(0.3 * i as f64 - 0.7)).collect();
            let s: Vec<Var> = xs.iter().map(|&x| t.sin(x)).collect();
            let d = t.dot(&xs, &s);
            let out = t.exp(d);
            t.backward(out).unwrap().collect(&xs)
        };
        let a = build();
        let b = build();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

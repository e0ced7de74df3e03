//! Tape-based reverse-mode differentiation over dense `f64` vectors.
//!
//! Every node holds a flat vector. Matrices only appear as the weight operand
//! of [`Tape::affine`], stored row-major. The tape is append-only, so node ids
//! are a topological order and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::normal::LN_SQRT_2PI;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        w: Var,
        b: Option<Var>,
        x: Var,
        cols: usize,
    },
    Act(Activation, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    SumElems(Var),
    SumScalars(Vec<(Var, f64)>),
    GaussLogPdf {
        x: Var,
        mean: Var,
        std: Var,
    },
    Reparam {
        mean: Var,
        std: Var,
        noise: Vec<f64>,
    },
}

/// Parameters of a store bound as leaves of a tape.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Adds every entry of `store` as a leaf.
    pub fn bind(&mut self, store: &ParameterStore) -> BoundParams {
        let vars = store
            .iter()
            .map(|(name, p)| (name.to_string(), self.constant(p.value().to_vec())))
            .collect();
        BoundParams { vars }
    }

    fn check_len(&self, context: &str, v: Var, expected: usize) -> Result<()> {
        let actual = self.values[v.0].len();
        if actual != expected {
            return Err(Error::shape(context, expected, actual));
        }
        Ok(())
    }

    /// `W x + b` with `W` stored row-major as `rows x cols`.
    pub fn affine(&mut self, context: &str, w: Var, b: Option<Var>, x: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check_len(context, x, cols)?;
        self.check_len(context, w, rows * cols)?;
        if let Some(b) = b {
            self.check_len(context, b, rows)?;
        }
        let (wv, xv) = (&self.values[w.0], &self.values[x.0]);
        let mut out = match b {
            Some(b) => self.values[b.0].clone(),
            None => vec![0.0; rows],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * cols..(i + 1) * cols];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(out, Op::Affine { w, b, x, cols }))
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let out = self.values[x.0].iter().map(|&v| act.apply(v)).collect();
        self.push(out, Op::Act(act, x))
    }

    fn binary(&mut self, context: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.check_len(context, b, self.values[a.0].len())?;
        Ok(self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.values[x.0].iter().map(|v| scale * v + shift).collect();
        self.push(out, Op::ScaleShift(x, scale))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].iter().sum();
        self.push(vec![s], Op::SumElems(x))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            self.check_len("weighted_sum", v, 1)?;
            s += w * self.values[v.0][0];
        }
        Ok(self.push(vec![s], Op::SumScalars(terms.to_vec())))
    }

    /// Scalar `sum_i log N(x_i | mean_i, std_i^2)`.
    pub fn gaussian_log_pdf(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        let n = self.values[x.0].len();
        self.check_len("gaussian_log_pdf mean", mean, n)?;
        self.check_len("gaussian_log_pdf std", std, n)?;
        let (xv, mv, sv) = (&self.values[x.0], &self.values[mean.0], &self.values[std.0]);
        let mut total = 0.0;
        for i in 0..n {
            let z = (xv[i] - mv[i]) / sv[i];
            total += -0.5 * z * z - sv[i].ln() - LN_SQRT_2PI;
        }
        Ok(self.push(vec![total], Op::GaussLogPdf { x, mean, std }))
    }

    /// Reparameterized draw `mean + std * noise`.
    pub fn reparam(&mut self, mean: Var, std: Var, noise: Vec<f64>) -> Result<Var> {
        let n = self.values[mean.0].len();
        self.check_len("reparam std", std, n)?;
        if noise.len() != n {
            return Err(Error::shape("reparam noise", n, noise.len()));
        }
        if let Some(s) = self.values[std.0].iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!("reparameterized sample needs std > 0, got {s}")));
        }
        let out = (0..n)
            .map(|i| self.values[mean.0][i] + self.values[std.0][i] * noise[i])
            .collect();
        Ok(self.push(out, Op::Reparam { mean, std, noise }))
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.values[output.0].len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[output.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], target: Var, len: usize) -> &mut Vec<f64> {
            grads[target.0].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let len_of = |v: Var| self.values[v.0].len();
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Affine { w, b, x, cols } => {
                    let (wv, xv) = (&self.values[w.0], &self.values[x.0]);
                    {
                        let gw = acc(&mut grads, *w, wv.len());
                        for (i, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                for (j, xj) in xv.iter().enumerate() {
                                    gw[i * cols + j] += gi * xj;
                                }
                            }
                        }
                    }
                    {
                        let gx = acc(&mut grads, *x, *cols);
                        for (i, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                let row = &wv[i * cols..(i + 1) * cols];
                                for (gxj, wij) in gx.iter_mut().zip(row) {
                                    *gxj += gi * wij;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (gb, gi) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                            *gb += gi;
                        }
                    }
                }
                Op::Act(act, x) => {
                    let (xv, yv) = (&self.values[x.0], &self.values[id]);
                    let gx = acc(&mut grads, *x, xv.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * act.derivative(xv[i], yv[i]);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(self.ops[id], Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (ga, gi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *gb += sign * gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    {
                        let ga = acc(&mut grads, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::ScaleShift(x, s) => {
                    for (gx, gi) in acc(&mut grads, *x, g.len()).iter_mut().zip(&g) {
                        *gx += s * gi;
                    }
                }
                Op::SumElems(x) => {
                    let n = len_of(*x);
                    for gx in acc(&mut grads, *x, n).iter_mut() {
                        *gx += g[0];
                    }
                }
                Op::SumScalars(terms) => {
                    for (v, w) in terms {
                        acc(&mut grads, *v, 1)[0] += w * g[0];
                    }
                }
                Op::GaussLogPdf { x, mean, std } => {
                    let n = len_of(*x);
                    let (xv, mv, sv) = (&self.values[x.0], &self.values[mean.0], &self.values[std.0]);
                    let mut dx = vec![0.0; n];
                    let mut ds = vec![0.0; n];
                    for i in 0..n {
                        let d = xv[i] - mv[i];
                        let s2 = sv[i] * sv[i];
                        dx[i] = -d / s2 * g[0];
                        ds[i] = (d * d / (s2 * sv[i]) - 1.0 / sv[i]) * g[0];
                    }
                    for (a, d) in acc(&mut grads, *x, n).iter_mut().zip(&dx) {
                        *a += d;
                    }
                    for (a, d) in acc(&mut grads, *mean, n).iter_mut().zip(&dx) {
                        *a -= d;
                    }
                    for (a, d) in acc(&mut grads, *std, n).iter_mut().zip(&ds) {
                        *a += d;
                    }
                }
                Op::Reparam { mean, std, noise } => {
                    for (gm, gi) in acc(&mut grads, *mean, g.len()).iter_mut().zip(&g) {
                        *gm += gi;
                    }
                    let gs = acc(&mut grads, *std, g.len());
                    for i in 0..g.len() {
                        gs[i] += g[i] * noise[i];
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; `None` if `v` does not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x`, step `h`.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let up = f(&p);
                p[i] = orig - h;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(700.0), 700.0);
        assert!(softplus(-700.0) >= 0.0 && softplus(-700.0).is_finite());
        assert!((softplus_inverse(softplus(0.3)) - 0.3).abs() < 1e-12);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // f(x) = sum over a graph exercising each op once.
        let eval = |x: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let xv = t.constant(x.to_vec());
            let w = t.constant(vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
            let b = t.constant(vec![0.05, -0.1]);
            let v = t.constant(vec![0.2, -0.6, 0.9]);
            let a = t.affine("test", w, Some(b), xv, 2, 3).unwrap();
            let s = t.activation(Activation::Softplus, a);
            let r = t.activation(Activation::Tanh, a);
            let g = t.activation(Activation::Sigmoid, a);
            let m = t.mul(s, r).unwrap();
            let d = t.sub(m, g).unwrap();
            let e = t.add(d, s).unwrap();
            let ss = t.scale_shift(e, 1.7, 0.2);
            let std = t.activation(Activation::Softplus, ss);
            let z = t.reparam(r, std, vec![0.4, -1.1]).unwrap();
            let lp = t.gaussian_log_pdf(z, g, std).unwrap();
            let relu = t.activation(Activation::Relu, xv);
            let xm = t.mul(relu, v).unwrap();
            let tot = t.sum(xm);
            let out = t.weighted_sum(&[(lp, 1.0), (tot, -0.5)]).unwrap();
            let grad = if grad {
                t.backward(out).get(xv).unwrap().to_vec()
            } else {
                vec![]
            };
            (t.scalar(out), grad)
        };
        let x = [0.7, -0.3, 1.2];
        let (_, analytic) = eval(&x, true);
        let numeric = numeric_grad(|p| eval(p, false).0, &x, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn reparam_rejects_zero_std_and_passes_mean_gradient() {
        let mut t = Tape::new();
        let m = t.constant(vec![1.0, 2.0]);
        let s0 = t.constant(vec![0.0, 1.0]);
        assert!(matches!(t.reparam(m, s0, vec![0.0, 0.0]), Err(Error::Domain(_))));

        let s = t.constant(vec![0.5, 0.5]);
        let z = t.reparam(m, s, vec![0.0, 0.0]).unwrap();
        assert_eq!(t.value(z), &[1.0, 2.0]);
        let out = t.sum(z);
        let g = t.backward(out);
        assert_eq!(g.get(m).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let w = t.constant(vec![0.0; 6]);
        let x = t.constant(vec![0.0; 2]);
        let err = t.affine("layer 0", w, None, x, 2, 3).unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                expected: 3,
                actual: 2,
                ..
            }
        ));
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn unrelated_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0]);
        let b = t.constant(vec![2.0]);
        let out = t.sum(a);
        let g = t.backward(out);
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap(), &[1.0]);
    }
}

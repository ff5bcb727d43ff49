//! Mixing measures, expert families and the softmax-gated regression function
//!
//! f_G(x) = Σ_i softmax(β1_i·x + β0_i) · h(x, η_i)
//!
//! Every expert family in this crate is an activation applied to an affine
//! map of a (possibly normalized) input, so η is always laid out as
//! `(a_1, ..., a_d, b)` and parameter derivatives of any order reduce to
//! `σ^(|τ|)(z) · Π u_i^τ_i`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

/// Highest derivative order served for Sigmoid, Tanh and polynomial activations.
pub const MAX_DERIVATIVE_ORDER: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Gelu,
    /// σ(z) = z^p
    Poly(u32),
}

/// Coefficients (ascending powers of s) of the polynomials P_n with
/// σ^(n)(z) = P_n(σ(z)), generated by P_{n+1}(s) = P_n'(s)·ds/dz.
fn derivative_polynomials(ds: &[f64]) -> Vec<Vec<f64>> {
    let mut table = vec![vec![0.0, 1.0]];
    for n in 0..MAX_DERIVATIVE_ORDER {
        let prev = &table[n];
        let deriv: Vec<f64> = prev
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| c * i as f64)
            .collect();
        let mut next = vec![0.0; deriv.len() + ds.len() - 1];
        for (i, a) in deriv.iter().enumerate() {
            for (j, b) in ds.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        table.push(next);
    }
    table
}

fn sigmoid_table() -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    // σ' = s - s²
    TABLE.get_or_init(|| derivative_polynomials(&[0.0, 1.0, -1.0]))
}

fn tanh_table() -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    // tanh' = 1 - t²
    TABLE.get_or_init(|| derivative_polynomials(&[1.0, 0.0, -1.0]))
}

fn horner(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

impl Activation {
    /// Highest derivative order `derivative` can evaluate.
    pub fn max_order(self) -> usize {
        match self {
            Activation::Gelu => 2,
            _ => MAX_DERIVATIVE_ORDER,
        }
    }

    /// τ-th derivative of the activation at `z`; order 0 is the activation itself.
    pub fn derivative(self, order: usize, z: f64) -> Result<f64> {
        if order > self.max_order() {
            return Err(MoeError::Capability(format!(
                "{self} derivatives are available up to order {}, requested {order}",
                self.max_order()
            )));
        }
        Ok(match self {
            Activation::Sigmoid => match order {
                0 => sigmoid(z),
                1 => {
                    let s = sigmoid(z);
                    s * (1.0 - s)
                }
                _ => horner(&sigmoid_table()[order], sigmoid(z)),
            },
            Activation::Tanh => horner(&tanh_table()[order], z.tanh()),
            Activation::Gelu => match order {
                0 => z * normal_cdf(z),
                1 => normal_cdf(z) + z * normal_pdf(z),
                _ => normal_pdf(z) * (2.0 - z * z),
            },
            Activation::Poly(p) => {
                let p = p as usize;
                if order > p {
                    0.0
                } else {
                    let falling: f64 = ((p - order + 1)..=p).map(|i| i as f64).product();
                    falling * z.powi((p - order) as i32)
                }
            }
        })
    }

    /// (σ(z), σ'(z)) without table lookups.
    #[inline]
    pub(crate) fn value_and_slope(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Gelu => {
                let c = normal_cdf(z);
                (z * c, c + z * normal_pdf(z))
            }
            Activation::Poly(1) => (z, 1.0),
            Activation::Poly(p) => {
                let lower = z.powi(p as i32 - 1);
                (lower * z, p as f64 * lower)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Gelu => f.write_str("gelu"),
            Activation::Poly(p) => write!(f, "poly{p}"),
        }
    }
}

impl FromStr for Activation {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => match other.strip_prefix("poly").map(str::parse::<u32>) {
                Some(Ok(p)) if p >= 1 => Ok(Activation::Poly(p)),
                _ => Err(MoeError::input(format!("unknown activation `{other}`"))),
            },
        }
    }
}

/// Expert family h(x, η) shared by every atom of a mixing measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertSpec {
    /// a·x + b
    Linear,
    /// (a·x + b)^p
    Polynomial(u32),
    /// σ(a·x + b)
    Ridge(Activation),
    /// σ(a·x/‖x‖ + b), with x/‖x‖ taken as the zero vector at x = 0
    NormalizedRidge(Activation),
}

impl ExpertSpec {
    pub fn activation(self) -> Activation {
        match self {
            ExpertSpec::Linear => Activation::Poly(1),
            ExpertSpec::Polynomial(p) => Activation::Poly(p),
            ExpertSpec::Ridge(a) | ExpertSpec::NormalizedRidge(a) => a,
        }
    }

    /// Length q of η for input dimension d.
    pub fn param_dim(self, d: usize) -> usize {
        d + 1
    }

    pub fn validate(self) -> Result<()> {
        match self.activation() {
            Activation::Poly(0) => Err(MoeError::input("polynomial degree must be at least 1")),
            _ => Ok(()),
        }
    }

    /// Writes the input feature u the affine map acts on.
    #[inline]
    pub(crate) fn feature_into(self, x: &[f64], u: &mut [f64]) {
        u.copy_from_slice(x);
        if let ExpertSpec::NormalizedRidge(_) = self {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                u.iter_mut().for_each(|v| *v /= norm);
            } else {
                u.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check(self, eta: &[f64], x: &[f64]) -> Result<()> {
        self.validate()?;
        if eta.len() != self.param_dim(x.len()) {
            return Err(MoeError::input(format!(
                "expert parameter length {} does not match d + 1 = {}",
                eta.len(),
                x.len() + 1
            )));
        }
        Ok(())
    }

    fn pre_activation(self, eta: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let d = x.len();
        let mut u = vec![0.0; d];
        self.feature_into(x, &mut u);
        let z = eta[d] + eta[..d].iter().zip(&u).map(|(a, v)| a * v).sum::<f64>();
        (z, u)
    }

    /// h(x, η).
    pub fn eval(self, eta: &[f64], x: &[f64]) -> Result<f64> {
        self.check(eta, x)?;
        let (z, _) = self.pre_activation(eta, x);
        Ok(self.activation().value_and_slope(z).0)
    }

    /// h(x, η) together with ∂h/∂η (written into `grad`, length d + 1).
    pub fn eval_with_grad(self, eta: &[f64], x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check(eta, x)?;
        let d = x.len();
        let (z, u) = self.pre_activation(eta, x);
        let (value, slope) = self.activation().value_and_slope(z);
        for (g, v) in grad[..d].iter_mut().zip(&u) {
            *g = slope * v;
        }
        grad[d] = slope;
        Ok(value)
    }

    /// Mixed partial ∂^{|τ|} h / ∂η^τ at (x, η), with τ indexed like η.
    pub fn param_derivative(self, eta: &[f64], x: &[f64], tau: &[usize]) -> Result<f64> {
        self.check(eta, x)?;
        let d = x.len();
        if tau.len() != d + 1 {
            return Err(MoeError::input("derivative multi-index must have length d + 1"));
        }
        let (z, u) = self.pre_activation(eta, x);
        let order: usize = tau.iter().sum();
        let monomial: f64 = u
            .iter()
            .zip(tau)
            .map(|(v, &t)| v.powi(t as i32))
            .product();
        Ok(self.activation().derivative(order, z)? * monomial)
    }

    /// True when η = (a, b) can be split for the D2/D3 losses.
    pub fn has_affine_layout(self) -> bool {
        true
    }
}

impl fmt::Display for ExpertSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertSpec::Linear => f.write_str("linear"),
            ExpertSpec::Polynomial(p) => write!(f, "poly{p}"),
            ExpertSpec::Ridge(a) => write!(f, "ridge-{a}"),
            ExpertSpec::NormalizedRidge(a) => write!(f, "normalized-ridge-{a}"),
        }
    }
}

impl FromStr for ExpertSpec {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(ExpertSpec::Linear);
        }
        if let Some(rest) = s.strip_prefix("normalized-ridge-") {
            return rest.parse().map(ExpertSpec::NormalizedRidge);
        }
        if let Some(rest) = s.strip_prefix("ridge-") {
            return rest.parse().map(ExpertSpec::Ridge);
        }
        if let Some(Ok(p)) = s.strip_prefix("poly").map(str::parse::<u32>) {
            if p >= 1 {
                return Ok(ExpertSpec::Polynomial(p));
            }
        }
        Err(MoeError::input(format!("unknown expert family `{s}`")))
    }
}

impl Serialize for ExpertSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExpertSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One gating/expert component: weight exp(β0), gate slope β1, expert parameters η.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub eta: Vec<f64>,
}

impl Atom {
    pub fn new(beta0: f64, beta1: Vec<f64>, eta: Vec<f64>) -> Self {
        Atom { beta0, beta1, eta }
    }

    /// Atom with an (a, b) expert layout.
    pub fn affine(beta0: f64, beta1: Vec<f64>, a: Vec<f64>, b: f64) -> Self {
        let mut eta = a;
        eta.push(b);
        Atom { beta0, beta1, eta }
    }

    pub fn weight(&self) -> f64 {
        self.beta0.exp()
    }

    /// Slope part `a` of η.
    pub fn a(&self) -> &[f64] {
        &self.eta[..self.eta.len() - 1]
    }

    /// Intercept `b` of η.
    pub fn b(&self) -> f64 {
        self.eta[self.eta.len() - 1]
    }

    /// The location ω = (β1, η) used for Voronoi assignment.
    pub fn location(&self) -> impl Iterator<Item = f64> + '_ {
        self.beta1.iter().chain(&self.eta).copied()
    }
}

/// Per-atom partial derivatives of f_G(x).
#[derive(Clone, Debug, PartialEq)]
pub struct AtomGrad {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub eta: Vec<f64>,
}

/// G = Σ_i exp(β0_i) δ_(β1_i, η_i) with a shared expert family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct MixingMeasure {
    expert: ExpertSpec,
    atoms: Vec<Atom>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureRepr {
    expert: ExpertSpec,
    atoms: Vec<Atom>,
}

impl TryFrom<MeasureRepr> for MixingMeasure {
    type Error = MoeError;
    fn try_from(r: MeasureRepr) -> Result<Self> {
        MixingMeasure::new(r.expert, r.atoms)
    }
}

impl From<MixingMeasure> for MeasureRepr {
    fn from(m: MixingMeasure) -> Self {
        MeasureRepr {
            expert: m.expert,
            atoms: m.atoms,
        }
    }
}

impl MixingMeasure {
    pub fn new(expert: ExpertSpec, atoms: Vec<Atom>) -> Result<Self> {
        expert.validate()?;
        let first = atoms
            .first()
            .ok_or_else(|| MoeError::input("a mixing measure needs at least one atom"))?;
        let d = first.beta1.len();
        if d == 0 {
            return Err(MoeError::input("input dimension must be at least 1"));
        }
        let q = expert.param_dim(d);
        for (i, atom) in atoms.iter().enumerate() {
            if atom.beta1.len() != d {
                return Err(MoeError::input(format!(
                    "atom {i}: gate slope has length {}, expected {d}",
                    atom.beta1.len()
                )));
            }
            if atom.eta.len() != q {
                return Err(MoeError::input(format!(
                    "atom {i}: expert parameters have length {}, expected {q}",
                    atom.eta.len()
                )));
            }
            let finite = atom.beta0.is_finite()
                && atom.beta1.iter().chain(&atom.eta).all(|v| v.is_finite());
            if !finite {
                return Err(MoeError::input(format!("atom {i} has non-finite parameters")));
            }
        }
        Ok(MixingMeasure { expert, atoms })
    }

    /// The two-expert ground truth used by the simulation study: gates
    /// (β0, β1) = (0, 1) and (0, 0), experts (a, b) = (−1, 2) and (1, 2), d = 1.
    pub fn reference_truth(expert: ExpertSpec) -> Result<Self> {
        MixingMeasure::new(
            expert,
            vec![
                Atom::affine(0.0, vec![1.0], vec![-1.0], 2.0),
                Atom::affine(0.0, vec![0.0], vec![1.0], 2.0),
            ],
        )
    }

    pub fn expert(&self) -> ExpertSpec {
        self.expert
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].beta1.len()
    }

    pub fn param_dim(&self) -> usize {
        self.expert.param_dim(self.dim())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(Atom::weight).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(MoeError::input(format!(
                "input has length {}, model dimension is {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Softmax gate over β1_i·x + β0_i.
    pub fn gate_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut w: Vec<f64> = self
            .atoms
            .iter()
            .map(|a| a.beta0 + dot(&a.beta1, x))
            .collect();
        softmax_in_place(&mut w);
        Ok(w)
    }

    /// h(x, η_i) for every atom.
    pub fn expert_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.atoms.iter().map(|a| self.expert.eval(&a.eta, x)).collect()
    }

    /// f_G(x).
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let w = self.gate_weights(x)?;
        let h = self.expert_values(x)?;
        Ok(w.iter().zip(&h).map(|(w, h)| w * h).sum())
    }

    /// Analytic gradient of f_G(x) with respect to every atom's parameters.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<AtomGrad>> {
        self.check_input(x)?;
        let d = self.dim();
        let w = self.gate_weights(x)?;
        let mut eta_grads = Vec::with_capacity(self.atoms.len());
        let mut h = Vec::with_capacity(self.atoms.len());
        for atom in &self.atoms {
            let mut g = vec![0.0; d + 1];
            h.push(self.expert.eval_with_grad(&atom.eta, x, &mut g)?);
            eta_grads.push(g);
        }
        let f: f64 = w.iter().zip(&h).map(|(w, h)| w * h).sum();
        Ok(w.iter()
            .zip(&h)
            .zip(eta_grads)
            .map(|((&wi, &hi), g)| {
                let gate = wi * (hi - f);
                AtomGrad {
                    beta0: gate,
                    beta1: x.iter().map(|v| v * gate).collect(),
                    eta: g.into_iter().map(|v| v * wi).collect(),
                }
            })
            .collect())
    }

    /// Returns a copy with every atom's (β0, β1) shifted by (−c0, −v).
    /// Leaves f_G unchanged.
    pub fn translated(&self, c0: f64, v: &[f64]) -> MixingMeasure {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                beta0: a.beta0 - c0,
                beta1: a.beta1.iter().zip(v).map(|(b, s)| b - s).collect(),
                eta: a.eta.clone(),
            })
            .collect();
        MixingMeasure {
            expert: self.expert,
            atoms,
        }
    }

    /// Parameters flattened atom by atom as [β0, β1 (d), η (d + 1)].
    pub fn to_flat(&self) -> Vec<f64> {
        self.atoms
            .iter()
            .flat_map(|a| std::iter::once(a.beta0).chain(a.beta1.iter().copied()).chain(a.eta.iter().copied()))
            .collect()
    }

    /// Inverse of [`MixingMeasure::to_flat`].
    pub fn from_flat(expert: ExpertSpec, d: usize, flat: &[f64]) -> Result<Self> {
        let stride = 2 * d + 2;
        if d == 0 || flat.is_empty() || flat.len() % stride != 0 {
            return Err(MoeError::input("flat parameter vector has the wrong length"));
        }
        let atoms = flat
            .chunks(stride)
            .map(|c| Atom::new(c[0], c[1..=d].to_vec(), c[d + 1..].to_vec()))
            .collect();
        MixingMeasure::new(expert, atoms)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Allocation-free evaluation of f_G and its gradient on the flat layout of
/// [`MixingMeasure::to_flat`]. Used by the training loop.
#[derive(Clone, Debug)]
pub(crate) struct FlatModel {
    expert: ExpertSpec,
    activation: Activation,
    d: usize,
    k: usize,
    weights: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    feature: Vec<f64>,
}

impl FlatModel {
    pub(crate) fn new(expert: ExpertSpec, d: usize, k: usize) -> Self {
        FlatModel {
            expert,
            activation: expert.activation(),
            d,
            k,
            weights: vec![0.0; k],
            values: vec![0.0; k],
            slopes: vec![0.0; k],
            feature: vec![0.0; d],
        }
    }

    pub(crate) fn stride(&self) -> usize {
        2 * self.d + 2
    }

    /// Evaluates f at `x`, caching what `accumulate_grad` needs.
    #[inline]
    pub(crate) fn forward(&mut self, params: &[f64], x: &[f64]) -> f64 {
        let d = self.d;
        let stride = self.stride();
        self.expert.feature_into(x, &mut self.feature);
        let mut max = f64::NEG_INFINITY;
        for i in 0..self.k {
            let p = &params[i * stride..(i + 1) * stride];
            let logit = p[0] + dot(&p[1..=d], x);
            self.weights[i] = logit;
            max = max.max(logit);
            let z = p[2 * d + 1] + dot(&p[d + 1..=2 * d], &self.feature);
            let (v, s) = self.activation.value_and_slope(z);
            self.values[i] = v;
            self.slopes[i] = s;
        }
        let mut total = 0.0;
        for w in self.weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        let mut f = 0.0;
        for i in 0..self.k {
            self.weights[i] /= total;
            f += self.weights[i] * self.values[i];
        }
        f
    }

    /// Adds `scale · ∂f/∂params` at the last `forward` point into `acc`.
    #[inline]
    pub(crate) fn accumulate_grad(&self, x: &[f64], f: f64, scale: f64, acc: &mut [f64]) {
        let d = self.d;
        let stride = self.stride();
        for i in 0..self.k {
            let g = &mut acc[i * stride..(i + 1) * stride];
            let w = self.weights[i];
            let gate = scale * w * (self.values[i] - f);
            g[0] += gate;
            for j in 0..d {
                g[1 + j] += gate * x[j];
            }
            let expert = scale * w * self.slopes[i];
            for j in 0..d {
                g[d + 1 + j] += expert * self.feature[j];
            }
            g[2 * d + 1] += expert;
        }
    }
}

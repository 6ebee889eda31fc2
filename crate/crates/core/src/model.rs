//! The parametric model zoo: each family maps a parameter vector to a
//! transition matrix and exposes first/second derivatives of the cell
//! log-probabilities plus stationary-distribution scores, analytically
//! where a closed form exists and by central differences otherwise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::chain::{StateSpace, StationaryDistribution, TransitionMatrix};
use crate::error::{Error, Result};
use crate::scalar::{cast, fd_step, Scalar};

/// A value attached to every transition-matrix cell, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PerCell<V> {
    n_states: usize,
    data: Vec<V>,
}

impl<V> PerCell<V> {
    fn from_fn(n_states: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(n_states * n_states);
        for a in 0..n_states {
            for b in 0..n_states {
                data.push(f(a, b));
            }
        }
        Self { n_states, data }
    }

    pub fn get(&self, a: usize, b: usize) -> &V {
        &self.data[a * self.n_states + b]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// Model family plus its fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec<T: Scalar> {
    /// Two states, one free flip probability.
    SymmetricTwoState,
    /// Two states, transition probabilities `alpha` (0 to 1) and `beta` (1 to 0).
    GeneralTwoState,
    /// `P = (1-rho) 1 p' + rho I`; `p` either fixed or estimated.
    Equicorrelation {
        n_states: usize,
        p_known: Option<Vec<T>>,
    },
    /// The three-state chain with off-diagonal rates `alpha`, `beta`.
    ThreeState,
    /// Binary chain with symmetric interaction strength `beta`.
    Ising1d,
    /// Birth-death band with reflecting barriers and right-step chance `p`.
    ReflectingWalk { n_states: usize },
    /// Four-state nucleotide substitution model with rates
    /// `(alpha, beta, gamma, delta)` over states A, G, C, T.
    Kimura4,
    /// Six-parameter extension splitting `gamma` and `delta` by row type.
    Kimura6,
    /// All `S(S-1)` transition probabilities free (row-major, first
    /// `S-1` columns of each row).
    Saturated { n_states: usize },
}

impl<T: Scalar> ModelSpec<T> {
    pub fn family_name(&self) -> &'static str {
        match self {
            ModelSpec::SymmetricTwoState => "symmetric-two-state",
            ModelSpec::GeneralTwoState => "general-two-state",
            ModelSpec::Equicorrelation { .. } => "equicorrelation",
            ModelSpec::ThreeState => "three-state",
            ModelSpec::Ising1d => "ising",
            ModelSpec::ReflectingWalk { .. } => "reflecting-walk",
            ModelSpec::Kimura4 => "kimura4",
            ModelSpec::Kimura6 => "kimura6",
            ModelSpec::Saturated { .. } => "saturated",
        }
    }
}

/// One block of the open parameter domain; joint constraints that couple
/// blocks (the Kimura inequalities, the equicorrelation floor on `rho`)
/// live in [`ParametricModel::in_domain`].
#[derive(Debug, Clone, PartialEq)]
pub enum DomainBlock<T: Scalar> {
    /// An open interval for one coordinate; `None` means unbounded.
    Interval {
        index: usize,
        lo: Option<T>,
        hi: Option<T>,
    },
    /// Coordinates that are positive and sum to less than one.
    Simplex { indices: Vec<usize> },
}

/// Smooth bijection between the unconstrained space and the open box /
/// simplex part of the domain (logit, log and additive-logistic maps).
#[derive(Debug, Clone)]
pub struct Reparam<T: Scalar> {
    blocks: Vec<DomainBlock<T>>,
    dim: usize,
}

impl<T: Scalar> Reparam<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_theta(&self, z: &DVector<T>) -> DVector<T> {
        let mut theta = DVector::zeros(self.dim);
        for block in &self.blocks {
            match block {
                DomainBlock::Interval { index, lo, hi } => {
                    let zi = z[*index];
                    theta[*index] = match (lo, hi) {
                        (Some(lo), Some(hi)) => {
                            let sig = T::one() / (T::one() + (-zi).exp());
                            *lo + (*hi - *lo) * sig
                        }
                        (Some(lo), None) => *lo + zi.exp(),
                        (None, Some(hi)) => *hi - zi.exp(),
                        (None, None) => zi,
                    };
                }
                DomainBlock::Simplex { indices } => {
                    let mut denom = T::one();
                    for &i in indices {
                        denom += z[i].exp();
                    }
                    for &i in indices {
                        theta[i] = z[i].exp() / denom;
                    }
                }
            }
        }
        theta
    }

    pub fn to_z(&self, theta: &DVector<T>) -> DVector<T> {
        let mut z = DVector::zeros(self.dim);
        for block in &self.blocks {
            match block {
                DomainBlock::Interval { index, lo, hi } => {
                    let t = theta[*index];
                    z[*index] = match (lo, hi) {
                        (Some(lo), Some(hi)) => {
                            let frac = (t - *lo) / (*hi - *lo);
                            (frac / (T::one() - frac)).ln()
                        }
                        (Some(lo), None) => (t - *lo).ln(),
                        (None, Some(hi)) => (*hi - t).ln(),
                        (None, None) => t,
                    };
                }
                DomainBlock::Simplex { indices } => {
                    let mut rest = T::one();
                    for &i in indices {
                        rest -= theta[i];
                    }
                    for &i in indices {
                        z[i] = (theta[i] / rest).ln();
                    }
                }
            }
        }
        z
    }

    /// Jacobian `d theta / d z`, block diagonal.
    pub fn jacobian(&self, z: &DVector<T>) -> DMatrix<T> {
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for block in &self.blocks {
            match block {
                DomainBlock::Interval { index, lo, hi } => {
                    let zi = z[*index];
                    jac[(*index, *index)] = match (lo, hi) {
                        (Some(lo), Some(hi)) => {
                            let sig = T::one() / (T::one() + (-zi).exp());
                            (*hi - *lo) * sig * (T::one() - sig)
                        }
                        (Some(_), None) => zi.exp(),
                        (None, Some(_)) => -zi.exp(),
                        (None, None) => T::one(),
                    };
                }
                DomainBlock::Simplex { indices } => {
                    let mut denom = T::one();
                    for &i in indices {
                        denom += z[i].exp();
                    }
                    for &i in indices {
                        let ti = z[i].exp() / denom;
                        for &j in indices {
                            let tj = z[j].exp() / denom;
                            let delta = if i == j { T::one() } else { T::zero() };
                            jac[(i, j)] = ti * (delta - tj);
                        }
                    }
                }
            }
        }
        jac
    }
}

/// A concrete parametric chain model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel<T: Scalar> {
    spec: ModelSpec<T>,
    states: StateSpace,
    theta_names: Vec<String>,
}

impl<T: Scalar> ParametricModel<T> {
    pub fn new(spec: ModelSpec<T>) -> Result<Self> {
        let states = match &spec {
            ModelSpec::SymmetricTwoState | ModelSpec::GeneralTwoState | ModelSpec::Ising1d => {
                StateSpace::new(vec!["0", "1"])?
            }
            ModelSpec::ThreeState => StateSpace::of_size(3)?,
            ModelSpec::Kimura4 | ModelSpec::Kimura6 => StateSpace::dna(),
            ModelSpec::Equicorrelation { n_states, p_known } => {
                if *n_states < 2 {
                    return Err(Error::InvalidSpec(
                        "equicorrelation needs at least two states".into(),
                    ));
                }
                if let Some(p) = p_known {
                    if p.len() != *n_states {
                        return Err(Error::InvalidSpec(format!(
                            "known p has length {}, expected {}",
                            p.len(),
                            n_states
                        )));
                    }
                    let mut sum = T::zero();
                    for &v in p {
                        if v <= T::zero() {
                            return Err(Error::InvalidSpec(
                                "known p entries must be positive".into(),
                            ));
                        }
                        sum += v;
                    }
                    if (sum - T::one()).abs() > cast(1e-10) {
                        return Err(Error::InvalidSpec("known p must sum to 1".into()));
                    }
                }
                StateSpace::of_size(*n_states)?
            }
            ModelSpec::ReflectingWalk { n_states } => {
                if *n_states < 3 {
                    return Err(Error::InvalidSpec(
                        "reflecting walk needs at least three states".into(),
                    ));
                }
                StateSpace::of_size(*n_states)?
            }
            ModelSpec::Saturated { n_states } => StateSpace::of_size(*n_states)?,
        };
        let theta_names = Self::names_for(&spec, &states);
        Ok(Self {
            spec,
            states,
            theta_names,
        })
    }

    fn names_for(spec: &ModelSpec<T>, states: &StateSpace) -> Vec<String> {
        match spec {
            ModelSpec::SymmetricTwoState => vec!["theta".into()],
            ModelSpec::GeneralTwoState => vec!["alpha".into(), "beta".into()],
            ModelSpec::Equicorrelation { n_states, p_known } => {
                let mut names = vec!["rho".to_string()];
                if p_known.is_none() {
                    for b in 1..*n_states {
                        names.push(format!("p{b}"));
                    }
                }
                names
            }
            ModelSpec::ThreeState => vec!["alpha".into(), "beta".into()],
            ModelSpec::Ising1d => vec!["beta".into()],
            ModelSpec::ReflectingWalk { .. } => vec!["p".into()],
            ModelSpec::Kimura4 => vec![
                "alpha".into(),
                "beta".into(),
                "gamma".into(),
                "delta".into(),
            ],
            ModelSpec::Kimura6 => vec![
                "alpha".into(),
                "beta".into(),
                "gamma1".into(),
                "gamma2".into(),
                "delta1".into(),
                "delta2".into(),
            ],
            ModelSpec::Saturated { n_states } => {
                let mut names = Vec::with_capacity(n_states * (n_states - 1));
                for a in 0..*n_states {
                    for b in 0..n_states - 1 {
                        names.push(format!("p_{}_{}", states.label(a), states.label(b)));
                    }
                }
                names
            }
        }
    }

    pub fn spec(&self) -> &ModelSpec<T> {
        &self.spec
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.size()
    }

    pub fn dim(&self) -> usize {
        self.theta_names.len()
    }

    pub fn theta_names(&self) -> &[String] {
        &self.theta_names
    }

    /// The full equicorrelation probability vector at `theta` (known or
    /// reconstructed from the free coordinates).
    fn equi_p(&self, theta: &DVector<T>) -> Vec<T> {
        match &self.spec {
            ModelSpec::Equicorrelation { n_states, p_known } => match p_known {
                Some(p) => p.clone(),
                None => {
                    let mut p = Vec::with_capacity(*n_states);
                    let mut rest = T::one();
                    for b in 1..*n_states {
                        p.push(theta[b]);
                        rest -= theta[b];
                    }
                    p.push(rest);
                    p
                }
            },
            _ => unreachable!("equi_p is only called for equicorrelation"),
        }
    }

    /// Strict membership in the open parameter domain, including the joint
    /// linear constraints.
    pub fn in_domain(&self, theta: &DVector<T>) -> bool {
        if theta.len() != self.dim() || theta.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let one = T::one();
        let zero = T::zero();
        match &self.spec {
            ModelSpec::SymmetricTwoState => theta[0] > zero && theta[0] < one,
            ModelSpec::GeneralTwoState => {
                theta[0] > zero && theta[0] < one && theta[1] > zero && theta[1] < one
            }
            ModelSpec::Equicorrelation { n_states, p_known } => {
                let rho = theta[0];
                if rho >= one {
                    return false;
                }
                if p_known.is_none() {
                    let mut sum = zero;
                    for b in 1..*n_states {
                        if theta[b] <= zero {
                            return false;
                        }
                        sum += theta[b];
                    }
                    if sum >= one {
                        return false;
                    }
                }
                // rho floor keeping every diagonal entry positive:
                // rho > -p_b/(1-p_b) for all b.
                let p = self.equi_p(theta);
                p.iter().all(|&pb| rho > -pb / (one - pb))
            }
            ModelSpec::ThreeState => {
                theta[0] > zero && theta[1] > zero && theta[0] + theta[1] < one
            }
            ModelSpec::Ising1d => true,
            ModelSpec::ReflectingWalk { .. } => theta[0] > zero && theta[0] < one,
            ModelSpec::Kimura4 => {
                let (a, b, g, d) = (theta[0], theta[1], theta[2], theta[3]);
                let two = cast::<T>(2.0);
                a > zero
                    && b > zero
                    && g > zero
                    && d > zero
                    && two * a + g < one
                    && two * a + d < one
                    && two * b + g < one
                    && two * b + d < one
            }
            ModelSpec::Kimura6 => {
                let (a, b) = (theta[0], theta[1]);
                let (g1, g2, d1, d2) = (theta[2], theta[3], theta[4], theta[5]);
                let two = cast::<T>(2.0);
                a > zero
                    && b > zero
                    && g1 > zero
                    && g2 > zero
                    && d1 > zero
                    && d2 > zero
                    && two * a + g1 < one
                    && two * a + d1 < one
                    && two * b + g2 < one
                    && two * b + d2 < one
            }
            ModelSpec::Saturated { n_states } => {
                let s = *n_states;
                for a in 0..s {
                    let mut sum = zero;
                    for b in 0..s - 1 {
                        let v = theta[a * (s - 1) + b];
                        if v <= zero {
                            return false;
                        }
                        sum += v;
                    }
                    if sum >= one {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Raw transition probabilities without domain or stochasticity checks.
    fn transition_raw(&self, theta: &DVector<T>) -> DMatrix<T> {
        let s = self.n_states();
        let one = T::one();
        match &self.spec {
            ModelSpec::SymmetricTwoState => {
                let t = theta[0];
                DMatrix::from_row_slice(2, 2, &[one - t, t, t, one - t])
            }
            ModelSpec::GeneralTwoState => {
                let (a, b) = (theta[0], theta[1]);
                DMatrix::from_row_slice(2, 2, &[one - a, a, b, one - b])
            }
            ModelSpec::Equicorrelation { .. } => {
                let rho = theta[0];
                let p = self.equi_p(theta);
                DMatrix::from_fn(s, s, |a, b| {
                    let delta = if a == b { one } else { T::zero() };
                    (one - rho) * p[b] + rho * delta
                })
            }
            ModelSpec::ThreeState => {
                let (a, b) = (theta[0], theta[1]);
                let d = one - a - b;
                DMatrix::from_row_slice(3, 3, &[d, a, b, a, d, b, a, b, d])
            }
            ModelSpec::Ising1d => {
                let e = theta[0].exp();
                let denom = one + e;
                DMatrix::from_row_slice(2, 2, &[e / denom, one / denom, one / denom, e / denom])
            }
            ModelSpec::ReflectingWalk { n_states } => {
                let p = theta[0];
                let q = one - p;
                let k = *n_states;
                DMatrix::from_fn(k, k, |i, j| {
                    if i == 0 {
                        if j == 1 {
                            one
                        } else {
                            T::zero()
                        }
                    } else if i == k - 1 {
                        if j == k - 2 {
                            one
                        } else {
                            T::zero()
                        }
                    } else if j + 1 == i {
                        q
                    } else if j == i + 1 {
                        p
                    } else {
                        T::zero()
                    }
                })
            }
            ModelSpec::Kimura4 => {
                let (a, b, g, d) = (theta[0], theta[1], theta[2], theta[3]);
                let two = cast::<T>(2.0);
                DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        one - two * a - g,
                        g,
                        a,
                        a,
                        d,
                        one - two * a - d,
                        a,
                        a,
                        b,
                        b,
                        one - two * b - g,
                        g,
                        b,
                        b,
                        d,
                        one - two * b - d,
                    ],
                )
            }
            ModelSpec::Kimura6 => {
                let (a, b) = (theta[0], theta[1]);
                let (g1, g2, d1, d2) = (theta[2], theta[3], theta[4], theta[5]);
                let two = cast::<T>(2.0);
                DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        one - two * a - g1,
                        g1,
                        a,
                        a,
                        d1,
                        one - two * a - d1,
                        a,
                        a,
                        b,
                        b,
                        one - two * b - g2,
                        g2,
                        b,
                        b,
                        d2,
                        one - two * b - d2,
                    ],
                )
            }
            ModelSpec::Saturated { n_states } => {
                let s = *n_states;
                DMatrix::from_fn(s, s, |a, b| {
                    if b < s - 1 {
                        theta[a * (s - 1) + b]
                    } else {
                        let mut rest = one;
                        for c in 0..s - 1 {
                            rest -= theta[a * (s - 1) + c];
                        }
                        rest
                    }
                })
            }
        }
    }

    /// The transition matrix at `theta`.
    pub fn transition(&self, theta: &DVector<T>) -> Result<TransitionMatrix<T>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        TransitionMatrix::new(self.states.clone(), self.transition_raw(theta))
    }

    /// Cells whose transition probability is identically zero over the
    /// whole domain (only the reflecting walk has any).
    pub fn structural_zeros(&self) -> PerCell<bool> {
        let s = self.n_states();
        match &self.spec {
            ModelSpec::ReflectingWalk { n_states } => {
                let k = *n_states;
                PerCell::from_fn(s, |i, j| {
                    if i == 0 {
                        j != 1
                    } else if i == k - 1 {
                        j != k - 2
                    } else {
                        !(j + 1 == i || j == i + 1)
                    }
                })
            }
            _ => PerCell::from_fn(s, |_, _| false),
        }
    }

    /// First derivatives of `log p[a][b](theta)` per cell (the scores),
    /// analytic where the family provides them, otherwise by central
    /// differences. Structurally zero cells carry zero vectors.
    pub fn scores(&self, theta: &DVector<T>) -> Result<PerCell<DVector<T>>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        match self.analytic_scores(theta) {
            Some(u) => Ok(u),
            None => self.scores_fd(theta),
        }
    }

    /// Analytic scores where the family has them.
    pub fn analytic_scores(&self, theta: &DVector<T>) -> Option<PerCell<DVector<T>>> {
        let one = T::one();
        let two = cast::<T>(2.0);
        match &self.spec {
            ModelSpec::SymmetricTwoState => {
                let t = theta[0];
                Some(PerCell::from_fn(2, |a, b| {
                    DVector::from_element(1, if a == b { -one / (one - t) } else { one / t })
                }))
            }
            ModelSpec::GeneralTwoState => {
                let (a_, b_) = (theta[0], theta[1]);
                Some(PerCell::from_fn(2, |a, b| match (a, b) {
                    (0, 0) => DVector::from_column_slice(&[-one / (one - a_), T::zero()]),
                    (0, 1) => DVector::from_column_slice(&[one / a_, T::zero()]),
                    (1, 0) => DVector::from_column_slice(&[T::zero(), one / b_]),
                    _ => DVector::from_column_slice(&[T::zero(), -one / (one - b_)]),
                }))
            }
            ModelSpec::Equicorrelation { p_known, .. } if p_known.is_some() => {
                let rho = theta[0];
                let p = self.equi_p(theta);
                let s = p.len();
                Some(PerCell::from_fn(s, |a, b| {
                    let delta = if a == b { one } else { T::zero() };
                    let pab = (one - rho) * p[b] + rho * delta;
                    DVector::from_element(1, (delta - p[b]) / pab)
                }))
            }
            ModelSpec::ThreeState => {
                let (a_, b_) = (theta[0], theta[1]);
                let d = one - a_ - b_;
                Some(PerCell::from_fn(3, |a, b| {
                    // Diagonal cells hold 1-alpha-beta; row a sends alpha to
                    // state 0 (or 1 from row 0) and beta to the remaining one.
                    if a == b {
                        DVector::from_column_slice(&[-one / d, -one / d])
                    } else if (a == 0 && b == 1) || (a == 1 && b == 0) || (a == 2 && b == 0) {
                        DVector::from_column_slice(&[one / a_, T::zero()])
                    } else {
                        DVector::from_column_slice(&[T::zero(), one / b_])
                    }
                }))
            }
            ModelSpec::Ising1d => {
                let e = theta[0].exp();
                let denom = one + e;
                Some(PerCell::from_fn(2, |a, b| {
                    DVector::from_element(1, if a == b { one / denom } else { -e / denom })
                }))
            }
            ModelSpec::ReflectingWalk { n_states } => {
                let k = *n_states;
                let p = theta[0];
                let q = one - p;
                Some(PerCell::from_fn(k, |i, j| {
                    if i > 0 && i < k - 1 && j + 1 == i {
                        DVector::from_element(1, -one / q)
                    } else if i > 0 && i < k - 1 && j == i + 1 {
                        DVector::from_element(1, one / p)
                    } else {
                        DVector::from_element(1, T::zero())
                    }
                }))
            }
            ModelSpec::Kimura4 => {
                let (a_, b_, g_, d_) = (theta[0], theta[1], theta[2], theta[3]);
                let zero = T::zero();
                let cell = |coeffs: [T; 4], value: T| -> DVector<T> {
                    DVector::from_column_slice(&[
                        coeffs[0] / value,
                        coeffs[1] / value,
                        coeffs[2] / value,
                        coeffs[3] / value,
                    ])
                };
                let daa = one - two * a_ - g_;
                let dgg = one - two * a_ - d_;
                let dcc = one - two * b_ - g_;
                let dtt = one - two * b_ - d_;
                Some(PerCell::from_fn(4, |r, c| match (r, c) {
                    (0, 0) => cell([-two, zero, -one, zero], daa),
                    (0, 1) => cell([zero, zero, one, zero], g_),
                    (0, 2) | (0, 3) | (1, 2) | (1, 3) => cell([one, zero, zero, zero], a_),
                    (1, 0) => cell([zero, zero, zero, one], d_),
                    (1, 1) => cell([-two, zero, zero, -one], dgg),
                    (2, 0) | (2, 1) | (3, 0) | (3, 1) => cell([zero, one, zero, zero], b_),
                    (2, 2) => cell([zero, -two, -one, zero], dcc),
                    (2, 3) => cell([zero, zero, one, zero], g_),
                    (3, 2) => cell([zero, zero, zero, one], d_),
                    _ => cell([zero, -two, zero, -one], dtt),
                }))
            }
            _ => None,
        }
    }

    /// Central-difference scores; the fallback and the test oracle for the
    /// analytic arms. Uses the five-point rule at step `eps^(1/3)` so the
    /// truncation error stays well below the score identities' tolerances
    /// even near the joint-constraint boundary.
    pub fn scores_fd(&self, theta: &DVector<T>) -> Result<PerCell<DVector<T>>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        let s = self.n_states();
        let dim = self.dim();
        let structural = self.structural_zeros();
        let mut u = PerCell::from_fn(s, |_, _| DVector::<T>::zeros(dim));
        let twelve = cast::<T>(12.0);
        let eight = cast::<T>(8.0);
        for j in 0..dim {
            let h = fd_step(theta[j]);
            let shifted = |mult: f64| -> DMatrix<T> {
                let mut t = theta.clone();
                t[j] += h * cast::<T>(mult);
                self.transition_raw(&t)
            };
            let (p1, m1, p2, m2) = (shifted(1.0), shifted(-1.0), shifted(2.0), shifted(-2.0));
            for a in 0..s {
                for b in 0..s {
                    if *structural.get(a, b) {
                        continue;
                    }
                    let d1 = p1[(a, b)].ln() - m1[(a, b)].ln();
                    let d2 = p2[(a, b)].ln() - m2[(a, b)].ln();
                    u.data[a * s + b][j] = (eight * d1 - d2) / (twelve * h);
                }
            }
        }
        Ok(u)
    }

    /// Second derivatives of `log p[a][b](theta)` per cell.
    pub fn cell_hessians(&self, theta: &DVector<T>) -> Result<PerCell<DMatrix<T>>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        match self.analytic_hessians(theta) {
            Some(h) => Ok(h),
            None => self.cell_hessians_fd(theta),
        }
    }

    /// Analytic cell Hessians. For families whose cell probabilities are
    /// affine in `theta` the Hessian of the log is `-u u'`.
    pub fn analytic_hessians(&self, theta: &DVector<T>) -> Option<PerCell<DMatrix<T>>> {
        match &self.spec {
            ModelSpec::Ising1d => {
                let e = theta[0].exp();
                let denom = T::one() + e;
                let val = -e / (denom * denom);
                Some(PerCell::from_fn(2, |_, _| DMatrix::from_element(1, 1, val)))
            }
            ModelSpec::SymmetricTwoState
            | ModelSpec::GeneralTwoState
            | ModelSpec::ThreeState
            | ModelSpec::ReflectingWalk { .. }
            | ModelSpec::Kimura4 => {
                let u = self.analytic_scores(theta)?;
                let s = self.n_states();
                Some(PerCell::from_fn(s, |a, b| {
                    let ua = u.get(a, b);
                    -(ua * ua.transpose())
                }))
            }
            ModelSpec::Equicorrelation { p_known, .. } if p_known.is_some() => {
                let u = self.analytic_scores(theta)?;
                let s = self.n_states();
                Some(PerCell::from_fn(s, |a, b| {
                    let ua = u.get(a, b);
                    -(ua * ua.transpose())
                }))
            }
            _ => None,
        }
    }

    /// Central-difference cell Hessians (step `eps^(1/4)`-scaled).
    pub fn cell_hessians_fd(&self, theta: &DVector<T>) -> Result<PerCell<DMatrix<T>>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        let s = self.n_states();
        let dim = self.dim();
        let structural = self.structural_zeros();
        let step = |tj: T| -> T {
            let h = T::default_epsilon().powf(cast(0.25));
            h * T::max(T::one(), tj.abs())
        };
        let log_p = |th: &DVector<T>| -> DMatrix<T> {
            let p = self.transition_raw(th);
            DMatrix::from_fn(s, s, |a, b| {
                if *structural.get(a, b) {
                    T::zero()
                } else {
                    p[(a, b)].ln()
                }
            })
        };
        let base = log_p(theta);
        // Plain central second difference at step scale `mult`, then
        // Richardson-extrapolated: (4 D(h) - D(2h)) / 3.
        let second_diff = |j: usize, k: usize, mult: f64| -> DMatrix<T> {
            let hj = step(theta[j]) * cast::<T>(mult);
            let hk = step(theta[k]) * cast::<T>(mult);
            if j == k {
                let mut tp = theta.clone();
                tp[j] += hj;
                let mut tm = theta.clone();
                tm[j] -= hj;
                let (fp, fm) = (log_p(&tp), log_p(&tm));
                DMatrix::from_fn(s, s, |a, b| {
                    (fp[(a, b)] - cast::<T>(2.0) * base[(a, b)] + fm[(a, b)]) / (hj * hj)
                })
            } else {
                let mut tpp = theta.clone();
                tpp[j] += hj;
                tpp[k] += hk;
                let mut tpm = theta.clone();
                tpm[j] += hj;
                tpm[k] -= hk;
                let mut tmp = theta.clone();
                tmp[j] -= hj;
                tmp[k] += hk;
                let mut tmm = theta.clone();
                tmm[j] -= hj;
                tmm[k] -= hk;
                let (fpp, fpm, fmp, fmm) = (log_p(&tpp), log_p(&tpm), log_p(&tmp), log_p(&tmm));
                DMatrix::from_fn(s, s, |a, b| {
                    (fpp[(a, b)] - fpm[(a, b)] - fmp[(a, b)] + fmm[(a, b)])
                        / (cast::<T>(4.0) * hj * hk)
                })
            }
        };
        let mut out = PerCell::from_fn(s, |_, _| DMatrix::<T>::zeros(dim, dim));
        let third = cast::<T>(1.0 / 3.0);
        let four = cast::<T>(4.0);
        for j in 0..dim {
            for k in j..dim {
                let d_h = second_diff(j, k, 1.0);
                let d_2h = second_diff(j, k, 2.0);
                for a in 0..s {
                    for b in 0..s {
                        if *structural.get(a, b) {
                            continue;
                        }
                        let val = (four * d_h[(a, b)] - d_2h[(a, b)]) * third;
                        out.data[a * s + b][(j, k)] = val;
                        out.data[a * s + b][(k, j)] = val;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Closed-form equilibrium distribution where the family has one.
    pub fn closed_form_stationary(&self, theta: &DVector<T>) -> Option<DVector<T>> {
        let one = T::one();
        let two = cast::<T>(2.0);
        let half = cast::<T>(0.5);
        match &self.spec {
            ModelSpec::SymmetricTwoState | ModelSpec::Ising1d => {
                Some(DVector::from_element(2, half))
            }
            ModelSpec::GeneralTwoState => {
                let (a, b) = (theta[0], theta[1]);
                Some(DVector::from_column_slice(&[b / (a + b), a / (a + b)]))
            }
            ModelSpec::Equicorrelation { .. } => Some(DVector::from_vec(self.equi_p(theta))),
            ModelSpec::ThreeState => {
                let (a, b) = (theta[0], theta[1]);
                let p1 = a / (two * a + b);
                let p3 = b / (a + two * b);
                let p2 = (a * a + a * b + b * b) / ((a + two * b) * (two * a + b));
                Some(DVector::from_column_slice(&[p1, p2, p3]))
            }
            ModelSpec::ReflectingWalk { n_states } => {
                let k = *n_states;
                let p = theta[0];
                let q = one - p;
                let r = p / q;
                let mut s_sum = T::zero();
                let mut r_pow = one;
                for _ in 1..=(k - 2) {
                    r_pow *= r;
                    s_sum += r_pow;
                }
                // r_pow is now r^(k-2).
                let pi1 = one / (one + s_sum / p + r_pow);
                let mut pi = DVector::zeros(k);
                pi[0] = pi1;
                for i in 2..k {
                    // 1-based state i sits at index i-1.
                    pi[i - 1] = pi1 * p.powi(i as i32 - 2) / q.powi(i as i32 - 1);
                }
                pi[k - 1] = pi1 * r_pow;
                Some(pi)
            }
            ModelSpec::Kimura4 => {
                let (a, b, g, d) = (theta[0], theta[1], theta[2], theta[3]);
                let s = a + b;
                let d1 = two * a + g + d;
                let d2 = two * b + g + d;
                Some(DVector::from_column_slice(&[
                    b / s * ((a + d) / d1),
                    b / s * ((a + g) / d1),
                    a / s * ((b + d) / d2),
                    a / s * ((b + g) / d2),
                ]))
            }
            _ => None,
        }
    }

    /// Equilibrium distribution at `theta`: the closed form when there is
    /// one, otherwise the linear solve.
    pub fn stationary(&self, theta: &DVector<T>) -> Result<StationaryDistribution<T>> {
        let p = self.transition(theta)?;
        match self.closed_form_stationary(theta) {
            Some(pi) => StationaryDistribution::from_vector(&p, pi),
            None => crate::chain::stationary_distribution(&p),
        }
    }

    /// Stationary-distribution scores `v[a] = d log pi[a] / d theta`.
    pub fn stationary_scores(&self, theta: &DVector<T>) -> Result<Vec<DVector<T>>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        match self.analytic_stationary_scores(theta) {
            Some(v) => Ok(v),
            None => self.stationary_scores_fd(theta),
        }
    }

    /// Analytic stationary scores where the equilibrium closed form has
    /// been differentiated.
    pub fn analytic_stationary_scores(&self, theta: &DVector<T>) -> Option<Vec<DVector<T>>> {
        let one = T::one();
        let two = cast::<T>(2.0);
        match &self.spec {
            ModelSpec::SymmetricTwoState | ModelSpec::Ising1d => {
                Some(vec![DVector::zeros(1), DVector::zeros(1)])
            }
            ModelSpec::Equicorrelation { n_states, p_known } if p_known.is_some() => {
                Some(vec![DVector::zeros(1); *n_states])
            }
            ModelSpec::GeneralTwoState => {
                let (a, b) = (theta[0], theta[1]);
                let w = one / (a + b);
                Some(vec![
                    DVector::from_column_slice(&[-w, one / b - w]),
                    DVector::from_column_slice(&[one / a - w, -w]),
                ])
            }
            ModelSpec::ThreeState => {
                let (a, b) = (theta[0], theta[1]);
                let s1 = two * a + b;
                let s3 = a + two * b;
                let m = a * a + a * b + b * b;
                Some(vec![
                    DVector::from_column_slice(&[one / a - two / s1, -one / s1]),
                    DVector::from_column_slice(&[
                        (two * a + b) / m - one / s3 - two / s1,
                        (a + two * b) / m - two / s3 - one / s1,
                    ]),
                    DVector::from_column_slice(&[-one / s3, one / b - two / s3]),
                ])
            }
            ModelSpec::ReflectingWalk { n_states } => {
                let k = *n_states;
                let p = theta[0];
                let q = one - p;
                let r = p / q;
                let pi = self.closed_form_stationary(theta)?;
                let pi1 = pi[0];
                let mut sum = T::zero();
                let mut r_pow = one;
                for i in 1..=(k - 2) {
                    let i_t = cast::<T>(i as f64);
                    sum += r_pow * (i_t / q - one);
                    r_pow *= r;
                }
                let k2 = cast::<T>((k - 2) as f64);
                let r_km3 = r.powi(k as i32 - 3);
                let v1 = -pi1 * (sum / (p * q) + k2 * r_km3 / (q * q));
                let mut v = Vec::with_capacity(k);
                v.push(DVector::from_element(1, v1));
                for i in 2..k {
                    let i_t = cast::<T>(i as f64);
                    v.push(DVector::from_element(
                        1,
                        v1 - one / p + (i_t - one) / (p * q),
                    ));
                }
                v.push(DVector::from_element(1, v1 + k2 / (p * q)));
                Some(v)
            }
            ModelSpec::Kimura4 => {
                let (a, b, g, d) = (theta[0], theta[1], theta[2], theta[3]);
                let s = a + b;
                let d1 = two * a + g + d;
                let d2 = two * b + g + d;
                Some(vec![
                    // p_A = (b/s) (a+d)/d1
                    DVector::from_column_slice(&[
                        one / (a + d) - one / s - two / d1,
                        one / b - one / s,
                        -one / d1,
                        one / (a + d) - one / d1,
                    ]),
                    // p_G = (b/s) (a+g)/d1
                    DVector::from_column_slice(&[
                        one / (a + g) - one / s - two / d1,
                        one / b - one / s,
                        one / (a + g) - one / d1,
                        -one / d1,
                    ]),
                    // p_C = (a/s) (b+d)/d2
                    DVector::from_column_slice(&[
                        one / a - one / s,
                        one / (b + d) - one / s - two / d2,
                        -one / d2,
                        one / (b + d) - one / d2,
                    ]),
                    // p_T = (a/s) (b+g)/d2
                    DVector::from_column_slice(&[
                        one / a - one / s,
                        one / (b + g) - one / s - two / d2,
                        one / (b + g) - one / d2,
                        -one / d2,
                    ]),
                ])
            }
            _ => None,
        }
    }

    /// Central differences of `log pi[a](theta)`.
    pub fn stationary_scores_fd(&self, theta: &DVector<T>) -> Result<Vec<DVector<T>>> {
        if !self.in_domain(theta) {
            return Err(Error::OutOfDomain);
        }
        let s = self.n_states();
        let dim = self.dim();
        let mut v = vec![DVector::<T>::zeros(dim); s];
        let twelve = cast::<T>(12.0);
        let eight = cast::<T>(8.0);
        for j in 0..dim {
            let h = fd_step(theta[j]);
            let eval = |mult: f64| -> Result<StationaryDistribution<T>> {
                let mut t = theta.clone();
                t[j] += h * cast::<T>(mult);
                self.stationary(&t)
            };
            let (p1, m1, p2, m2) = (eval(1.0)?, eval(-1.0)?, eval(2.0)?, eval(-2.0)?);
            for a in 0..s {
                let d1 = p1.get(a).ln() - m1.get(a).ln();
                let d2 = p2.get(a).ln() - m2.get(a).ln();
                v[a][j] = (eight * d1 - d2) / (twelve * h);
            }
        }
        Ok(v)
    }

    /// Box/simplex structure of the domain, used to build the smooth
    /// unconstrained reparameterization for fitting.
    pub fn domain_blocks(&self) -> Vec<DomainBlock<T>> {
        let one = T::one();
        let zero = T::zero();
        let half = cast::<T>(0.5);
        match &self.spec {
            ModelSpec::SymmetricTwoState
            | ModelSpec::GeneralTwoState
            | ModelSpec::ReflectingWalk { .. } => (0..self.dim())
                .map(|index| DomainBlock::Interval {
                    index,
                    lo: Some(zero),
                    hi: Some(one),
                })
                .collect(),
            ModelSpec::Equicorrelation { n_states, p_known } => {
                let rho_lo = match p_known {
                    Some(p) => {
                        let mut lo = -one;
                        for &pb in p {
                            let bound = -pb / (one - pb);
                            if bound > lo {
                                lo = bound;
                            }
                        }
                        lo
                    }
                    // With p free the floor moves with p; the joint check in
                    // `in_domain` enforces it during the line search.
                    None => -one,
                };
                let mut blocks = vec![DomainBlock::Interval {
                    index: 0,
                    lo: Some(rho_lo),
                    hi: Some(one),
                }];
                if p_known.is_none() {
                    blocks.push(DomainBlock::Simplex {
                        indices: (1..*n_states).collect(),
                    });
                }
                blocks
            }
            ModelSpec::ThreeState => vec![DomainBlock::Simplex {
                indices: vec![0, 1],
            }],
            ModelSpec::Ising1d => vec![DomainBlock::Interval {
                index: 0,
                lo: None,
                hi: None,
            }],
            ModelSpec::Kimura4 | ModelSpec::Kimura6 => {
                let mut blocks = vec![
                    DomainBlock::Interval {
                        index: 0,
                        lo: Some(zero),
                        hi: Some(half),
                    },
                    DomainBlock::Interval {
                        index: 1,
                        lo: Some(zero),
                        hi: Some(half),
                    },
                ];
                for index in 2..self.dim() {
                    blocks.push(DomainBlock::Interval {
                        index,
                        lo: Some(zero),
                        hi: Some(one),
                    });
                }
                blocks
            }
            ModelSpec::Saturated { n_states } => {
                let s = *n_states;
                (0..s)
                    .map(|a| DomainBlock::Simplex {
                        indices: (0..s - 1).map(|b| a * (s - 1) + b).collect(),
                    })
                    .collect()
            }
        }
    }

    pub fn reparam(&self) -> Reparam<T> {
        Reparam {
            blocks: self.domain_blocks(),
            dim: self.dim(),
        }
    }

    /// A parameter point well inside the domain, used to seed and repair
    /// optimizer starts. (Box midpoints are not enough: the four-parameter
    /// substitution model's midpoint lands exactly on a joint constraint.)
    pub fn feasible_anchor(&self) -> DVector<T> {
        let half = cast::<T>(0.5);
        match &self.spec {
            ModelSpec::SymmetricTwoState => DVector::from_element(1, half),
            ModelSpec::GeneralTwoState => DVector::from_element(2, half),
            ModelSpec::Equicorrelation { n_states, p_known } => {
                let mut theta = DVector::from_element(self.dim(), half);
                if p_known.is_none() {
                    let share = T::one() / cast::<T>(*n_states as f64);
                    for b in 1..*n_states {
                        theta[b] = share;
                    }
                }
                theta
            }
            ModelSpec::ThreeState => DVector::from_element(2, T::one() / cast::<T>(3.0)),
            ModelSpec::Ising1d => DVector::zeros(1),
            ModelSpec::ReflectingWalk { .. } => DVector::from_element(1, half),
            ModelSpec::Kimura4 => {
                DVector::from_column_slice(&[cast(0.1), cast(0.1), cast(0.2), cast(0.2)])
            }
            ModelSpec::Kimura6 => DVector::from_column_slice(&[
                cast(0.1),
                cast(0.1),
                cast(0.2),
                cast(0.2),
                cast(0.2),
                cast(0.2),
            ]),
            ModelSpec::Saturated { n_states } => {
                let share = T::one() / cast::<T>(*n_states as f64);
                DVector::from_element(self.dim(), share)
            }
        }
    }

    /// Draws a parameter vector comfortably inside the domain: uniform in
    /// the transformed space, rejecting draws that violate a joint
    /// constraint or push any non-structural transition probability below
    /// 0.02.
    pub fn random_interior_theta<R: Rng>(&self, rng: &mut R) -> DVector<T> {
        let reparam = self.reparam();
        let structural = self.structural_zeros();
        let floor = cast::<T>(0.02);
        let s = self.n_states();
        loop {
            let z = DVector::from_fn(self.dim(), |_, _| cast::<T>(rng.random_range(-1.25..1.25)));
            let theta = reparam.to_theta(&z);
            if !self.in_domain(&theta) {
                continue;
            }
            let p = self.transition_raw(&theta);
            let comfortable = (0..s).all(|a| {
                (0..s).all(|b| *structural.get(a, b) || p[(a, b)] >= floor)
            });
            if comfortable {
                return theta;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::stationary_distribution;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(spec: ModelSpec<f64>) -> ParametricModel<f64> {
        ParametricModel::new(spec).unwrap()
    }

    fn all_specs() -> Vec<ModelSpec<f64>> {
        vec![
            ModelSpec::SymmetricTwoState,
            ModelSpec::GeneralTwoState,
            ModelSpec::Equicorrelation {
                n_states: 3,
                p_known: Some(vec![0.3, 0.6, 0.1]),
            },
            ModelSpec::Equicorrelation {
                n_states: 3,
                p_known: None,
            },
            ModelSpec::ThreeState,
            ModelSpec::Ising1d,
            ModelSpec::ReflectingWalk { n_states: 6 },
            ModelSpec::Kimura4,
            ModelSpec::Kimura6,
            ModelSpec::Saturated { n_states: 3 },
        ]
    }

    #[test]
    fn kimura4_rows_and_constraints() {
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let p = m.transition(&theta).unwrap();
        for a in 0..4 {
            let sum: f64 = (0..4).map(|b| p.get(a, b)).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-14);
        }
        assert!(m.in_domain(&theta));
        let bad = DVector::from_column_slice(&[0.45, 0.041, 0.2, 0.128]);
        assert!(!m.in_domain(&bad));
        assert!(matches!(m.transition(&bad), Err(Error::OutOfDomain)));
    }

    #[test]
    fn kimura4_closed_form_stationary_matches_solve() {
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let p = m.transition(&theta).unwrap();
        let solved = stationary_distribution(&p).unwrap();
        let closed = m.closed_form_stationary(&theta).unwrap();
        for a in 0..4 {
            assert_abs_diff_eq!(closed[a], solved.get(a), epsilon = 1e-12);
        }
    }

    #[test]
    fn ising_at_zero_is_uniform() {
        let m = model(ModelSpec::Ising1d);
        let p = m.transition(&DVector::from_element(1, 0.0)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(p.get(a, b), 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn reflecting_walk_stationary_matches_solve() {
        for &(k, pr) in &[(6usize, 0.5), (6, 0.3), (10, 0.7), (5, 0.42)] {
            let m = model(ModelSpec::ReflectingWalk { n_states: k });
            let theta = DVector::from_element(1, pr);
            let p = m.transition(&theta).unwrap();
            let solved = stationary_distribution(&p).unwrap();
            let closed = m.closed_form_stationary(&theta).unwrap();
            for a in 0..k {
                assert_abs_diff_eq!(closed[a], solved.get(a), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_scores_match_display() {
        let m = model(ModelSpec::SymmetricTwoState);
        let theta = DVector::from_element(1, 0.3);
        let u = m.scores(&theta).unwrap();
        assert_abs_diff_eq!(u.get(0, 0)[0], -1.0 / 0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(u.get(0, 1)[0], 1.0 / 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(u.get(1, 0)[0], 1.0 / 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(u.get(1, 1)[0], -1.0 / 0.7, epsilon = 1e-14);
    }

    #[test]
    fn general_two_state_scores_match_display() {
        let m = model(ModelSpec::GeneralTwoState);
        let (a, b) = (0.3, 0.6);
        let theta = DVector::from_column_slice(&[a, b]);
        let u = m.scores(&theta).unwrap();
        assert_eq!(u.get(0, 0).as_slice(), &[-1.0 / (1.0 - a), 0.0]);
        assert_eq!(u.get(0, 1).as_slice(), &[1.0 / a, 0.0]);
        assert_eq!(u.get(1, 0).as_slice(), &[0.0, 1.0 / b]);
        assert_eq!(u.get(1, 1).as_slice(), &[0.0, -1.0 / (1.0 - b)]);
    }

    #[test]
    fn general_two_state_stationary_scores_match_display() {
        let m = model(ModelSpec::GeneralTwoState);
        let (a, b) = (0.3, 0.6);
        let theta = DVector::from_column_slice(&[a, b]);
        let v = m.stationary_scores(&theta).unwrap();
        let w = 1.0 / (a + b);
        assert_abs_diff_eq!(v[0][0], -w, epsilon = 1e-14);
        assert_abs_diff_eq!(v[0][1], 1.0 / b - w, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1][0], 1.0 / a - w, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1][1], -w, epsilon = 1e-14);
    }

    #[test]
    fn equicorrelation_known_p_has_zero_stationary_scores() {
        let m = model(ModelSpec::Equicorrelation {
            n_states: 3,
            p_known: Some(vec![0.3, 0.6, 0.1]),
        });
        let theta = DVector::from_element(1, 0.5);
        let v = m.stationary_scores(&theta).unwrap();
        for va in &v {
            assert_eq!(va[0], 0.0);
        }
    }

    #[test]
    fn score_row_identity_every_family() {
        // sum_b p[a][b] u[a][b] = 0 from differentiating row sums.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in all_specs() {
            let m = model(spec);
            for _ in 0..5 {
                let theta = m.random_interior_theta(&mut rng);
                let p = m.transition(&theta).unwrap();
                let u = m.scores(&theta).unwrap();
                for a in 0..m.n_states() {
                    let mut acc = DVector::<f64>::zeros(m.dim());
                    for b in 0..m.n_states() {
                        acc += u.get(a, b) * p.get(a, b);
                    }
                    assert!(
                        acc.amax() < 1e-8,
                        "row identity failed for {} at {:?}: {acc}",
                        m.spec().family_name(),
                        theta.as_slice()
                    );
                }
            }
        }
    }

    fn rel_gap(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for spec in all_specs() {
            let m = model(spec);
            for _ in 0..3 {
                let theta = m.random_interior_theta(&mut rng);
                let (u, u_fd) = (m.scores(&theta).unwrap(), m.scores_fd(&theta).unwrap());
                let structural = m.structural_zeros();
                for a in 0..m.n_states() {
                    for b in 0..m.n_states() {
                        if *structural.get(a, b) {
                            continue;
                        }
                        for j in 0..m.dim() {
                            assert!(
                                rel_gap(u.get(a, b)[j], u_fd.get(a, b)[j]) < 1e-6,
                                "score mismatch for {} cell ({a},{b}) param {j}",
                                m.spec().family_name()
                            );
                        }
                    }
                }
                let (i_an, i_fd) = (
                    m.cell_hessians(&theta).unwrap(),
                    m.cell_hessians_fd(&theta).unwrap(),
                );
                for a in 0..m.n_states() {
                    for b in 0..m.n_states() {
                        if *structural.get(a, b) {
                            continue;
                        }
                        for j in 0..m.dim() {
                            for k in 0..m.dim() {
                                assert!(
                                    rel_gap(i_an.get(a, b)[(j, k)], i_fd.get(a, b)[(j, k)]) < 1e-5,
                                    "hessian mismatch for {} cell ({a},{b})",
                                    m.spec().family_name()
                                );
                            }
                        }
                    }
                }
                let (v, v_fd) = (
                    m.stationary_scores(&theta).unwrap(),
                    m.stationary_scores_fd(&theta).unwrap(),
                );
                for a in 0..m.n_states() {
                    for j in 0..m.dim() {
                        assert!(
                            rel_gap(v[a][j], v_fd[a][j]) < 1e-5,
                            "stationary score mismatch for {} state {a} param {j}: {} vs {}",
                            m.spec().family_name(),
                            v[a][j],
                            v_fd[a][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn stationary_score_weighted_sum_vanishes() {
        // sum_a pi[a] v[a] = 0 from differentiating sum_a pi[a] = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for spec in all_specs() {
            let m = model(spec);
            let theta = m.random_interior_theta(&mut rng);
            let pi = m.stationary(&theta).unwrap();
            let v = m.stationary_scores(&theta).unwrap();
            let mut acc = DVector::<f64>::zeros(m.dim());
            for a in 0..m.n_states() {
                acc += &v[a] * pi.get(a);
            }
            assert!(
                acc.amax() < 1e-8,
                "weighted stationary scores nonzero for {}",
                m.spec().family_name()
            );
        }
    }

    #[test]
    fn kimura6_at_zero_split_equals_kimura4() {
        let m6 = model(ModelSpec::Kimura6);
        let m4 = model(ModelSpec::Kimura4);
        let theta4 = DVector::from_column_slice(&[0.03, 0.04, 0.13, 0.14]);
        let theta6 = DVector::from_column_slice(&[0.03, 0.04, 0.13, 0.13, 0.14, 0.14]);
        let p4 = m4.transition(&theta4).unwrap();
        let p6 = m6.transition(&theta6).unwrap();
        assert_eq!(p4.matrix(), p6.matrix());
    }

    #[test]
    fn reparam_round_trip_and_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in all_specs() {
            let m = model(spec);
            let reparam = m.reparam();
            let theta = m.random_interior_theta(&mut rng);
            let z = reparam.to_z(&theta);
            let back = reparam.to_theta(&z);
            for j in 0..m.dim() {
                assert_abs_diff_eq!(back[j], theta[j], epsilon = 1e-10);
            }
            // Jacobian vs finite differences in z.
            let jac = reparam.jacobian(&z);
            let h = 1e-6;
            for j in 0..m.dim() {
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let (tp, tm) = (reparam.to_theta(&zp), reparam.to_theta(&zm));
                for i in 0..m.dim() {
                    let fd = (tp[i] - tm[i]) / (2.0 * h);
                    assert!(
                        (jac[(i, j)] - fd).abs() < 1e-6,
                        "jacobian mismatch {} ({i},{j}): {} vs {}",
                        m.spec().family_name(),
                        jac[(i, j)],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn saturated_dim_and_rows() {
        let m = model(ModelSpec::Saturated { n_states: 3 });
        assert_eq!(m.dim(), 6);
        let theta = DVector::from_column_slice(&[0.2, 0.3, 0.1, 0.6, 0.25, 0.35]);
        let p = m.transition(&theta).unwrap();
        assert_abs_diff_eq!(p.get(0, 2), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1, 2), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(2, 2), 0.4, epsilon = 1e-15);
    }
}

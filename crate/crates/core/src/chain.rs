//! Finite-state Markov chain fundamentals: row-stochastic transition
//! matrices, stationary distributions, multi-step probabilities, the
//! accumulated-deviation (gamma) matrices behind the sandwich variances,
//! and path simulation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast, tol, Scalar};

/// Threshold on the second-largest eigenvalue modulus used by the
/// aperiodicity flag: periodic chains have a non-unit eigenvalue of
/// modulus exactly 1.
const APERIODICITY_EIGEN_TOL: f64 = 1e-12;

/// A finite state space with display labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    labels: Vec<String>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::TooFewStates(labels.len()));
        }
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                if labels[i] == labels[j] {
                    return Err(Error::DuplicateLabels);
                }
            }
        }
        Ok(Self { labels })
    }

    /// States labelled `"1"`, `"2"`, ..., `"size"`.
    pub fn of_size(size: usize) -> Result<Self> {
        Self::new((1..=size).map(|i| i.to_string()).collect())
    }

    /// The four nucleotides in the conventional A, G, C, T order.
    pub fn dna() -> Self {
        Self::new(vec!["A", "G", "C", "T"]).expect("static labels are valid")
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, a: usize) -> &str {
        &self.labels[a]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A validated row-stochastic transition matrix over a [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T: Scalar> {
    states: StateSpace,
    p: DMatrix<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    /// Validates shape, entry range and row sums (within `1e-12` for `f64`).
    pub fn new(states: StateSpace, p: DMatrix<T>) -> Result<Self> {
        let s = states.size();
        if p.nrows() != s || p.ncols() != s {
            return Err(Error::BadShape {
                expected: s,
                rows: p.nrows(),
                cols: p.ncols(),
            });
        }
        let entry_slack = tol::<T>(1e-12);
        for a in 0..s {
            let mut sum = T::zero();
            for b in 0..s {
                let v = p[(a, b)];
                if !(v >= T::zero() && v <= T::one() + entry_slack) {
                    return Err(Error::BadEntry {
                        row: a,
                        col: b,
                        value: v.to_f64().unwrap_or(f64::NAN),
                    });
                }
                sum += v;
            }
            if (sum - T::one()).abs() > tol::<T>(1e-12) {
                return Err(Error::NotStochastic {
                    row: a,
                    sum: sum.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(Self { states, p })
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn size(&self) -> usize {
        self.states.size()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.p
    }

    pub fn get(&self, a: usize, b: usize) -> T {
        self.p[(a, b)]
    }

    /// Strong connectivity of the positive-entry digraph.
    pub fn is_irreducible(&self) -> bool {
        let s = self.size();
        let reach = |transpose: bool| -> usize {
            let mut seen = vec![false; s];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(a) = stack.pop() {
                for b in 0..s {
                    let edge = if transpose {
                        self.p[(b, a)]
                    } else {
                        self.p[(a, b)]
                    };
                    if edge > T::zero() && !seen[b] {
                        seen[b] = true;
                        count += 1;
                        stack.push(b);
                    }
                }
            }
            count
        };
        reach(false) == s && reach(true) == s
    }

    /// Modulus of the second-largest eigenvalue (the largest is 1 for an
    /// irreducible chain).
    pub fn second_eigenvalue_modulus(&self) -> T {
        let eig = self.p.clone().complex_eigenvalues();
        let mut moduli: Vec<T> = eig.iter().map(|z| z.re.hypot(z.im)).collect();
        moduli.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        moduli[1]
    }

    /// Aperiodicity flag: second eigenvalue modulus strictly below
    /// `1 - 1e-12`.
    pub fn is_aperiodic(&self) -> bool {
        self.second_eigenvalue_modulus() < T::one() - tol::<T>(APERIODICITY_EIGEN_TOL)
    }

    /// `P^k` by repeated squaring; `P^0` is the identity.
    pub fn k_step(&self, k: usize) -> TransitionMatrix<T> {
        let s = self.size();
        let mut result = DMatrix::<T>::identity(s, s);
        let mut base = self.p.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        TransitionMatrix {
            states: self.states.clone(),
            p: result,
        }
    }
}

/// The equilibrium distribution of an irreducible chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution<T: Scalar> {
    pi: DVector<T>,
}

impl<T: Scalar> StationaryDistribution<T> {
    pub fn pi(&self) -> &DVector<T> {
        &self.pi
    }

    pub fn get(&self, a: usize) -> T {
        self.pi[a]
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Wraps an externally computed equilibrium vector, checking that it
    /// really is one for `p`.
    pub fn from_vector(p: &TransitionMatrix<T>, pi: DVector<T>) -> Result<Self> {
        let s = p.size();
        if pi.len() != s {
            return Err(Error::DimensionMismatch(format!(
                "stationary vector has length {}, chain has {} states",
                pi.len(),
                s
            )));
        }
        let mut sum = T::zero();
        for a in 0..s {
            if pi[a] <= T::zero() {
                return Err(Error::Singular);
            }
            sum += pi[a];
        }
        if (sum - T::one()).abs() > tol::<T>(1e-12) {
            return Err(Error::Singular);
        }
        let residual = (pi.transpose() * p.matrix() - pi.transpose()).abs().max();
        if residual > tol::<T>(1e-10) {
            return Err(Error::Singular);
        }
        Ok(Self { pi })
    }
}

/// Solves `pi' P = pi'`, `sum(pi) = 1` as a stacked least-squares system
/// (the `P' - I` rows augmented with a normalization row).
pub fn stationary_distribution<T: Scalar>(
    p: &TransitionMatrix<T>,
) -> Result<StationaryDistribution<T>> {
    if !p.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let s = p.size();
    let mut a = DMatrix::<T>::zeros(s + 1, s);
    for i in 0..s {
        for j in 0..s {
            a[(i, j)] = p.matrix()[(j, i)];
        }
        a[(i, i)] -= T::one();
    }
    for j in 0..s {
        a[(s, j)] = T::one();
    }
    let mut b = DVector::<T>::zeros(s + 1);
    b[s] = T::one();
    let svd = a.svd(true, true);
    let pi = svd
        .solve(&b, T::default_epsilon() * cast::<T>(16.0))
        .map_err(|_| Error::Singular)?;
    let mut pi = DVector::<T>::from_column_slice(pi.as_slice());
    let total: T = pi.iter().fold(T::zero(), |acc, &x| acc + x);
    if total <= T::zero() {
        return Err(Error::Singular);
    }
    pi /= total;
    for a in 0..s {
        if pi[a] <= T::zero() {
            return Err(Error::Singular);
        }
    }
    StationaryDistribution::from_vector(p, pi)
}

/// Accumulated deviations of the k-step transition probabilities from
/// equilibrium: `gamma` sums from k = 0, `gamma_bar` from k = 1, so that
/// `gamma_bar[a][b] = gamma[a][b] - (delta[a][b] - pi[b])`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrices<T: Scalar> {
    pub gamma: DMatrix<T>,
    pub gamma_bar: DMatrix<T>,
}

/// Computes the gamma matrices through the fundamental matrix: solve
/// `(I - P + 1 pi') Z = I`, then `gamma = Z - 1 pi'`.
///
/// This requires only irreducibility. For a periodic chain the raw series
/// diverges, but the fundamental-matrix value is its Abel sum, which is
/// exactly what the count covariances need; see [`gamma_series`] for the
/// truncated-series evaluation used as a test oracle on aperiodic chains.
pub fn gamma_matrices<T: Scalar>(p: &TransitionMatrix<T>) -> Result<GammaMatrices<T>> {
    let pi = stationary_distribution(p)?;
    let s = p.size();
    let mut f = DMatrix::<T>::identity(s, s) - p.matrix();
    for a in 0..s {
        for b in 0..s {
            f[(a, b)] += pi.get(b);
        }
    }
    let z = f.lu().solve(&DMatrix::<T>::identity(s, s)).ok_or(Error::Singular)?;
    let mut gamma = z;
    for a in 0..s {
        for b in 0..s {
            gamma[(a, b)] -= pi.get(b);
        }
    }
    let mut gamma_bar = gamma.clone();
    for a in 0..s {
        for b in 0..s {
            let delta = if a == b { T::one() } else { T::zero() };
            gamma_bar[(a, b)] -= delta - pi.get(b);
        }
    }
    Ok(GammaMatrices { gamma, gamma_bar })
}

/// Truncated-series evaluation of the gamma matrices: partial sums of
/// `P^k - 1 pi'` until the term norm drops below `term_tol`.
///
/// Errors with [`Error::NotAperiodic`] when the second eigenvalue modulus
/// is at least `1 - 1e-12`, since the series only converges for aperiodic
/// chains.
pub fn gamma_series<T: Scalar>(
    p: &TransitionMatrix<T>,
    term_tol: T,
    max_terms: usize,
) -> Result<GammaMatrices<T>> {
    if !p.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let modulus = p.second_eigenvalue_modulus();
    if modulus >= T::one() - tol::<T>(APERIODICITY_EIGEN_TOL) {
        return Err(Error::NotAperiodic {
            modulus: modulus.to_f64().unwrap_or(f64::NAN),
        });
    }
    let pi = stationary_distribution(p)?;
    let s = p.size();
    // D_0 = I - 1 pi'; D_{k+1} = P D_k because P 1 = 1.
    let mut term = DMatrix::<T>::identity(s, s);
    for a in 0..s {
        for b in 0..s {
            term[(a, b)] -= pi.get(b);
        }
    }
    let d0 = term.clone();
    let mut gamma = DMatrix::<T>::zeros(s, s);
    let mut converged = false;
    for _ in 0..max_terms {
        gamma += &term;
        if term.abs().max() < term_tol {
            converged = true;
            break;
        }
        term = p.matrix() * term;
    }
    if !converged {
        return Err(Error::NotAperiodic {
            modulus: modulus.to_f64().unwrap_or(f64::NAN),
        });
    }
    let gamma_bar = &gamma - d0;
    Ok(GammaMatrices { gamma, gamma_bar })
}

/// How to draw the initial state of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialState {
    /// Draw `x_0` from the stationary distribution.
    Stationary,
    /// Start in the given state (0-based).
    Fixed(usize),
}

/// An observed or simulated path `x_0, ..., x_n` (0-based state indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainPath {
    states: StateSpace,
    x: Vec<usize>,
    seed: Option<u64>,
}

impl ChainPath {
    pub fn new(states: StateSpace, x: Vec<usize>) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::PathTooShort {
                len: x.len(),
                order: 2,
            });
        }
        let s = states.size();
        if let Some(&bad) = x.iter().find(|&&v| v >= s) {
            return Err(Error::DimensionMismatch(format!(
                "path contains state index {bad}, but the chain has {s} states"
            )));
        }
        Ok(Self {
            states,
            x,
            seed: None,
        })
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn indices(&self) -> &[usize] {
        &self.x
    }

    /// Number of transitions, i.e. `n` for a path `x_0, ..., x_n`.
    pub fn n_transitions(&self) -> usize {
        self.x.len() - 1
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Simulates a path of `n` transitions.
///
/// The seed-to-path map is fixed within a release: a `ChaCha8` generator
/// seeded with `seed` drives inverse-CDF draws (one uniform per step, one
/// more first when the start is stationary), with cumulative probabilities
/// accumulated in `f64`.
pub fn simulate<T: Scalar>(
    p: &TransitionMatrix<T>,
    n: usize,
    init: InitialState,
    seed: u64,
) -> Result<ChainPath> {
    if n < 1 {
        return Err(Error::InvalidSpec("simulation needs n >= 1".into()));
    }
    let s = p.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows_f64: Vec<Vec<f64>> = (0..s)
        .map(|a| {
            (0..s)
                .map(|b| p.get(a, b).to_f64().unwrap_or(0.0))
                .collect()
        })
        .collect();
    let draw = |weights: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    };
    let x0 = match init {
        InitialState::Stationary => {
            let pi = stationary_distribution(p)?;
            let w: Vec<f64> = (0..s).map(|a| pi.get(a).to_f64().unwrap_or(0.0)).collect();
            draw(&w, &mut rng)
        }
        InitialState::Fixed(a) => {
            if a >= s {
                return Err(Error::DimensionMismatch(format!(
                    "initial state {a} out of range for {s} states"
                )));
            }
            a
        }
    };
    let mut x = Vec::with_capacity(n + 1);
    x.push(x0);
    let mut current = x0;
    for _ in 0..n {
        current = draw(&rows_f64[current], &mut rng);
        x.push(current);
    }
    Ok(ChainPath {
        states: p.states().clone(),
        x,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state(alpha: f64, beta: f64) -> TransitionMatrix<f64> {
        let states = StateSpace::new(vec!["0", "1"]).unwrap();
        TransitionMatrix::new(
            states,
            DMatrix::from_row_slice(2, 2, &[1.0 - alpha, alpha, beta, 1.0 - beta]),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        let states = StateSpace::new(vec!["a", "b"]).unwrap();
        let err = TransitionMatrix::new(
            states.clone(),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.5, 0.5]),
        );
        assert!(matches!(err, Err(Error::NotStochastic { row: 0, .. })));
        let err = TransitionMatrix::new(
            states,
            DMatrix::from_row_slice(2, 2, &[-0.1, 1.1, 0.5, 0.5]),
        );
        assert!(matches!(err, Err(Error::BadEntry { .. })));
    }

    #[test]
    fn stationary_two_state_closed_form() {
        // alpha = .3, beta = .6 has equilibrium (beta, alpha)/(alpha+beta) = (2/3, 1/3).
        let p = two_state(0.3, 0.6);
        let pi = stationary_distribution(&p).unwrap();
        assert_abs_diff_eq!(pi.get(0), 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(pi.get(1), 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn stationary_symmetric_is_uniform() {
        for theta in [0.1, 0.37, 0.9] {
            let p = two_state(theta, theta);
            let pi = stationary_distribution(&p).unwrap();
            assert_abs_diff_eq!(pi.get(0), 0.5, epsilon = 1e-13);
        }
    }

    #[test]
    fn stationary_rejects_reducible() {
        let states = StateSpace::new(vec!["0", "1"]).unwrap();
        let p = TransitionMatrix::new(
            states,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(
            stationary_distribution(&p),
            Err(Error::NotIrreducible)
        ));
    }

    #[test]
    fn k_step_zero_is_identity() {
        let p = two_state(0.2, 0.7);
        let p0 = p.k_step(0);
        assert_eq!(p0.matrix(), &DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn k_step_symmetric_square() {
        let theta: f64 = 0.3;
        let p = two_state(theta, theta);
        let p2 = p.k_step(2);
        let diag = (1.0 - theta).powi(2) + theta * theta;
        let off = 2.0 * theta * (1.0 - theta);
        assert_abs_diff_eq!(p2.get(0, 0), diag, epsilon = 1e-15);
        assert_abs_diff_eq!(p2.get(0, 1), off, epsilon = 1e-15);
        assert_abs_diff_eq!(p2.get(1, 0), off, epsilon = 1e-15);
    }

    #[test]
    fn k_step_matches_spectral_formula() {
        // P^k = (1/(a+b)) [[b,a],[b,a]] + ((1-a-b)^k/(a+b)) [[a,-a],[-b,b]].
        let (a, b) = (0.3, 0.6);
        let p = two_state(a, b);
        let k = 5;
        let pk = p.k_step(k);
        let lam = (1.0_f64 - a - b).powi(k as i32);
        let s = a + b;
        let expect = [
            [(b + lam * a) / s, (a - lam * a) / s],
            [(b - lam * b) / s, (a + lam * b) / s],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(pk.get(i, j), expect[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gamma_two_state_closed_form() {
        let (a, b) = (0.3, 0.6);
        let p = two_state(a, b);
        let g = gamma_matrices(&p).unwrap();
        let c = 1.0 / (a + b).powi(2);
        let expect = [[c * a, -c * a], [-c * b, c * b]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(g.gamma[(i, j)], expect[i][j], epsilon = 1e-12);
            }
        }
        // gamma_bar = gamma - (I - 1 pi').
        let pi = stationary_distribution(&p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let delta = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(
                    g.gamma_bar[(i, j)],
                    g.gamma[(i, j)] - (delta - pi.get(j)),
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn gamma_rows_sum_to_zero() {
        let p = two_state(0.23, 0.48);
        let g = gamma_matrices(&p).unwrap();
        for a in 0..2 {
            let sum: f64 = (0..2).map(|b| g.gamma[(a, b)]).sum();
            assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_series_agrees_with_solve() {
        let p = two_state(0.3, 0.6);
        let solved = gamma_matrices(&p).unwrap();
        let series = gamma_series(&p, 1e-13, 1_000_000).unwrap();
        assert!((solved.gamma - series.gamma).abs().max() < 1e-9);
        assert!((solved.gamma_bar - series.gamma_bar).abs().max() < 1e-9);
    }

    #[test]
    fn gamma_series_rejects_periodic() {
        // Two-state flip chain has eigenvalue -1.
        let p = two_state(1.0, 1.0);
        assert!(matches!(
            gamma_series(&p, 1e-13, 10_000),
            Err(Error::NotAperiodic { .. })
        ));
        // The fundamental-matrix route still works (Abel sum).
        let g = gamma_matrices(&p).unwrap();
        // gamma = (I - 1 pi')/2 + ... : for the flip chain P^k alternates, Abel
        // sum of (-1)^k is 1/2, so gamma = (1/2)(I - 1 pi').
        assert_abs_diff_eq!(g.gamma[(0, 0)], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.gamma[(0, 1)], -0.25, epsilon = 1e-12);
    }

    #[test]
    fn aperiodicity_flag() {
        assert!(two_state(0.3, 0.6).is_aperiodic());
        assert!(!two_state(1.0, 1.0).is_aperiodic());
    }

    #[test]
    fn simulate_deterministic_cycle() {
        // p[a][b] = 1 if b = a+1 mod S cycles deterministically.
        let states = StateSpace::of_size(3).unwrap();
        let p = TransitionMatrix::new(
            states,
            DMatrix::from_row_slice(3, 3, &[0., 1., 0., 0., 0., 1., 1., 0., 0.]),
        )
        .unwrap();
        let path = simulate(&p, 6, InitialState::Fixed(0), 7).unwrap();
        assert_eq!(path.indices(), &[0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn simulate_is_deterministic_per_seed() {
        let p = two_state(0.3, 0.6);
        let a = simulate(&p, 200, InitialState::Stationary, 42).unwrap();
        let b = simulate(&p, 200, InitialState::Stationary, 42).unwrap();
        let c = simulate(&p, 200, InitialState::Stationary, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn simulate_lln_symmetric() {
        // Empirical transition frequency approaches 1/2 within 3 sqrt(.25/n).
        let n = 100_000;
        let p = two_state(0.5, 0.5);
        let path = simulate(&p, n, InitialState::Stationary, 11).unwrap();
        let flips = path
            .indices()
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count() as f64;
        let freq = flips / n as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }
}

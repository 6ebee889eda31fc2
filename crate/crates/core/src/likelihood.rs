//! The three log objectives as pure functions of (model, theta, counts):
//! full likelihood, pseudo-likelihood of any order, and the large-sample
//! composite (quasi) likelihood of any order, with exact gradients
//! assembled from the model's score functions.

use nalgebra::{DMatrix, DVector};

use crate::counts::TupleCounts;
use crate::error::{Error, Result};
use crate::model::ParametricModel;
use crate::scalar::{cast, Scalar};

/// Estimation method, with the composite order where one applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ml,
    /// Pseudo-likelihood of order `m >= 1` (conditioning blocks of length m).
    Pl { order: usize },
    /// Composite likelihood of order `k >= 2` (marginal blocks of length k).
    Ql { order: usize },
}

impl Method {
    /// Minimal tuple order the counts must support.
    pub fn required_counts_order(&self) -> usize {
        match self {
            Method::Ml => 2,
            Method::Pl { order } => order + 2,
            Method::Ql { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Ml => Ok(()),
            Method::Pl { order } if *order >= 1 => Ok(()),
            Method::Ql { order } if *order >= 2 => Ok(()),
            Method::Pl { order } => Err(Error::InvalidSpec(format!(
                "pseudo-likelihood order must be >= 1, got {order}"
            ))),
            Method::Ql { order } => Err(Error::InvalidSpec(format!(
                "composite-likelihood order must be >= 2, got {order}"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ml => write!(f, "ML"),
            Method::Pl { order } => write!(f, "PL({order})"),
            Method::Ql { order } => write!(f, "QL({order})"),
        }
    }
}

/// What to do when a cell has positive count but zero model probability:
/// fitting wants a hard error, grid scans want a `-inf` sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroProbPolicy {
    Strict,
    NegInfinity,
}

fn weighted_log_sum<T: Scalar>(
    weights: &DMatrix<T>,
    probs: &DMatrix<T>,
    policy: ZeroProbPolicy,
) -> Result<T> {
    let mut acc = T::zero();
    for a in 0..weights.nrows() {
        for b in 0..weights.ncols() {
            let w = weights[(a, b)];
            if w <= T::zero() {
                continue;
            }
            let p = probs[(a, b)];
            if p <= T::zero() {
                match policy {
                    ZeroProbPolicy::Strict => {
                        return Err(Error::ZeroProbability { row: a, col: b })
                    }
                    ZeroProbPolicy::NegInfinity => return Ok(-T::one() / T::zero()),
                }
            }
            acc += w * p.ln();
        }
    }
    Ok(acc)
}

/// `sum N[a][b] log p[a][b](theta)`; zero-count cells contribute nothing
/// even when their probability vanishes.
pub fn loglik_ml<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    counts: &TupleCounts<T>,
    policy: ZeroProbPolicy,
) -> Result<T> {
    let p = model.transition(theta)?;
    let pairs = counts.pair_matrix()?;
    weighted_log_sum(&pairs, p.matrix(), policy)
}

/// Pseudo-likelihood of order `m`: over (m+2)-windows, the log probability
/// of the m middle symbols given both endpoints,
/// `sum N[tuple] log{ prod one-step factors / p^(m+1)[first][last] }`.
pub fn loglik_pl<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    counts: &TupleCounts<T>,
    m: usize,
    policy: ZeroProbPolicy,
) -> Result<T> {
    Method::Pl { order: m }.validate()?;
    let needed = m + 2;
    if counts.order() < needed {
        return Err(Error::OrderMismatch {
            found: counts.order(),
            required: needed,
        });
    }
    let mut window = counts.clone();
    while window.order() > needed {
        window = window.marginalize_last()?;
    }
    let p = model.transition(theta)?;
    let mut value = T::zero();
    // One-step factors, cellwise over each adjacent pair of axes.
    for offset in 0..=m {
        let marginal = window.pair_marginal(offset)?;
        value += weighted_log_sum(&marginal, p.matrix(), policy)?;
        if !value.is_finite() {
            return Ok(value);
        }
    }
    // Normalizing (m+1)-step probabilities over (first, last).
    let ends = window.first_last_marginal()?;
    let p_m1 = p.k_step(m + 1);
    value -= weighted_log_sum(&ends, p_m1.matrix(), policy)?;
    Ok(value)
}

/// Large-sample composite likelihood of order `k`:
/// `sum N[a][.] log pi[a](theta) + (k-1) sum N[a][b] log p[a][b](theta)`,
/// with `N[a][.]` the row marginal of the pair counts.
pub fn loglik_ql<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    counts: &TupleCounts<T>,
    k: usize,
    policy: ZeroProbPolicy,
) -> Result<T> {
    Method::Ql { order: k }.validate()?;
    let p = model.transition(theta)?;
    let pi = model.stationary(theta)?;
    let pairs = counts.pair_matrix()?;
    let mut value = T::zero();
    for a in 0..pairs.nrows() {
        let row_total = (0..pairs.ncols()).fold(T::zero(), |acc, b| acc + pairs[(a, b)]);
        if row_total > T::zero() {
            value += row_total * pi.get(a).ln();
        }
    }
    value += cast::<T>((k - 1) as f64) * weighted_log_sum(&pairs, p.matrix(), policy)?;
    Ok(value)
}

/// Per-parameter derivative matrices of the one-step probabilities,
/// `dP/dtheta[r][a][b] = p[a][b] u[a][b][r]`.
fn transition_derivatives<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
) -> Result<Vec<DMatrix<T>>> {
    let p = model.transition(theta)?;
    let u = model.scores(theta)?;
    let s = model.n_states();
    let dim = model.dim();
    let mut out = vec![DMatrix::<T>::zeros(s, s); dim];
    for a in 0..s {
        for b in 0..s {
            let pab = p.get(a, b);
            if pab > T::zero() {
                let uab = u.get(a, b);
                for (r, d) in out.iter_mut().enumerate() {
                    d[(a, b)] = pab * uab[r];
                }
            }
        }
    }
    Ok(out)
}

/// Scores of the mu-step probabilities,
/// `w[a][c][r] = d log p^mu[a][c] / d theta[r]`, via the product rule
/// `d(P^mu) = sum_j P^j dP P^(mu-1-j)`.
pub(crate) fn multi_step_scores<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    mu: usize,
) -> Result<Vec<DMatrix<T>>> {
    let p = model.transition(theta)?;
    let dp = transition_derivatives(model, theta)?;
    let s = model.n_states();
    let powers: Vec<DMatrix<T>> = (0..mu).map(|j| p.k_step(j).matrix().clone()).collect();
    let p_mu = p.k_step(mu);
    let dim = model.dim();
    let mut out = Vec::with_capacity(dim);
    for dpr in &dp {
        let mut total = DMatrix::<T>::zeros(s, s);
        for j in 0..mu {
            total += &powers[j] * dpr * &powers[mu - 1 - j];
        }
        for a in 0..s {
            for c in 0..s {
                let denom = p_mu.get(a, c);
                total[(a, c)] = if denom > T::zero() {
                    total[(a, c)] / denom
                } else {
                    T::zero()
                };
            }
        }
        out.push(total);
    }
    Ok(out)
}

fn weighted_score_sum<T: Scalar>(
    weights: &DMatrix<T>,
    u: impl Fn(usize, usize, usize) -> T,
    dim: usize,
) -> DVector<T> {
    let mut acc = DVector::<T>::zeros(dim);
    for a in 0..weights.nrows() {
        for b in 0..weights.ncols() {
            let w = weights[(a, b)];
            if w != T::zero() {
                for r in 0..dim {
                    acc[r] += w * u(a, b, r);
                }
            }
        }
    }
    acc
}

/// Exact gradient of the ML objective: `sum N[a][b] u[a][b]`.
pub fn gradient_ml<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    counts: &TupleCounts<T>,
) -> Result<DVector<T>> {
    let u = model.scores(theta)?;
    let pairs = counts.pair_matrix()?;
    Ok(weighted_score_sum(
        &pairs,
        |a, b, r| u.get(a, b)[r],
        model.dim(),
    ))
}

/// Exact gradient of the order-m pseudo-likelihood.
pub fn gradient_pl<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    counts: &TupleCounts<T>,
    m: usize,
) -> Result<DVector<T>> {
    Method::Pl { order: m }.validate()?;
    let needed = m + 2;
    if counts.order() < needed {
        return Err(Error::OrderMismatch {
            found: counts.order(),
            required: needed,
        });
    }
    let mut window = counts.clone();
    while window.order() > needed {
        window = window.marginalize_last()?;
    }
    let u = model.scores(theta)?;
    let dim = model.dim();
    let mut grad = DVector::<T>::zeros(dim);
    for offset in 0..=m {
        let marginal = window.pair_marginal(offset)?;
        grad += weighted_score_sum(&marginal, |a, b, r| u.get(a, b)[r], dim);
    }
    let ends = window.first_last_marginal()?;
    let w = multi_step_scores(model, theta, m + 1)?;
    grad -= weighted_score_sum(&ends, |a, c, r| w[r][(a, c)], dim);
    Ok(grad)
}

/// Exact gradient of the order-k composite likelihood:
/// `sum N[a][.] v[a] + (k-1) sum N[a][b] u[a][b]`.
pub fn gradient_ql<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    counts: &TupleCounts<T>,
    k: usize,
) -> Result<DVector<T>> {
    Method::Ql { order: k }.validate()?;
    let v = model.stationary_scores(theta)?;
    let row_totals = counts.row_marginals()?;
    let dim = model.dim();
    let mut grad = DVector::<T>::zeros(dim);
    for a in 0..row_totals.len() {
        grad += &v[a] * row_totals[a];
    }
    grad += gradient_ml(model, theta, counts)? * cast::<T>((k - 1) as f64);
    Ok(grad)
}

/// An estimation objective bound to a model and data.
#[derive(Debug, Clone)]
pub struct Objective<'a, T: Scalar> {
    method: Method,
    model: &'a ParametricModel<T>,
    counts: &'a TupleCounts<T>,
}

impl<'a, T: Scalar> Objective<'a, T> {
    pub fn new(
        method: Method,
        model: &'a ParametricModel<T>,
        counts: &'a TupleCounts<T>,
    ) -> Result<Self> {
        method.validate()?;
        if counts.n_states() != model.n_states() {
            return Err(Error::DimensionMismatch(format!(
                "counts cover {} states, model has {}",
                counts.n_states(),
                model.n_states()
            )));
        }
        if counts.order() < method.required_counts_order() {
            return Err(Error::OrderMismatch {
                found: counts.order(),
                required: method.required_counts_order(),
            });
        }
        Ok(Self {
            method,
            model,
            counts,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn model(&self) -> &'a ParametricModel<T> {
        self.model
    }

    pub fn counts(&self) -> &'a TupleCounts<T> {
        self.counts
    }

    pub fn value(&self, theta: &DVector<T>, policy: ZeroProbPolicy) -> Result<T> {
        match self.method {
            Method::Ml => loglik_ml(self.model, theta, self.counts, policy),
            Method::Pl { order } => loglik_pl(self.model, theta, self.counts, order, policy),
            Method::Ql { order } => loglik_ql(self.model, theta, self.counts, order, policy),
        }
    }

    pub fn gradient(&self, theta: &DVector<T>) -> Result<DVector<T>> {
        match self.method {
            Method::Ml => gradient_ml(self.model, theta, self.counts),
            Method::Pl { order } => gradient_pl(self.model, theta, self.counts, order),
            Method::Ql { order } => gradient_ql(self.model, theta, self.counts, order),
        }
    }
}

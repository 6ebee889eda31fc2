//! Numerical maximization of any objective over a model's domain, plus the
//! closed-form estimators used as oracles against the generic optimizer.
//!
//! The ascent runs in the unconstrained space given by the model's
//! reparameterization (logit / log / additive-logistic blocks); joint
//! linear constraints that couple blocks are enforced by shrinking the
//! line-search step back into the open domain, where the log objectives
//! blow down to `-inf` anyway whenever the boundary cell has data.

use nalgebra::{DMatrix, DVector};

use crate::counts::TupleCounts;
use crate::error::{Error, Result};
use crate::likelihood::{loglik_ml, loglik_pl, loglik_ql, Method, Objective, ZeroProbPolicy};
use crate::model::{ModelSpec, ParametricModel};
use crate::scalar::{cast, Scalar};

/// Optimizer controls. Tolerances apply to the per-window mean objective
/// (the log objective divided by the number of counted windows), keeping
/// them meaningful across sample sizes.
#[derive(Debug, Clone)]
pub struct FitOptions<T: Scalar> {
    pub n_starts: usize,
    pub grad_tol: T,
    pub step_tol: T,
    pub max_iter: usize,
    /// Explicit start points in the original parameterization; overrides
    /// the deterministic default starts.
    pub start_points: Option<Vec<DVector<T>>>,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            n_starts: 5,
            grad_tol: cast(1e-8),
            step_tol: cast(1e-10),
            max_iter: 500,
            start_points: None,
        }
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone)]
pub struct FitResult<T: Scalar> {
    pub theta_hat: DVector<T>,
    pub method: Method,
    pub loglik_at_max: T,
    /// Euclidean norm of the mean-objective gradient at the maximizer.
    pub gradient_norm: T,
    pub converged: bool,
    pub n_starts_used: usize,
    pub best_start_index: usize,
}

struct StartOutcome<T: Scalar> {
    theta: DVector<T>,
    value: T,
    grad_norm: T,
    converged: bool,
    boundary_escape: bool,
}

/// Deterministic start points in the unconstrained space: the model's
/// feasible anchor, then Kronecker low-discrepancy shifts around it, each
/// pulled back toward the anchor until the joint constraints hold.
fn default_starts<T: Scalar>(model: &ParametricModel<T>, n_starts: usize) -> Vec<DVector<T>> {
    let dim = model.dim();
    let reparam = model.reparam();
    let anchor = reparam.to_z(&model.feasible_anchor());
    // Generalized golden-ratio sequence: x^(dim+1) = x + 1.
    let mut phi = 1.5f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alphas: Vec<f64> = (1..=dim).map(|j| (1.0 / phi).powi(j as i32)).collect();
    let mut starts = Vec::with_capacity(n_starts);
    for i in 0..n_starts {
        let mut z = if i == 0 {
            anchor.clone()
        } else {
            &anchor
                + DVector::from_fn(dim, |j, _| {
                    let frac = (i as f64 * alphas[j]).fract();
                    cast::<T>(2.5 * (2.0 * frac - 1.0))
                })
        };
        for _ in 0..40 {
            if model.in_domain(&reparam.to_theta(&z)) {
                break;
            }
            z = (&z + &anchor) * cast::<T>(0.5);
        }
        starts.push(z);
    }
    starts
}

/// BFGS ascent of `f` from one start; `f` and `grad` work in the original
/// parameterization, feasibility is `in_domain` plus finiteness of `f`.
fn ascend_from<T: Scalar>(
    model: &ParametricModel<T>,
    f: &dyn Fn(&DVector<T>) -> Result<T>,
    grad: &dyn Fn(&DVector<T>) -> Result<DVector<T>>,
    z0: DVector<T>,
    options: &FitOptions<T>,
) -> Option<StartOutcome<T>> {
    let reparam = model.reparam();
    let dim = reparam.dim();
    let eval = |z: &DVector<T>| -> Option<(DVector<T>, T)> {
        let theta = reparam.to_theta(z);
        if !model.in_domain(&theta) {
            return None;
        }
        match f(&theta) {
            Ok(v) if v.is_finite() => Some((theta, v)),
            _ => None,
        }
    };
    let grad_z_at = |z: &DVector<T>, theta: &DVector<T>| -> Result<(DVector<T>, DVector<T>)> {
        let g_theta = grad(theta)?;
        let jac = reparam.jacobian(z);
        Ok((jac.transpose() * &g_theta, g_theta))
    };

    let mut z = z0;
    let (mut theta, mut value) = eval(&z)?;
    let (mut g_z, mut g_theta) = grad_z_at(&z, &theta).ok()?;
    let mut b_inv = DMatrix::<T>::identity(dim, dim);
    let mut converged = false;
    let c1 = cast::<T>(1e-4);
    let mut last_step_inf = T::max_value().unwrap();

    for _ in 0..options.max_iter {
        if g_theta.norm() <= options.grad_tol && last_step_inf <= options.step_tol {
            converged = true;
            break;
        }
        let mut direction = &b_inv * &g_z;
        if direction.dot(&g_z) <= T::zero() {
            b_inv = DMatrix::identity(dim, dim);
            direction = g_z.clone();
        }
        // Backtracking: first into feasibility, then Armijo ascent.
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..80 {
            let z_new = &z + &direction * t;
            if let Some((theta_new, value_new)) = eval(&z_new) {
                if value_new >= value + c1 * t * direction.dot(&g_z) {
                    accepted = Some((z_new, theta_new, value_new));
                    break;
                }
            }
            t *= cast::<T>(0.5);
        }
        let Some((z_new, theta_new, value_new)) = accepted else {
            // Line search stalled; converged only if already at a
            // stationary point.
            if g_theta.norm() <= options.grad_tol {
                converged = true;
                last_step_inf = T::zero();
            }
            break;
        };
        let (g_z_new, g_theta_new) = match grad_z_at(&z_new, &theta_new) {
            Ok(g) => g,
            Err(_) => break,
        };
        // BFGS update on the minimization problem for -f: with s the step
        // and y the change of the ascent gradient, the usual curvature
        // condition becomes s'y < 0.
        let s = &z_new - &z;
        let y = &g_z_new - &g_z;
        let sy = s.dot(&y);
        if -sy > cast::<T>(1e-12) * s.norm() * y.norm() {
            // Inverse update for the minimization of -f; with rho = -1/s'y
            // it reads H + rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'.
            let rho = -T::one() / sy;
            let by = &b_inv * &y;
            let yby = y.dot(&by);
            let ss = &s * s.transpose();
            let bys = &by * s.transpose();
            b_inv = b_inv.clone() + (&bys + bys.transpose()) * rho + ss * (rho * rho * yby + rho);
        }
        last_step_inf = (&theta_new - &theta).amax();
        z = z_new;
        theta = theta_new;
        value = value_new;
        g_z = g_z_new;
        g_theta = g_theta_new;
    }
    // One more check in case the loop ended exactly on the tolerances.
    if !converged && g_theta.norm() <= options.grad_tol && last_step_inf <= options.step_tol {
        converged = true;
    }
    let boundary_escape = z.amax() > cast::<T>(30.0);
    Some(StartOutcome {
        theta,
        value,
        grad_norm: g_theta.norm(),
        converged,
        boundary_escape,
    })
}

/// Multistart maximization in the model's reparameterized space.
///
/// `f` and `grad` see the original parameterization. Returns the best
/// converged start (ties resolved by start index).
pub(crate) fn maximize<T: Scalar>(
    model: &ParametricModel<T>,
    f: &dyn Fn(&DVector<T>) -> Result<T>,
    grad: &dyn Fn(&DVector<T>) -> Result<DVector<T>>,
    options: &FitOptions<T>,
) -> Result<(DVector<T>, T, T, usize, usize)> {
    let reparam = model.reparam();
    let starts: Vec<DVector<T>> = match &options.start_points {
        Some(points) => points.iter().map(|theta| reparam.to_z(theta)).collect(),
        None => default_starts(model, options.n_starts.max(1)),
    };
    let n_starts = starts.len();
    let mut best: Option<(usize, StartOutcome<T>)> = None;
    let mut boundary_escapes = 0usize;
    for (index, z0) in starts.into_iter().enumerate() {
        let Some(outcome) = ascend_from(model, f, grad, z0, options) else {
            continue;
        };
        if outcome.boundary_escape && !outcome.converged {
            boundary_escapes += 1;
        }
        if outcome.converged {
            let better = match &best {
                None => true,
                Some((_, incumbent)) => outcome.value > incumbent.value,
            };
            if better {
                best = Some((index, outcome));
            }
        }
    }
    match best {
        Some((index, outcome)) => Ok((
            outcome.theta,
            outcome.value,
            outcome.grad_norm,
            index,
            n_starts,
        )),
        None if boundary_escapes == n_starts => Err(Error::DataDegenerate(
            "every start ran to the domain boundary; the objective appears unbounded there"
                .into(),
        )),
        None => Err(Error::NoConvergence { starts: n_starts }),
    }
}

/// Maximizes the objective over the model domain.
pub fn fit<T: Scalar>(objective: &Objective<'_, T>, options: &FitOptions<T>) -> Result<FitResult<T>> {
    let counts = objective.counts();
    let total = counts.total();
    if !(total > T::zero()) {
        return Err(Error::DataDegenerate("counts are empty".into()));
    }
    let model = objective.model();
    let scale = T::one() / total;
    let f = |theta: &DVector<T>| -> Result<T> {
        objective.value(theta, ZeroProbPolicy::Strict).map(|v| v * scale)
    };
    let g = |theta: &DVector<T>| -> Result<DVector<T>> {
        objective.gradient(theta).map(|g| g * scale)
    };
    let (theta_hat, value, grad_norm, best_start_index, n_starts_used) =
        maximize(model, &f, &g, options)?;
    Ok(FitResult {
        theta_hat,
        method: objective.method(),
        loglik_at_max: value * total,
        gradient_norm: grad_norm,
        converged: true,
        n_starts_used,
        best_start_index,
    })
}

/// The printed closed-form estimators, used as oracles against [`fit`].
pub fn closed_form_fit<T: Scalar>(
    model: &ParametricModel<T>,
    method: Method,
    counts: &TupleCounts<T>,
) -> Result<FitResult<T>> {
    let theta_hat = match (model.spec(), method) {
        (ModelSpec::SymmetricTwoState, Method::Ml) => {
            let n = counts.pair_matrix()?;
            let total = n.sum();
            DVector::from_element(1, (n[(0, 1)] + n[(1, 0)]) / total)
        }
        (ModelSpec::SymmetricTwoState, Method::Pl { order: 1 }) => {
            if counts.order() < 3 {
                return Err(Error::OrderMismatch {
                    found: counts.order(),
                    required: 3,
                });
            }
            let mut c3 = counts.clone();
            while c3.order() > 3 {
                c3 = c3.marginalize_last()?;
            }
            let flips = c3.get(&[0, 1, 0]) + c3.get(&[1, 0, 1]);
            let ends = c3.first_last_marginal()?;
            let same_ends = ends[(0, 0)] + ends[(1, 1)];
            let rho = flips / same_ends;
            let root = rho.sqrt();
            DVector::from_element(1, root / (root + (T::one() - rho).sqrt()))
        }
        (ModelSpec::GeneralTwoState, Method::Ml) => {
            let n = counts.pair_matrix()?;
            DVector::from_column_slice(&[
                n[(0, 1)] / (n[(0, 0)] + n[(0, 1)]),
                n[(1, 0)] / (n[(1, 0)] + n[(1, 1)]),
            ])
        }
        (ModelSpec::Ising1d, Method::Ml) => {
            let n = counts.pair_matrix()?;
            DVector::from_element(1, ((n[(0, 0)] + n[(1, 1)]) / (n[(0, 1)] + n[(1, 0)])).ln())
        }
        (ModelSpec::Ising1d, Method::Pl { order: 1 }) => {
            if counts.order() < 3 {
                return Err(Error::OrderMismatch {
                    found: counts.order(),
                    required: 3,
                });
            }
            let mut c3 = counts.clone();
            while c3.order() > 3 {
                c3 = c3.marginalize_last()?;
            }
            let stays = c3.get(&[0, 0, 0]) + c3.get(&[1, 1, 1]);
            let flips = c3.get(&[0, 1, 0]) + c3.get(&[1, 0, 1]);
            DVector::from_element(1, cast::<T>(0.5) * (stays / flips).ln())
        }
        (ModelSpec::ReflectingWalk { n_states }, Method::Ml) => {
            let n = counts.pair_matrix()?;
            let k = *n_states;
            let mut up = T::zero();
            let mut down = T::zero();
            for i in 1..k - 1 {
                up += n[(i, i + 1)];
                down += n[(i, i - 1)];
            }
            DVector::from_element(1, up / (up + down))
        }
        (ModelSpec::Saturated { n_states }, Method::Ml) => {
            let n = counts.pair_matrix()?;
            let s = *n_states;
            let mut theta = DVector::zeros(s * (s - 1));
            for a in 0..s {
                let row_total = (0..s).fold(T::zero(), |acc, b| acc + n[(a, b)]);
                for b in 0..s - 1 {
                    theta[a * (s - 1) + b] = n[(a, b)] / row_total;
                }
            }
            theta
        }
        _ => return Err(Error::NoClosedForm),
    };
    let scale = T::one() / counts.total();
    let value = match method {
        Method::Ml => loglik_ml(model, &theta_hat, counts, ZeroProbPolicy::Strict)?,
        Method::Pl { order } => loglik_pl(model, &theta_hat, counts, order, ZeroProbPolicy::Strict)?,
        Method::Ql { order } => loglik_ql(model, &theta_hat, counts, order, ZeroProbPolicy::Strict)?,
    };
    let objective = Objective::new(method, model, counts)?;
    let grad_norm = (objective.gradient(&theta_hat)? * scale).norm();
    Ok(FitResult {
        theta_hat,
        method,
        loglik_at_max: value,
        gradient_norm: grad_norm,
        converged: true,
        n_starts_used: 0,
        best_start_index: 0,
    })
}

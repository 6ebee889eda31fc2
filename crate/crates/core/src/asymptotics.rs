//! Limit-distribution machinery: the information matrix and the sandwich
//! variance matrices of the three estimation methods, covariance oracles
//! for pair and triplet counters, delta-method inference for derived
//! parameters, and seeded Monte Carlo studies.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chain::{gamma_matrices, simulate, InitialState, TransitionMatrix};
use crate::counts::count_tuples;
use crate::error::{Error, Result};
use crate::estimate::{fit, FitOptions};
use crate::likelihood::{Method, Objective};
use crate::model::ParametricModel;
use crate::scalar::{cast, fd_step, Scalar};

/// Expected-information pieces for the full likelihood: `j_by_state[a] =
/// sum_b p[a][b] u[a][b] u[a][b]'` and `j = sum_a pi[a] j_by_state[a]`.
#[derive(Debug, Clone)]
pub struct MlIngredients<T: Scalar> {
    pub j: DMatrix<T>,
    pub j_by_state: Vec<DMatrix<T>>,
}

/// Ingredient matrices of the composite-likelihood sandwich.
#[derive(Debug, Clone)]
pub struct QlIngredients<T: Scalar> {
    pub h: DMatrix<T>,
    pub g: DMatrix<T>,
    pub l: DMatrix<T>,
    /// `kappa[b] = sum_c gamma[b][c] v[c]` (built from `gamma`, not
    /// `gamma_bar`).
    pub kappa: Vec<DVector<T>>,
    pub order: usize,
    pub j_k: DMatrix<T>,
    pub k_k: DMatrix<T>,
}

/// Ingredient matrices of the pseudo-likelihood sandwich (order 1).
#[derive(Debug, Clone)]
pub struct PlIngredients<T: Scalar> {
    /// Two-step scores `w[a][c] = d log p2[a][c] / d theta`.
    pub w: Vec<DVector<T>>,
    pub m: DMatrix<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub j0: DMatrix<T>,
    pub k0: DMatrix<T>,
}

/// Which ingredient set backs an [`AvarResult`].
#[derive(Debug, Clone)]
pub enum Ingredients<T: Scalar> {
    Ml(MlIngredients<T>),
    Ql(QlIngredients<T>),
    Pl(Box<(MlIngredients<T>, PlIngredients<T>)>),
}

/// Limit covariance of `sqrt(n) (theta_hat - theta_0)` for one method.
#[derive(Debug, Clone)]
pub struct AvarResult<T: Scalar> {
    pub method: Method,
    pub sigma: DMatrix<T>,
    pub sds: DVector<T>,
    pub ingredients: Ingredients<T>,
}

fn check_irreducible<T: Scalar>(p: &TransitionMatrix<T>) -> Result<()> {
    if p.is_irreducible() {
        Ok(())
    } else {
        Err(Error::NotIrreducible)
    }
}

/// Expected information `J` of the full likelihood at `theta`.
pub fn info_j<T: Scalar>(model: &ParametricModel<T>, theta: &DVector<T>) -> Result<MlIngredients<T>> {
    let p = model.transition(theta)?;
    check_irreducible(&p)?;
    let pi = model.stationary(theta)?;
    let u = model.scores(theta)?;
    let s = model.n_states();
    let dim = model.dim();
    let mut j = DMatrix::<T>::zeros(dim, dim);
    let mut j_by_state = Vec::with_capacity(s);
    for a in 0..s {
        let mut ja = DMatrix::<T>::zeros(dim, dim);
        for b in 0..s {
            let pab = p.get(a, b);
            if pab > T::zero() {
                let uab = u.get(a, b);
                ja += uab * uab.transpose() * pab;
            }
        }
        j += &ja * pi.get(a);
        j_by_state.push(ja);
    }
    Ok(MlIngredients { j, j_by_state })
}

/// QL sandwich ingredients at `theta` for composite order `k`.
pub fn ql_ingredients<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    k: usize,
) -> Result<QlIngredients<T>> {
    Method::Ql { order: k }.validate()?;
    let p = model.transition(theta)?;
    check_irreducible(&p)?;
    let pi = model.stationary(theta)?;
    let u = model.scores(theta)?;
    let v = model.stationary_scores(theta)?;
    let gammas = gamma_matrices(&p)?;
    let ml = info_j(model, theta)?;
    let s = model.n_states();
    let dim = model.dim();

    let mut h = DMatrix::<T>::zeros(dim, dim);
    for a in 0..s {
        h += &v[a] * v[a].transpose() * pi.get(a);
    }
    let mut g = DMatrix::<T>::zeros(dim, dim);
    for a in 0..s {
        for b in 0..s {
            g += &v[a] * v[b].transpose() * (pi.get(a) * gammas.gamma_bar[(a, b)]);
        }
    }
    let kappa: Vec<DVector<T>> = (0..s)
        .map(|b| {
            let mut acc = DVector::<T>::zeros(dim);
            for c in 0..s {
                acc += &v[c] * gammas.gamma[(b, c)];
            }
            acc
        })
        .collect();
    let mut l = DMatrix::<T>::zeros(dim, dim);
    for a in 0..s {
        for b in 0..s {
            let weight = pi.get(a) * p.get(a, b);
            if weight > T::zero() {
                l += u.get(a, b) * kappa[b].transpose() * weight;
            }
        }
    }
    let km1 = cast::<T>((k - 1) as f64);
    let j_k = &ml.j * km1 + &h;
    let k_k = &ml.j * (km1 * km1) + &h + &g + g.transpose() + (&l + l.transpose()) * km1;
    Ok(QlIngredients {
        h,
        g,
        l,
        kappa,
        order: k,
        j_k,
        k_k,
    })
}

/// PL sandwich ingredients at `theta` (conditioning order 1).
pub fn pl_ingredients<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
) -> Result<PlIngredients<T>> {
    let p = model.transition(theta)?;
    check_irreducible(&p)?;
    let pi = model.stationary(theta)?;
    let u = model.scores(theta)?;
    let ml = info_j(model, theta)?;
    let s = model.n_states();
    let dim = model.dim();
    let p2 = p.k_step(2);

    // w[a][c] = sum_b p[a][b] p[b][c] (u[a][b] + u[b][c]) / p2[a][c].
    let mut w = vec![DVector::<T>::zeros(dim); s * s];
    for a in 0..s {
        for c in 0..s {
            let denom = p2.get(a, c);
            if denom <= T::zero() {
                continue;
            }
            let mut acc = DVector::<T>::zeros(dim);
            for b in 0..s {
                let weight = p.get(a, b) * p.get(b, c);
                if weight > T::zero() {
                    acc += (u.get(a, b) + u.get(b, c)) * weight;
                }
            }
            w[a * s + c] = acc / denom;
        }
    }

    let mut m = DMatrix::<T>::zeros(dim, dim);
    for a in 0..s {
        for c in 0..s {
            let weight = pi.get(a) * p2.get(a, c);
            if weight > T::zero() {
                let wac = &w[a * s + c];
                m += wac * wac.transpose() * weight;
            }
        }
    }

    let mut r = DMatrix::<T>::zeros(dim, dim);
    for a in 0..s {
        for b in 0..s {
            for c in 0..s {
                let weight = pi.get(a) * p.get(a, b) * p.get(b, c);
                if weight > T::zero() {
                    r += (u.get(a, b) + u.get(b, c)) * w[a * s + c].transpose() * weight;
                }
            }
        }
    }

    // Q = sum_{a,c,d,f} pi[a] p[a][d] p[d][c] p[c][f] w[a][c] w[d][f]'
    // as a matrix chain: A_r[d][c] = sum_a pi[a] p[a][d] W_r[a][c],
    // B_s[c][d] = sum_f p[c][f] W_s[d][f], then
    // Q[r][s] = sum_{c,d} A_r[d][c] p[d][c] B_s[c][d].
    let w_mats: Vec<DMatrix<T>> = (0..dim)
        .map(|rr| DMatrix::from_fn(s, s, |a, c| w[a * s + c][rr]))
        .collect();
    let pi_diag = DMatrix::from_fn(s, s, |i, jj| {
        if i == jj {
            pi.get(i)
        } else {
            T::zero()
        }
    });
    let a_mats: Vec<DMatrix<T>> = w_mats
        .iter()
        .map(|wr| p.matrix().transpose() * &pi_diag * wr)
        .collect();
    let b_mats: Vec<DMatrix<T>> = w_mats
        .iter()
        .map(|ws| p.matrix() * ws.transpose())
        .collect();
    let mut q = DMatrix::<T>::zeros(dim, dim);
    for rr in 0..dim {
        for ss in 0..dim {
            let mut acc = T::zero();
            for d in 0..s {
                for c in 0..s {
                    acc += a_mats[rr][(d, c)] * p.get(d, c) * b_mats[ss][(c, d)];
                }
            }
            q[(rr, ss)] = acc;
        }
    }

    let two = cast::<T>(2.0);
    let j0 = &ml.j * two - &m;
    let k0 = &ml.j * cast::<T>(4.0) - &m * cast::<T>(3.0) + &q + q.transpose();
    Ok(PlIngredients {
        w,
        m,
        q,
        r,
        j0,
        k0,
    })
}

/// Literal four-index loop for `Q`, kept for testing the chained form.
pub fn pl_q_literal<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
) -> Result<DMatrix<T>> {
    let ingredients = pl_ingredients(model, theta)?;
    let p = model.transition(theta)?;
    let pi = model.stationary(theta)?;
    let s = model.n_states();
    let dim = model.dim();
    let mut q = DMatrix::<T>::zeros(dim, dim);
    for a in 0..s {
        for c in 0..s {
            for d in 0..s {
                for f in 0..s {
                    let weight = pi.get(a) * p.get(a, d) * p.get(d, c) * p.get(c, f);
                    if weight > T::zero() {
                        q += &ingredients.w[a * s + c] * ingredients.w[d * s + f].transpose()
                            * weight;
                    }
                }
            }
        }
    }
    Ok(q)
}

/// Inverts a symmetric information-type matrix through its SVD, flagging
/// condition estimates beyond 1e12.
fn invert_information<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let sym = (m + m.transpose()) * cast::<T>(0.5);
    let svd = sym.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > T::zero()) || max_sv / min_sv > cast::<T>(1e12) {
        return Err(Error::SingularInformation {
            cond: (max_sv / min_sv).to_f64().unwrap_or(f64::INFINITY),
        });
    }
    let u = svd.u.as_ref().ok_or(Error::Singular)?;
    let vt = svd.v_t.as_ref().ok_or(Error::Singular)?;
    let mut inv_s = DMatrix::<T>::zeros(m.nrows(), m.ncols());
    for i in 0..svd.singular_values.len() {
        inv_s[(i, i)] = T::one() / svd.singular_values[i];
    }
    Ok(vt.transpose() * inv_s * u.transpose())
}

/// Limit covariance of `sqrt(n)(theta_hat - theta_0)` for the method:
/// `J^-1`, `J_k^-1 K_k J_k^-1`, or `J_0^-1 K_0 J_0^-1`.
pub fn avar<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
    method: Method,
) -> Result<AvarResult<T>> {
    method.validate()?;
    let (sigma, ingredients) = match method {
        Method::Ml => {
            let ml = info_j(model, theta)?;
            (invert_information(&ml.j)?, Ingredients::Ml(ml))
        }
        Method::Ql { order } => {
            let ql = ql_ingredients(model, theta, order)?;
            let jk_inv = invert_information(&ql.j_k)?;
            (&jk_inv * &ql.k_k * &jk_inv, Ingredients::Ql(ql))
        }
        Method::Pl { order: 1 } => {
            let ml = info_j(model, theta)?;
            let pl = pl_ingredients(model, theta)?;
            let j0_inv = invert_information(&pl.j0)?;
            let sigma = &j0_inv * &pl.k0 * &j0_inv;
            (sigma, Ingredients::Pl(Box::new((ml, pl))))
        }
        Method::Pl { order } => {
            return Err(Error::InvalidSpec(format!(
                "no closed-form limit variance for pseudo-likelihood order {order}; only order 1 \
                 is covered"
            )))
        }
    };
    let sigma = (&sigma + sigma.transpose()) * cast::<T>(0.5);
    let dim = sigma.nrows();
    let sds = DVector::from_fn(dim, |i, _| sigma[(i, i)].max(T::zero()).sqrt());
    Ok(AvarResult {
        method,
        sigma,
        sds,
        ingredients,
    })
}

/// A scalar function of the parameters with a gradient for the delta
/// method.
pub struct FocusParameter<T: Scalar> {
    name: String,
    psi: Box<dyn Fn(&DVector<T>) -> Result<T> + Send + Sync>,
    gradient: Option<Box<dyn Fn(&DVector<T>) -> Result<DVector<T>> + Send + Sync>>,
}

impl<T: Scalar> std::fmt::Debug for FocusParameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FocusParameter")
            .field("name", &self.name)
            .finish()
    }
}

impl<T: Scalar> FocusParameter<T> {
    pub fn new(
        name: impl Into<String>,
        psi: impl Fn(&DVector<T>) -> Result<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            psi: Box::new(psi),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&DVector<T>) -> Result<DVector<T>> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Projection onto coordinate `j`.
    pub fn coordinate(j: usize) -> Self {
        Self::new(format!("theta[{j}]"), move |theta| Ok(theta[j])).with_gradient(move |theta| {
            let mut g = DVector::zeros(theta.len());
            g[j] = T::one();
            Ok(g)
        })
    }

    /// The log-determinant divergence measure `-(1/4) log |P(theta)|`
    /// with its gradient assembled from `tr(P^-1 dP/dtheta_r)`.
    pub fn asynchronous_distance(model: ParametricModel<T>) -> Self {
        let model_for_grad = model.clone();
        Self::new("asynchronous-distance", move |theta| {
            let p = model.transition(theta)?;
            let det = p.matrix().determinant();
            if det <= T::zero() {
                return Err(Error::SingularP {
                    det: det.to_f64().unwrap_or(f64::NAN),
                });
            }
            Ok(-det.ln() / cast::<T>(4.0))
        })
        .with_gradient(move |theta| {
            async_distance_gradient_trace(&model_for_grad, theta)
        })
    }

    pub fn value(&self, theta: &DVector<T>) -> Result<T> {
        (self.psi)(theta)
    }

    /// Analytic gradient when supplied, else five-point central
    /// differences of `psi`.
    pub fn gradient(&self, theta: &DVector<T>) -> Result<DVector<T>> {
        if let Some(g) = &self.gradient {
            return g(theta);
        }
        self.gradient_fd(theta)
    }

    pub fn gradient_fd(&self, theta: &DVector<T>) -> Result<DVector<T>> {
        let dim = theta.len();
        let mut g = DVector::zeros(dim);
        let twelve = cast::<T>(12.0);
        let eight = cast::<T>(8.0);
        for j in 0..dim {
            let h = fd_step(theta[j]);
            let eval = |mult: f64| -> Result<T> {
                let mut t = theta.clone();
                t[j] += h * cast::<T>(mult);
                (self.psi)(&t)
            };
            let d1 = eval(1.0)? - eval(-1.0)?;
            let d2 = eval(2.0)? - eval(-2.0)?;
            g[j] = (eight * d1 - d2) / (twelve * h);
        }
        Ok(g)
    }
}

/// Gradient of `-(1/4) log |P(theta)|` through the trace identity
/// `d log|P| / d theta_r = tr(P^-1 dP/dtheta_r)` with `dP = p u` from the
/// model scores.
pub fn async_distance_gradient_trace<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
) -> Result<DVector<T>> {
    let p = model.transition(theta)?;
    let det = p.matrix().determinant();
    if det <= T::zero() {
        return Err(Error::SingularP {
            det: det.to_f64().unwrap_or(f64::NAN),
        });
    }
    let p_inv = p
        .matrix()
        .clone()
        .try_inverse()
        .ok_or(Error::Singular)?;
    let u = model.scores(theta)?;
    let s = model.n_states();
    let dim = model.dim();
    let quarter = cast::<T>(0.25);
    let mut g = DVector::zeros(dim);
    for r in 0..dim {
        let mut trace = T::zero();
        for i in 0..s {
            for l in 0..s {
                let dp = p.get(i, l) * u.get(i, l)[r];
                trace += p_inv[(l, i)] * dp;
            }
        }
        g[r] = -quarter * trace;
    }
    Ok(g)
}

/// The four-parameter substitution model's gradient of the
/// log-determinant distance via the inverse-entry coefficient assembly
/// (`c1..c4` built from entries of `P^-1`).
pub fn async_distance_gradient_kimura_coeffs<T: Scalar>(
    model: &ParametricModel<T>,
    theta: &DVector<T>,
) -> Result<DVector<T>> {
    if model.dim() != 4 || model.n_states() != 4 {
        return Err(Error::InvalidSpec(
            "coefficient assembly applies to the four-parameter substitution model".into(),
        ));
    }
    let p = model.transition(theta)?;
    let det = p.matrix().determinant();
    if det <= T::zero() {
        return Err(Error::SingularP {
            det: det.to_f64().unwrap_or(f64::NAN),
        });
    }
    let inv = p
        .matrix()
        .clone()
        .try_inverse()
        .ok_or(Error::Singular)?;
    // inv[(j,i)] is the (j,i) entry of P^-1, written P^{j,i} below.
    let two = cast::<T>(2.0);
    let c1 = -two * inv[(0, 0)] + inv[(2, 0)] + inv[(3, 0)] - two * inv[(1, 1)]
        + inv[(2, 1)]
        + inv[(3, 1)];
    let c2 = inv[(0, 2)] + inv[(1, 2)] - two * inv[(2, 2)] + inv[(0, 3)] + inv[(1, 3)]
        - two * inv[(3, 3)];
    let c3 = inv[(1, 0)] - inv[(0, 0)] - inv[(2, 2)] + inv[(3, 2)];
    let c4 = inv[(0, 1)] - inv[(1, 1)] + inv[(2, 3)] - inv[(3, 3)];
    let quarter = cast::<T>(0.25);
    Ok(DVector::from_column_slice(&[
        -quarter * c1,
        -quarter * c2,
        -quarter * c3,
        -quarter * c4,
    ]))
}

/// Delta-method limit variance `tau^2 = grad(psi)' Sigma grad(psi)`.
pub fn delta_method<T: Scalar>(
    avar: &AvarResult<T>,
    focus: &FocusParameter<T>,
    theta: &DVector<T>,
) -> Result<T> {
    let g = focus.gradient(theta)?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::DataDegenerate(format!(
            "focus parameter '{}' has a non-finite gradient",
            focus.name()
        )));
    }
    Ok((g.transpose() * &avar.sigma * &g)[(0, 0)])
}

/// Summary of a seeded Monte Carlo study: empirical means and
/// `sqrt(n)`-scaled standard deviations of the fitted parameters.
#[derive(Debug, Clone)]
pub struct McSummary<T: Scalar> {
    pub method: Method,
    pub n: usize,
    pub reps: usize,
    pub n_failed: usize,
    pub means: DVector<T>,
    pub sds_scaled: DVector<T>,
}

/// Simulates `reps` stationary chains of `n` transitions from the model at
/// `theta_true`, fits each by `method`, and summarizes. Replication `r`
/// simulates with seed `seed + r`; non-converged replications are dropped
/// and counted, and more than 5% of them is an error.
pub fn mc_study<T: Scalar>(
    model: &ParametricModel<T>,
    theta_true: &DVector<T>,
    method: Method,
    n: usize,
    reps: usize,
    seed: u64,
    options: &FitOptions<T>,
) -> Result<McSummary<T>> {
    method.validate()?;
    let p = model.transition(theta_true)?;
    let order = method.required_counts_order();
    let estimates: Vec<Option<DVector<T>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let path = simulate(&p, n, InitialState::Stationary, seed.wrapping_add(r as u64))
                .ok()?;
            let counts = count_tuples::<T>(&path, order).ok()?;
            let objective = Objective::new(method, model, &counts).ok()?;
            fit(&objective, options).ok().map(|res| res.theta_hat)
        })
        .collect();
    let kept: Vec<&DVector<T>> = estimates.iter().flatten().collect();
    let n_failed = reps - kept.len();
    if n_failed * 20 > reps {
        return Err(Error::TooManyFailures {
            failed: n_failed,
            total: reps,
        });
    }
    let dim = model.dim();
    let count = cast::<T>(kept.len() as f64);
    let mut means = DVector::<T>::zeros(dim);
    for est in &kept {
        means += *est;
    }
    means /= count;
    let mut var = DVector::<T>::zeros(dim);
    for est in &kept {
        for j in 0..dim {
            let d = est[j] - means[j];
            var[j] += d * d;
        }
    }
    var /= count - T::one();
    let sqrt_n = cast::<T>(n as f64).sqrt();
    let sds_scaled = DVector::from_fn(dim, |j, _| var[j].sqrt() * sqrt_n);
    Ok(McSummary {
        method,
        n,
        reps,
        n_failed,
        means,
        sds_scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use approx::assert_abs_diff_eq;

    fn model(spec: ModelSpec<f64>) -> ParametricModel<f64> {
        ParametricModel::new(spec).unwrap()
    }

    #[test]
    fn symmetric_information_closed_form() {
        let m = model(ModelSpec::SymmetricTwoState);
        for theta in [0.1, 0.3, 0.5, 0.8] {
            let ml = info_j(&m, &DVector::from_element(1, theta)).unwrap();
            assert_abs_diff_eq!(ml.j[(0, 0)], 1.0 / (theta * (1.0 - theta)), epsilon = 1e-12);
        }
    }

    #[test]
    fn general_two_state_information_is_diagonal() {
        let m = model(ModelSpec::GeneralTwoState);
        let (a, b) = (0.3, 0.6);
        let ml = info_j(&m, &DVector::from_column_slice(&[a, b])).unwrap();
        let p0 = b / (a + b);
        let p1 = a / (a + b);
        assert_abs_diff_eq!(ml.j[(0, 0)], p0 / (a * (1.0 - a)), epsilon = 1e-12);
        assert_abs_diff_eq!(ml.j[(1, 1)], p1 / (b * (1.0 - b)), epsilon = 1e-12);
        assert_abs_diff_eq!(ml.j[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn three_state_information_closed_form() {
        let m = model(ModelSpec::ThreeState);
        let (a, b) = (0.21, 0.55);
        let d = 1.0 - a - b;
        let ml = info_j(&m, &DVector::from_column_slice(&[a, b])).unwrap();
        assert_abs_diff_eq!(ml.j[(0, 0)], 1.0 / d + 1.0 / a, epsilon = 1e-12);
        assert_abs_diff_eq!(ml.j[(0, 1)], 1.0 / d, epsilon = 1e-12);
        assert_abs_diff_eq!(ml.j[(1, 1)], 1.0 / d + 1.0 / b, epsilon = 1e-12);
    }

    #[test]
    fn information_identity_with_hessians() {
        // j_by_state[a] = -sum_b p[a][b] i[a][b].
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::<f64>::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let ml = info_j(&m, &theta).unwrap();
        let p = m.transition(&theta).unwrap();
        let hessians = m.cell_hessians(&theta).unwrap();
        for a in 0..4 {
            let mut acc = DMatrix::<f64>::zeros(4, 4);
            for b in 0..4 {
                acc += hessians.get(a, b) * p.get(a, b);
            }
            assert!((&ml.j_by_state[a] + acc).abs().max() < 1e-8);
        }
    }

    #[test]
    fn general_two_state_ql_ingredients_closed_forms() {
        let m = model(ModelSpec::GeneralTwoState);
        let (a, b) = (0.3, 0.6);
        let ql = ql_ingredients(&m, &DVector::from_column_slice(&[a, b]), 2).unwrap();
        let s2 = (a + b) * (a + b);
        let s3 = s2 * (a + b);
        // H = [[b/a, -1], [-1, a/b]] / (a+b)^2.
        assert_abs_diff_eq!(ql.h[(0, 0)], b / a / s2, epsilon = 1e-12);
        assert_abs_diff_eq!(ql.h[(0, 1)], -1.0 / s2, epsilon = 1e-12);
        assert_abs_diff_eq!(ql.h[(1, 1)], a / b / s2, epsilon = 1e-12);
        // G = (1-a-b)/(a+b)^3 [[b/a, -1], [-1, a/b]].
        let c = 1.0 - a - b;
        assert_abs_diff_eq!(ql.g[(0, 0)], c * (b / a) / s3, epsilon = 1e-12);
        assert_abs_diff_eq!(ql.g[(0, 1)], -c / s3, epsilon = 1e-12);
        assert_abs_diff_eq!(ql.g[(1, 1)], c * (a / b) / s3, epsilon = 1e-12);
        // L = H.
        assert!((ql.l.clone() - ql.h.clone()).abs().max() < 1e-12);
    }

    #[test]
    fn ql_sandwich_equals_ml_for_two_state_pairwise() {
        let m = model(ModelSpec::GeneralTwoState);
        for &(a, b) in &[(0.3, 0.6), (0.1, 0.2), (0.7, 0.85)] {
            let theta = DVector::from_column_slice(&[a, b]);
            let ml = avar(&m, &theta, Method::Ml).unwrap();
            let ql = avar(&m, &theta, Method::Ql { order: 2 }).unwrap();
            assert!(
                (ml.sigma.clone() - ql.sigma.clone()).abs().max() < 1e-10,
                "QL(2) vs ML mismatch at ({a},{b})"
            );
        }
    }

    #[test]
    fn equicorrelation_known_p_ql_equals_ml_exactly() {
        let m = model(ModelSpec::Equicorrelation {
            n_states: 3,
            p_known: Some(vec![0.3, 0.6, 0.1]),
        });
        let theta = DVector::<f64>::from_element(1, 0.5);
        let ql = ql_ingredients(&m, &theta, 2).unwrap();
        assert_eq!(ql.h[(0, 0)], 0.0);
        assert_eq!(ql.g[(0, 0)], 0.0);
        assert_eq!(ql.l[(0, 0)], 0.0);
        let ml = avar(&m, &theta, Method::Ml).unwrap();
        let qlv = avar(&m, &theta, Method::Ql { order: 2 }).unwrap();
        assert!((ml.sigma - qlv.sigma).abs().max() < 1e-14);
    }

    #[test]
    fn symmetric_pl_limit_variance_is_quarter() {
        let m = model(ModelSpec::SymmetricTwoState);
        for theta in [0.05, 0.2, 0.5, 0.77, 0.95] {
            let t = DVector::from_element(1, theta);
            let pl = pl_ingredients(&m, &t).unwrap();
            // M = 4 (2 theta - 1)^2 (1/p2_00 + 1/p2_01).
            let p2_diag = theta * theta + (1.0 - theta) * (1.0 - theta);
            let p2_off = 2.0 * theta * (1.0 - theta);
            let expect_m = 4.0 * (2.0 * theta - 1.0_f64).powi(2) * (1.0 / p2_diag + 1.0 / p2_off);
            assert_abs_diff_eq!(pl.m[(0, 0)], expect_m, epsilon = 1e-10);
            let res = avar(&m, &t, Method::Pl { order: 1 }).unwrap();
            assert_abs_diff_eq!(res.sigma[(0, 0)], 0.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn pl_m_equals_r_and_w_identity() {
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::<f64>::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let pl = pl_ingredients(&m, &theta).unwrap();
        assert!((pl.m.clone() - pl.r.clone()).abs().max() < 1e-8);
        // sum_c p2[a][c] w[a][c] = 0 per row.
        let p2 = m.transition(&theta).unwrap().k_step(2);
        for a in 0..4 {
            let mut acc = DVector::<f64>::zeros(4);
            for c in 0..4 {
                acc += &pl.w[a * 4 + c] * p2.get(a, c);
            }
            assert!(acc.amax() < 1e-8);
        }
    }

    #[test]
    fn pl_q_chain_matches_literal_loop() {
        for spec in [
            ModelSpec::GeneralTwoState,
            ModelSpec::ThreeState,
            ModelSpec::Kimura4,
        ] {
            let m = model(spec);
            let theta = match m.dim() {
                2 => DVector::from_column_slice(&[0.3, 0.55]),
                _ => DVector::from_column_slice(&[0.027, 0.041, 0.123, 0.128]),
            };
            let pl = pl_ingredients(&m, &theta).unwrap();
            let literal = pl_q_literal(&m, &theta).unwrap();
            assert!(
                (pl.q.clone() - literal).abs().max() < 1e-12,
                "Q mismatch for {}",
                m.spec().family_name()
            );
        }
    }

    #[test]
    fn ising_ml_and_pl_closed_forms() {
        let m = model(ModelSpec::Ising1d);
        let beta = 1.5f64;
        let t = DVector::from_element(1, beta);
        let e = beta.exp();
        let ml = info_j(&m, &t).unwrap();
        assert_abs_diff_eq!(ml.j[(0, 0)], e / (1.0 + e).powi(2), epsilon = 1e-12);
        let pl = pl_ingredients(&m, &t).unwrap();
        let expect_m = 2.0 * e * (1.0 - e) * (1.0 - e) / ((1.0 + e).powi(2) * (1.0 + e * e));
        assert_abs_diff_eq!(pl.m[(0, 0)], expect_m, epsilon = 1e-10);
    }

    #[test]
    fn ising_table_values() {
        let m = model(ModelSpec::Ising1d);
        let cases = [
            (0.0, 2.000, 2.000),
            (0.5, 2.063, 2.128),
            (1.0, 2.255, 2.543),
            (1.5, 2.589, 3.352),
            (3.0, 4.705, 11.068),
        ];
        for (beta, ml_sd, pl_sd) in cases {
            let t = DVector::from_element(1, beta);
            let ml = avar(&m, &t, Method::Ml).unwrap();
            let pl = avar(&m, &t, Method::Pl { order: 1 }).unwrap();
            assert_abs_diff_eq!(ml.sds[0], ml_sd, epsilon = 5e-3);
            assert_abs_diff_eq!(pl.sds[0], pl_sd, epsilon = 5e-3);
        }
    }

    #[test]
    fn reflecting_walk_information_closed_form() {
        for &k in &[5usize, 10, 15] {
            let m = model(ModelSpec::ReflectingWalk { n_states: k });
            for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let t = DVector::from_element(1, p);
                let ml = info_j(&m, &t).unwrap();
                let pi = m.closed_form_stationary(&t).unwrap();
                let expect = (1.0 - pi[0] - pi[k - 1]) / (p * (1.0 - p));
                assert_abs_diff_eq!(ml.j[(0, 0)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ql_variance_approaches_ml_with_order() {
        let m = model(ModelSpec::ReflectingWalk { n_states: 10 });
        let t = DVector::<f64>::from_element(1, 0.3);
        let ml = avar(&m, &t, Method::Ml).unwrap();
        let mut last_are = 0.0;
        for k in [2usize, 3, 4, 10, 100] {
            let ql = avar(&m, &t, Method::Ql { order: k }).unwrap();
            let are = ml.sigma[(0, 0)] / ql.sigma[(0, 0)];
            assert!(
                are >= last_are - 1e-9,
                "ARE not nondecreasing at k={k}: {are} < {last_are}"
            );
            last_are = are;
        }
        assert!(last_are > 0.95);
        let ql100 = avar(&m, &t, Method::Ql { order: 100 }).unwrap();
        let rel = (ql100.sigma[(0, 0)] - ml.sigma[(0, 0)]).abs() / ml.sigma[(0, 0)];
        assert!(rel < 0.05);
    }

    #[test]
    fn delta_method_coordinate_matches_sigma_diagonal() {
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::<f64>::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let res = avar(&m, &theta, Method::Ml).unwrap();
        for j in 0..4 {
            let tau2 = delta_method(&res, &FocusParameter::coordinate(j), &theta).unwrap();
            assert_abs_diff_eq!(tau2, res.sigma[(j, j)], epsilon = 1e-14);
        }
    }

    #[test]
    fn async_distance_gradient_routes_agree() {
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::<f64>::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let trace = async_distance_gradient_trace(&m, &theta).unwrap();
        let coeffs = async_distance_gradient_kimura_coeffs(&m, &theta).unwrap();
        let focus = FocusParameter::asynchronous_distance(m.clone());
        let fd = focus.gradient_fd(&theta).unwrap();
        for j in 0..4 {
            assert!((trace[j] - coeffs[j]).abs() < 1e-10);
            let scale = f64::max(1.0, trace[j].abs());
            assert!((trace[j] - fd[j]).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn kimura_cross_type_probabilities_coincide() {
        // p(1->2) = p(2->1) = 2 a b / (a+b), so their delta variances match.
        let m = model(ModelSpec::Kimura4);
        let theta = DVector::<f64>::from_column_slice(&[0.027, 0.041, 0.123, 0.128]);
        let res = avar(&m, &theta, Method::Ml).unwrap();
        let p12 = FocusParameter::new("p(1->2)", |t: &DVector<f64>| {
            Ok(2.0 * t[0] * t[1] / (t[0] + t[1]))
        });
        let p21 = FocusParameter::new("p(2->1)", |t: &DVector<f64>| {
            Ok(2.0 * t[0] * t[1] / (t[0] + t[1]))
        });
        let v12 = delta_method(&res, &p12, &theta).unwrap();
        let v21 = delta_method(&res, &p21, &theta).unwrap();
        assert_abs_diff_eq!(v12, v21, epsilon = 1e-12);
    }
}

//! Limit covariance oracles for the normalized pair and triplet counters
//! `sqrt(n)(N/n - expectation)`, used to cross-check the sandwich
//! variance assembly and validated against Monte Carlo in the acceptance
//! suite.

use nalgebra::DMatrix;

use crate::chain::{gamma_matrices, stationary_distribution, TransitionMatrix};
use crate::error::{Error, Result};
use crate::scalar::{cast, tol, Scalar};

/// Covariances `cov(Z[a][b], Z[c][d])` of the normalized pair counters,
/// stored as a flat 4-index array.
#[derive(Debug, Clone)]
pub struct PairCov<T: Scalar> {
    n_states: usize,
    data: Vec<T>,
}

impl<T: Scalar> PairCov<T> {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> T {
        let s = self.n_states;
        self.data[((a * s + b) * s + c) * s + d]
    }
}

/// Covariances `cov(Z[a][b][c], Z[d][e][f])` of the normalized triplet
/// counters, stored as a flat 6-index array.
#[derive(Debug, Clone)]
pub struct TripletCov<T: Scalar> {
    n_states: usize,
    data: Vec<T>,
}

impl<T: Scalar> TripletCov<T> {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize, e: usize, f: usize) -> T {
        let s = self.n_states;
        self.data[((((a * s + b) * s + c) * s + d) * s + e) * s + f]
    }

    /// Pair covariances obtained by summing out the third symbol of each
    /// window.
    pub fn marginal_pairs(&self) -> PairCov<T> {
        let s = self.n_states;
        let mut data = vec![T::zero(); s * s * s * s];
        for a in 0..s {
            for b in 0..s {
                for d in 0..s {
                    for e in 0..s {
                        let mut acc = T::zero();
                        for c in 0..s {
                            for f in 0..s {
                                acc += self.get(a, b, c, d, e, f);
                            }
                        }
                        data[((a * s + b) * s + d) * s + e] = acc;
                    }
                }
            }
        }
        PairCov { n_states: s, data }
    }

    /// Covariances of the skip counters `Z[a][.][c]`, obtained by summing
    /// out the middle symbols.
    pub fn marginal_skip_pairs(&self) -> PairCov<T> {
        let s = self.n_states;
        let mut data = vec![T::zero(); s * s * s * s];
        for a in 0..s {
            for c in 0..s {
                for d in 0..s {
                    for f in 0..s {
                        let mut acc = T::zero();
                        for b in 0..s {
                            for e in 0..s {
                                acc += self.get(a, b, c, d, e, f);
                            }
                        }
                        data[((a * s + c) * s + d) * s + f] = acc;
                    }
                }
            }
        }
        PairCov { n_states: s, data }
    }
}

fn require_aperiodic<T: Scalar>(p: &TransitionMatrix<T>) -> Result<()> {
    if !p.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let modulus = p.second_eigenvalue_modulus();
    if modulus >= T::one() - tol::<T>(1e-12) {
        return Err(Error::NotAperiodic {
            modulus: modulus.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Limit covariances of `sqrt(n)(N[a][b]/n - pi[a] p[a][b])`:
/// `pi[a] p[a][b] (delta[ac] delta[bd] - pi[c] p[c][d])
///  + p[a][b] p[c][d] (pi[a] gamma[b][c] + pi[c] gamma[d][a])`.
pub fn pair_cov<T: Scalar>(p: &TransitionMatrix<T>) -> Result<PairCov<T>> {
    require_aperiodic(p)?;
    let s = p.size();
    let pi = stationary_distribution(p)?;
    let gamma = gamma_matrices(p)?.gamma;
    let mut data = vec![T::zero(); s * s * s * s];
    for a in 0..s {
        for b in 0..s {
            let pab = p.get(a, b);
            for c in 0..s {
                for d in 0..s {
                    let pcd = p.get(c, d);
                    let indicator = if a == c && b == d { T::one() } else { T::zero() };
                    let value = pi.get(a) * pab * (indicator - pi.get(c) * pcd)
                        + pab * pcd * (pi.get(a) * gamma[(b, c)] + pi.get(c) * gamma[(d, a)]);
                    data[((a * s + b) * s + c) * s + d] = value;
                }
            }
        }
    }
    Ok(PairCov { n_states: s, data })
}

/// Limit covariances of `sqrt(n)(N[a][b][c]/n - pi[a] p[a][b] p[b][c])`,
/// the five-term expansion over window offsets (same window, adjacent
/// windows both ways, and the two long-range gamma terms).
pub fn triplet_cov<T: Scalar>(p: &TransitionMatrix<T>) -> Result<TripletCov<T>> {
    require_aperiodic(p)?;
    let s = p.size();
    let pi = stationary_distribution(p)?;
    let gamma = gamma_matrices(p)?.gamma;
    let mut data = vec![T::zero(); s.pow(6)];
    let mut idx = 0usize;
    for a in 0..s {
        for b in 0..s {
            for c in 0..s {
                let w_abc = pi.get(a) * p.get(a, b) * p.get(b, c);
                for d in 0..s {
                    for e in 0..s {
                        for f in 0..s {
                            let w_def = pi.get(d) * p.get(d, e) * p.get(e, f);
                            let same = if a == d && b == e && c == f {
                                T::one()
                            } else {
                                T::zero()
                            };
                            let fwd = if b == d && c == e { T::one() } else { T::zero() };
                            let bwd = if e == a && f == b { T::one() } else { T::zero() };
                            let mut value = w_abc * (same - w_def);
                            value += w_abc * (fwd - pi.get(d) * p.get(d, e)) * p.get(e, f);
                            value += w_def * (bwd - pi.get(a) * p.get(a, b)) * p.get(b, c);
                            value += w_abc * gamma[(c, d)] * p.get(d, e) * p.get(e, f);
                            value += w_def * gamma[(f, a)] * p.get(a, b) * p.get(b, c);
                            data[idx] = value;
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(TripletCov { n_states: s, data })
}

/// Direct evaluation of the skip-counter covariances
/// `cov(Z[a][.][c], Z[d][.][f])` from their displayed form; must agree
/// with summing [`triplet_cov`] over the middle symbols.
pub fn marginal_triplet_cov<T: Scalar>(p: &TransitionMatrix<T>) -> Result<PairCov<T>> {
    require_aperiodic(p)?;
    let s = p.size();
    let pi = stationary_distribution(p)?;
    let gamma = gamma_matrices(p)?.gamma;
    let p2 = p.k_step(2);
    let two = cast::<T>(2.0);
    let mut data = vec![T::zero(); s * s * s * s];
    for a in 0..s {
        for c in 0..s {
            let w_ac = pi.get(a) * p2.get(a, c);
            for d in 0..s {
                for f in 0..s {
                    let w_df = pi.get(d) * p2.get(d, f);
                    let same = if a == d && c == f { T::one() } else { T::zero() };
                    let mut value = pi.get(a) * p2.get(a, c) * (same - pi.get(d) * p2.get(d, f));
                    value += pi.get(a) * p.get(a, d) * p.get(d, c) * p.get(c, f)
                        + pi.get(d) * p.get(d, a) * p.get(a, f) * p.get(f, c)
                        - two * w_ac * pi.get(d) * p2.get(d, f);
                    value += w_ac * gamma[(c, d)] * p2.get(d, f);
                    value += w_df * gamma[(f, a)] * p2.get(a, c);
                    data[((a * s + c) * s + d) * s + f] = value;
                }
            }
        }
    }
    Ok(PairCov { n_states: s, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, ParametricModel};
    use nalgebra::DVector;

    fn two_state(a: f64, b: f64) -> TransitionMatrix<f64> {
        let m = ParametricModel::<f64>::new(ModelSpec::GeneralTwoState).unwrap();
        m.transition(&DVector::from_column_slice(&[a, b])).unwrap()
    }

    #[test]
    fn pair_cov_sums_to_zero() {
        // The pair counters sum to n, so their normalized versions sum to 0
        // and the covariance array sums to 0 over everything.
        let p = two_state(0.3, 0.6);
        let cov = pair_cov(&p).unwrap();
        let mut total = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        total += cov.get(a, b, c, d);
                    }
                }
            }
        }
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn triplet_marginal_over_third_symbols_matches_pair_cov() {
        for &(a, b) in &[(0.3, 0.6), (0.15, 0.8)] {
            let p = two_state(a, b);
            let direct = pair_cov(&p).unwrap();
            let marginal = triplet_cov(&p).unwrap().marginal_pairs();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            assert!(
                                (direct.get(i, j, k, l) - marginal.get(i, j, k, l)).abs() < 1e-10,
                                "mismatch at ({i},{j},{k},{l})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn skip_pair_display_matches_summed_triplets() {
        let p = two_state(0.3, 0.6);
        let direct = marginal_triplet_cov(&p).unwrap();
        let summed = triplet_cov(&p).unwrap().marginal_skip_pairs();
        for a in 0..2 {
            for c in 0..2 {
                for d in 0..2 {
                    for f in 0..2 {
                        assert!(
                            (direct.get(a, c, d, f) - summed.get(a, c, d, f)).abs() < 1e-10
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn skip_pair_display_matches_on_kimura() {
        let m = ParametricModel::<f64>::new(ModelSpec::Kimura4).unwrap();
        let p = m
            .transition(&DVector::from_column_slice(&[0.027, 0.041, 0.123, 0.128]))
            .unwrap();
        let direct = marginal_triplet_cov(&p).unwrap();
        let summed = triplet_cov(&p).unwrap().marginal_skip_pairs();
        for a in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    for f in 0..4 {
                        assert!(
                            (direct.get(a, c, d, f) - summed.get(a, c, d, f)).abs() < 1e-10
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn periodic_chains_are_rejected() {
        let m = ParametricModel::<f64>::new(ModelSpec::ReflectingWalk { n_states: 4 }).unwrap();
        let p = m.transition(&DVector::from_element(1, 0.5)).unwrap();
        assert!(matches!(pair_cov(&p), Err(Error::NotAperiodic { .. })));
    }
}

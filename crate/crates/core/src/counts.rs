//! Dense m-tuple transition counts gathered from a chain path.

use nalgebra::{DMatrix, DVector};

use crate::chain::{ChainPath, StateSpace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest dense table we allow: 26^4 cells.
const MAX_CELLS: usize = 26 * 26 * 26 * 26;

/// Counts of sliding m-tuples `N[x_0, ..., x_{m-1}]`, stored dense in
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleCounts<T: Scalar> {
    states: StateSpace,
    order: usize,
    counts: Vec<T>,
    n_effective: usize,
}

impl<T: Scalar> TupleCounts<T> {
    pub fn zeros(states: StateSpace, order: usize) -> Result<Self> {
        let s = states.size();
        if order < 1 {
            return Err(Error::InvalidSpec("tuple order must be >= 1".into()));
        }
        let cells = s
            .checked_pow(order as u32)
            .filter(|&c| c <= MAX_CELLS)
            .ok_or(Error::CountsTooLarge {
                n_states: s,
                order,
            })?;
        Ok(Self {
            states,
            order,
            counts: vec![T::zero(); cells],
            n_effective: 0,
        })
    }

    /// Wraps an observed pair-count matrix (order 2) such as a published
    /// transition table.
    pub fn from_pair_matrix(states: StateSpace, n: &DMatrix<T>) -> Result<Self> {
        let s = states.size();
        if n.nrows() != s || n.ncols() != s {
            return Err(Error::BadShape {
                expected: s,
                rows: n.nrows(),
                cols: n.ncols(),
            });
        }
        let mut out = Self::zeros(states, 2)?;
        let mut total = T::zero();
        for a in 0..s {
            for b in 0..s {
                let v = n[(a, b)];
                if v < T::zero() {
                    return Err(Error::BadEntry {
                        row: a,
                        col: b,
                        value: v.to_f64().unwrap_or(f64::NAN),
                    });
                }
                out.counts[a * s + b] = v;
                total += v;
            }
        }
        out.n_effective = total.to_f64().unwrap_or(0.0).round() as usize;
        Ok(out)
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.size()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of windows counted.
    pub fn n_effective(&self) -> usize {
        self.n_effective
    }

    pub fn total(&self) -> T {
        self.counts.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    fn index(&self, tuple: &[usize]) -> usize {
        debug_assert_eq!(tuple.len(), self.order);
        let s = self.n_states();
        tuple.iter().fold(0usize, |acc, &i| acc * s + i)
    }

    pub fn get(&self, tuple: &[usize]) -> T {
        self.counts[self.index(tuple)]
    }

    /// Iterates over `(tuple, count)` pairs with positive count.
    pub fn iter_nonzero(&self) -> impl Iterator<Item = (Vec<usize>, T)> + '_ {
        let s = self.n_states();
        let m = self.order;
        self.counts.iter().enumerate().filter_map(move |(idx, &c)| {
            if c > T::zero() {
                let mut tuple = vec![0usize; m];
                let mut rest = idx;
                for j in (0..m).rev() {
                    tuple[j] = rest % s;
                    rest /= s;
                }
                Some((tuple, c))
            } else {
                None
            }
        })
    }

    /// Sums out the last axis, leaving counts of the leading (m-1)-tuples
    /// over the same windows.
    pub fn marginalize_last(&self) -> Result<TupleCounts<T>> {
        if self.order < 2 {
            return Err(Error::OrderMismatch {
                found: self.order,
                required: 2,
            });
        }
        let s = self.n_states();
        let mut out = TupleCounts::zeros(self.states.clone(), self.order - 1)?;
        for (idx, &c) in self.counts.iter().enumerate() {
            out.counts[idx / s] += c;
        }
        out.n_effective = self.n_effective;
        Ok(out)
    }

    /// Reduces to pair counts by repeatedly summing out the last axis.
    pub fn to_pairs(&self) -> Result<TupleCounts<T>> {
        if self.order < 2 {
            return Err(Error::OrderMismatch {
                found: self.order,
                required: 2,
            });
        }
        let mut current = self.clone();
        while current.order > 2 {
            current = current.marginalize_last()?;
        }
        Ok(current)
    }

    /// Pair counts as a dense matrix (order must reduce to 2).
    pub fn pair_matrix(&self) -> Result<DMatrix<T>> {
        let pairs = self.to_pairs()?;
        let s = pairs.n_states();
        Ok(DMatrix::from_fn(s, s, |a, b| pairs.counts[a * s + b]))
    }

    /// Marginal counts of the pair occupying axes `(offset, offset+1)`.
    pub fn pair_marginal(&self, offset: usize) -> Result<DMatrix<T>> {
        if offset + 2 > self.order {
            return Err(Error::OrderMismatch {
                found: self.order,
                required: offset + 2,
            });
        }
        let s = self.n_states();
        let mut out = DMatrix::<T>::zeros(s, s);
        // Strides: axis j has stride s^(m-1-j).
        let stride_hi = s.pow((self.order - 1 - offset) as u32);
        let stride_lo = stride_hi / s;
        for (idx, &c) in self.counts.iter().enumerate() {
            if c > T::zero() {
                let a = (idx / stride_hi) % s;
                let b = (idx / stride_lo) % s;
                out[(a, b)] += c;
            }
        }
        Ok(out)
    }

    /// Marginal counts of `(first, last)` over all middle axes; for order 3
    /// this is `N[a][.][c]`.
    pub fn first_last_marginal(&self) -> Result<DMatrix<T>> {
        if self.order < 2 {
            return Err(Error::OrderMismatch {
                found: self.order,
                required: 2,
            });
        }
        let s = self.n_states();
        let stride_first = s.pow((self.order - 1) as u32);
        let mut out = DMatrix::<T>::zeros(s, s);
        for (idx, &c) in self.counts.iter().enumerate() {
            if c > T::zero() {
                let a = idx / stride_first;
                let b = idx % s;
                out[(a, b)] += c;
            }
        }
        Ok(out)
    }

    /// Row marginals `N[a][.]` of the pair reduction.
    pub fn row_marginals(&self) -> Result<DVector<T>> {
        let pairs = self.pair_matrix()?;
        let s = pairs.nrows();
        Ok(DVector::from_fn(s, |a, _| {
            (0..s).fold(T::zero(), |acc, b| acc + pairs[(a, b)])
        }))
    }
}

/// Counts sliding windows of length `m` in the path; a path `x_0, ..., x_n`
/// yields `n - m + 2` windows.
pub fn count_tuples<T: Scalar>(path: &ChainPath, m: usize) -> Result<TupleCounts<T>> {
    let len = path.indices().len();
    if m < 1 {
        return Err(Error::InvalidSpec("tuple order must be >= 1".into()));
    }
    if len < m {
        return Err(Error::PathTooShort { len, order: m });
    }
    let mut out = TupleCounts::zeros(path.states().clone(), m)?;
    let s = out.n_states();
    let x = path.indices();
    // Maintain the rolling row-major index of the current window.
    let top = s.pow((m - 1) as u32);
    let mut idx = 0usize;
    for &v in &x[..m] {
        idx = idx * s + v;
    }
    out.counts[idx] += T::one();
    for i in m..len {
        idx = (idx % top) * s + x[i];
        out.counts[idx] += T::one();
    }
    out.n_effective = len - m + 1;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::StateSpace;
    use proptest::prelude::*;

    fn path(states: usize, x: Vec<usize>) -> ChainPath {
        ChainPath::new(StateSpace::of_size(states).unwrap(), x).unwrap()
    }

    #[test]
    fn pair_counts_small_example() {
        // Path (1,2,1,2) in 1-based labels; 0-based here.
        let p = path(2, vec![0, 1, 0, 1]);
        let c: TupleCounts<f64> = count_tuples(&p, 2).unwrap();
        assert_eq!(c.get(&[0, 1]), 2.0);
        assert_eq!(c.get(&[1, 0]), 1.0);
        assert_eq!(c.get(&[0, 0]), 0.0);
        assert_eq!(c.get(&[1, 1]), 0.0);
        assert_eq!(c.n_effective(), 3);
    }

    #[test]
    fn triple_counts_constant_path() {
        let p = path(2, vec![0, 0, 0, 0]);
        let c: TupleCounts<f64> = count_tuples(&p, 3).unwrap();
        assert_eq!(c.get(&[0, 0, 0]), 2.0);
        assert_eq!(c.total(), 2.0);
    }

    #[test]
    fn too_short_path() {
        let p = path(2, vec![0, 1]);
        assert!(matches!(
            count_tuples::<f64>(&p, 3),
            Err(Error::PathTooShort { .. })
        ));
    }

    #[test]
    fn marginalizing_last_matches_truncated_path() {
        let p = path(3, vec![0, 1, 2, 2, 0, 1, 1, 0, 2, 1]);
        let c3: TupleCounts<f64> = count_tuples(&p, 3).unwrap();
        let marg = c3.marginalize_last().unwrap();
        let truncated = path(3, p.indices()[..p.indices().len() - 1].to_vec());
        let c2: TupleCounts<f64> = count_tuples(&truncated, 2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(marg.get(&[a, b]), c2.get(&[a, b]));
            }
        }
    }

    proptest! {
        #[test]
        fn totals_equal_window_count(xs in proptest::collection::vec(0usize..3, 4..60), m in 1usize..4) {
            let p = path(3, xs);
            let c: TupleCounts<f64> = count_tuples(&p, m).unwrap();
            let n = p.n_transitions();
            prop_assert_eq!(c.n_effective(), n - m + 2);
            prop_assert_eq!(c.total() as usize, n - m + 2);
        }

        #[test]
        fn pair_marginal_at_offset_zero_matches_leading_axes(xs in proptest::collection::vec(0usize..2, 5..40)) {
            let p = path(2, xs);
            let c3: TupleCounts<f64> = count_tuples(&p, 3).unwrap();
            let lead = c3.marginalize_last().unwrap();
            let m0 = c3.pair_marginal(0).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    prop_assert_eq!(m0[(a, b)], lead.get(&[a, b]));
                }
            }
        }
    }
}

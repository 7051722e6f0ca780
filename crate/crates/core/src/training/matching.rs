use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One-to-one assignment of targets to queries.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs ordered by target.
    pub assignment: Vec<(usize, usize)>,
    pub total: f64,
    pub queries: usize,
}

impl MatchResult {
    /// Queries left without a target ("no object").
    pub fn unmatched(&self) -> Vec<usize> {
        let mut used = vec![false; self.queries];
        for &(q, _) in &self.assignment {
            used[q] = true;
        }
        (0..self.queries).filter(|&q| !used[q]).collect()
    }
}

/// Shortest augmenting path Hungarian algorithm on an `n x m` matrix with
/// `n <= m`, assigning every row. Returns the column of each row and the
/// dual potentials of rows and columns (`c(i, j) >= u_i + v_j`, equality on
/// the assignment).
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based with a virtual column 0, after the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Minimum-cost assignment of the `l` columns (targets) of a `k x l` cost
/// matrix to distinct rows (queries). Among optimal assignments the one
/// whose query list, read in target order, is lexicographically smallest
/// is returned.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    if cost.rank() != 2 {
        return Err(Error::shape("hungarian_match", cost.shape(), &[0, 0]));
    }
    let (k, l) = (cost.rows(), cost.cols());
    if l > k {
        return Err(Error::TooManyTargets { targets: l, queries: k });
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    if l == 0 {
        return Ok(MatchResult {
            assignment: Vec::new(),
            total: 0.0,
            queries: k,
        });
    }
    let c = |t: usize, q: usize| cost.at(q, t);
    let scale = cost.data().iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let eps = 1e-9 * (1.0 + scale) * l as f64;

    let mut targets: Vec<usize> = (0..l).collect();
    let mut queries: Vec<usize> = (0..k).collect();
    let (mut col_of, mut u, mut v) = solve(l, k, |i, j| c(targets[i], queries[j]));
    let mut chosen = vec![0usize; l];

    for t in 0..l {
        // residual problem: targets[0..] remain, rows are indexed into `targets`
        debug_assert_eq!(targets[0], t);
        let current = queries[col_of[0]];
        let residual_opt: f64 = (0..targets.len()).map(|i| c(targets[i], queries[col_of[i]])).sum();
        let mut tight: Vec<usize> = (0..queries.len())
            .filter(|&j| (c(t, queries[j]) - u[0] - v[j]).abs() <= eps && queries[j] < current)
            .collect();
        tight.sort_by_key(|&j| queries[j]);

        let mut pick = None;
        for j in tight {
            let q = queries[j];
            let rest_t: Vec<usize> = targets[1..].to_vec();
            let rest_q: Vec<usize> = queries.iter().copied().filter(|&x| x != q).collect();
            let (cols, ru, rv) = solve(rest_t.len(), rest_q.len(), |i, jj| c(rest_t[i], rest_q[jj]));
            let total = c(t, q) + (0..rest_t.len()).map(|i| c(rest_t[i], rest_q[cols[i]])).sum::<f64>();
            if total <= residual_opt + eps {
                pick = Some((q, rest_t, rest_q, cols, ru, rv));
                break;
            }
        }
        match pick {
            Some((q, rest_t, rest_q, cols, ru, rv)) => {
                chosen[t] = q;
                targets = rest_t;
                queries = rest_q;
                col_of = cols;
                u = ru;
                v = rv;
            }
            None => {
                // keep the current optimum; its restriction stays optimal
                chosen[t] = current;
                let drop = col_of[0];
                targets.remove(0);
                queries.remove(drop);
                u.remove(0);
                v.remove(drop);
                col_of = col_of[1..].iter().map(|&j| if j > drop { j - 1 } else { j }).collect();
            }
        }
    }
    let assignment: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(t, &q)| (q, t)).collect();
    let total = assignment.iter().map(|&(q, t)| c(t, q)).sum();
    Ok(MatchResult {
        assignment,
        total,
        queries: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let cost = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let m = hungarian_match(&cost).unwrap();
        assert_eq!(m.assignment, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total, 2.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // identical zero columns: target 0 takes query 0, target 1 query 1
        let cost = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(hungarian_match(&cost).unwrap().assignment, vec![(0, 0), (1, 1)]);
        // all-equal cost: still the smallest queries in order
        let cost = Tensor::full([4, 3], 2.5);
        assert_eq!(hungarian_match(&cost).unwrap().assignment, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn more_targets_than_queries() {
        let cost = Tensor::zeros([2, 3]);
        assert!(matches!(
            hungarian_match(&cost),
            Err(Error::TooManyTargets { targets: 3, queries: 2 })
        ));
    }

    #[test]
    fn no_targets() {
        let m = hungarian_match(&Tensor::zeros([3, 0])).unwrap();
        assert!(m.assignment.is_empty());
        assert_eq!(m.unmatched(), vec![0, 1, 2]);
    }
}

//! Optimal bipartite assignment (Hungarian / Kuhn-Munkres with potentials).

use crate::error::{Error, Result};

/// GT-to-prediction assignment for one role.
///
/// `sigma[i]` is the prediction assigned to GT slot `i`. Slots
/// `0..matched_gt_count` are real ground truths; the remaining slots are
/// "nothing" padding, so `sigma` is a permutation of `0..N_pred`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    pub sigma: Vec<usize>,
    pub matched_gt_count: usize,
}

impl MatchAssignment {
    /// Predictions matched to real ground truths, in GT order.
    pub fn matched(&self) -> &[usize] {
        &self.sigma[..self.matched_gt_count]
    }

    /// Predictions matched to "nothing", ascending.
    pub fn unmatched(&self) -> Vec<usize> {
        let mut v = self.sigma[self.matched_gt_count..].to_vec();
        v.sort_unstable();
        v
    }

    /// Inverse map: `gt_of[k]` is the real GT matched to prediction `k`.
    pub fn gt_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.sigma.len()];
        for (g, &k) in self.matched().iter().enumerate() {
            out[k] = Some(g);
        }
        out
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns `col_of_row`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Shape(format!("{n} rows cannot be assigned to {m} columns")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Value("non-finite entry in cost matrix".into()));
    }
    // 1-based arrays; column 0 is the virtual root of each augmenting search.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    Ok(col_of_row)
}

/// Maximum-similarity assignment (`rows <= cols`).
pub fn max_similarity_assignment(sim: &[Vec<f64>]) -> Result<Vec<usize>> {
    let cost: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|s| -s).collect()).collect();
    min_cost_assignment(&cost)
}

/// Matches `n_gt` real ground truths (rows of `sim`, one column per
/// prediction) to `n_pred` predictions. GTs are padded with "nothing" rows of
/// similarity 0; those take the leftover predictions in ascending order.
pub fn match_instances(sim: &[Vec<f64>], n_pred: usize) -> Result<MatchAssignment> {
    if sim.iter().any(|r| r.len() != n_pred) {
        return Err(Error::Shape(format!("similarity rows must have {n_pred} columns")));
    }
    let mut sigma = max_similarity_assignment(sim)?;
    let mut taken = vec![false; n_pred];
    sigma.iter().for_each(|&k| taken[k] = true);
    sigma.extend((0..n_pred).filter(|&k| !taken[k]));
    Ok(MatchAssignment {
        sigma,
        matched_gt_count: sim.len(),
    })
}

/// Hungarian matching of a square similarity matrix whose rows are GT slots.
pub fn hungarian_match(sim: &[Vec<f64>]) -> Result<MatchAssignment> {
    let n = sim.len();
    if sim.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("similarity matrix must be square".into()));
    }
    let sigma = max_similarity_assignment(sim)?;
    Ok(MatchAssignment {
        sigma,
        matched_gt_count: n,
    })
}

/// `sum_i sim[i][sigma[i]]` over the rows present in `sim`.
pub fn total_similarity(sim: &[Vec<f64>], sigma: &[usize]) -> f64 {
    sim.iter().zip(sigma).map(|(row, &k)| row[k]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over all injections rows -> columns.
    fn brute_force_max(sim: &[Vec<f64>]) -> f64 {
        fn rec(sim: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == sim.len() {
                *best = best.max(acc);
                return;
            }
            for k in 0..used.len() {
                if !used[k] {
                    used[k] = true;
                    rec(sim, row + 1, used, acc + sim[row][k], best);
                    used[k] = false;
                }
            }
        }
        let m = sim.first().map_or(0, |r| r.len());
        let mut best = f64::NEG_INFINITY;
        rec(sim, 0, &mut vec![false; m], 0.0, &mut best);
        best
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn identity_and_two_by_two() {
        let id: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let m = hungarian_match(&id).unwrap();
        assert_eq!(m.sigma, vec![0, 1, 2, 3]);
        assert_eq!(total_similarity(&id, &m.sigma), 4.0);

        let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let m = hungarian_match(&s).unwrap();
        assert_eq!(m.sigma, vec![0, 1]);
        assert!((total_similarity(&s, &m.sigma) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_square_and_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=6 {
            for m in n..=7 {
                for _ in 0..20 {
                    let s = random_matrix(&mut rng, n, m);
                    let sigma = max_similarity_assignment(&s).unwrap();
                    assert_eq!(total_similarity(&s, &sigma), brute_force_max(&s));
                }
            }
        }
    }

    #[test]
    fn padding_gives_leftovers_in_order() {
        let s = vec![vec![0.1, 0.2, 0.9, 0.0]];
        let m = match_instances(&s, 4).unwrap();
        assert_eq!(m.sigma, vec![2, 0, 1, 3]);
        assert_eq!(m.matched(), &[2]);
        assert_eq!(m.unmatched(), vec![0, 1, 3]);
        assert_eq!(m.gt_of(), vec![None, None, Some(0), None]);
        let empty = match_instances(&[], 3).unwrap();
        assert_eq!(empty.sigma, vec![0, 1, 2]);
        assert_eq!(empty.matched_gt_count, 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(hungarian_match(&[vec![1.0, 2.0]]), Err(Error::Shape(_))));
        assert!(matches!(
            min_cost_assignment(&[vec![f64::NAN]]),
            Err(Error::Value(_))
        ));
        assert!(matches!(
            min_cost_assignment(&[vec![1.0], vec![2.0]]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn sigma_is_a_permutation(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_matrix(&mut rng, n, n);
            let mut sigma = hungarian_match(&s).unwrap().sigma;
            sigma.sort_unstable();
            prop_assert_eq!(sigma, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn scale_invariant(seed in 0u64..1000, n in 1usize..8, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_matrix(&mut rng, n, n);
            let scaled: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
            let a = hungarian_match(&s).unwrap();
            let b = hungarian_match(&scaled).unwrap();
            // Equal up to ties: both must be optimal for the unscaled matrix.
            let best = brute_force_max(&s);
            prop_assert!((total_similarity(&s, &a.sigma) - best).abs() < 1e-9);
            prop_assert!((total_similarity(&s, &b.sigma) - best).abs() < 1e-9);
            prop_assert_eq!(a.sigma, b.sigma);
        }
    }
}

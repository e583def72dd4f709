//! Minimum-cost rectangular assignment (Hungarian algorithm, shortest
//! augmenting paths with potentials, O(n²m)).

/// Solves `min Σ cost[i][assign[i]]` over injective assignments of the
/// smaller side. Returns `(row, col)` pairs sorted by row.
///
/// Equal-cost alternatives resolve towards lower indices because every scan
/// keeps the first strict minimum.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == cols));
    if rows <= cols {
        solve(rows, cols, |i, j| cost[i][j])
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(cols, rows, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
            if j1 == 0 {
                // Only reachable with non-finite costs.
                break;
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective maps of the smaller side.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        let k = rows.min(cols);
        fn rec(cost: &[Vec<f64>], transpose: bool, i: usize, k: usize, used: &mut Vec<bool>) -> f64 {
            if i == k {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    let c = if transpose { cost[j][i] } else { cost[i][j] };
                    best = best.min(c + rec(cost, transpose, i + 1, k, used));
                    used[j] = false;
                }
            }
            best
        }
        if rows <= cols {
            rec(cost, false, 0, k, &mut vec![false; cols])
        } else {
            rec(cost, true, 0, k, &mut vec![false; rows])
        }
    }

    #[test]
    fn matches_exhaustive_search_up_to_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..400 {
            let r = rng.random_range(1..=6);
            let c = rng.random_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let pairs = hungarian(&cost);
            assert_eq!(pairs.len(), r.min(c));
            let mut seen_r = vec![false; r];
            let mut seen_c = vec![false; c];
            for &(i, j) in &pairs {
                assert!(!seen_r[i] && !seen_c[j]);
                seen_r[i] = true;
                seen_c[j] = true;
            }
            assert!((assignment_cost(&cost, &pairs) - brute_force(&cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_lowest_indices() {
        let cost = vec![vec![0.5; 3]; 2];
        assert_eq!(hungarian(&cost), vec![(0, 0), (1, 1)]);
        let tall = vec![vec![0.5; 2]; 3];
        assert_eq!(hungarian(&tall), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn empty_inputs() {
        assert!(hungarian(&[]).is_empty());
        assert!(hungarian(&[vec![]]).is_empty());
    }
}

//! Test oracles shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

use rand::Rng;

/// Exact optimum of `min ⟨C,Γ⟩` over the transportation polytope with
/// marginals `mu`, `nu`, by enumerating every basis of `L+S−1` cells,
/// solving the marginal equations on it, and keeping the best nonnegative
/// solution. Exponential; only for tiny `L`, `S`.
pub fn transport_lp(cost: &[Vec<f64>], mu: &[f64], nu: &[f64]) -> f64 {
    let (l, s) = (mu.len(), nu.len());
    let cells: Vec<(usize, usize)> = (0..l).flat_map(|i| (0..s).map(move |j| (i, j))).collect();
    let k = l + s - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(k);
    subsets(cells.len(), k, 0, &mut chosen, &mut |subset| {
        let basis: Vec<(usize, usize)> = subset.iter().map(|&c| cells[c]).collect();
        if let Some(x) = solve_basis(&basis, mu, nu) {
            if x.iter().all(|&v| v >= -1e-12) {
                let value: f64 = basis.iter().zip(&x).map(|(&(i, j), v)| cost[i][j] * v).sum();
                best = best.min(value);
            }
        }
    });
    best
}

fn subsets(n: usize, k: usize, start: usize, chosen: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if chosen.len() == k {
        f(chosen);
        return;
    }
    for c in start..n {
        if n - c < k - chosen.len() {
            break;
        }
        chosen.push(c);
        subsets(n, k, c + 1, chosen, f);
        chosen.pop();
    }
}

/// Solves row/column sum equations restricted to `basis`; `None` if singular
/// or inconsistent.
fn solve_basis(basis: &[(usize, usize)], mu: &[f64], nu: &[f64]) -> Option<Vec<f64>> {
    let (l, s) = (mu.len(), nu.len());
    let n = basis.len();
    // Augmented (L+S) × (n+1) system.
    let mut a: Vec<Vec<f64>> = (0..l + s)
        .map(|r| {
            let mut row: Vec<f64> = basis
                .iter()
                .map(|&(i, j)| {
                    if (r < l && i == r) || (r >= l && j == r - l) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            row.push(if r < l { mu[r] } else { nu[r - l] });
            row
        })
        .collect();
    let mut pivot_row = 0;
    let mut pivots = Vec::with_capacity(n);
    for col in 0..n {
        let Some(p) = (pivot_row..a.len()).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())) else {
            return None;
        };
        if a[p][col].abs() < 1e-12 {
            return None;
        }
        a.swap(pivot_row, p);
        let pv = a[pivot_row][col];
        for v in a[pivot_row].iter_mut() {
            *v /= pv;
        }
        for r in 0..a.len() {
            if r != pivot_row && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in 0..=n {
                    a[r][c] -= f * a[pivot_row][c];
                }
            }
        }
        pivots.push(pivot_row);
        pivot_row += 1;
    }
    if a[pivot_row..].iter().any(|row| row[n].abs() > 1e-9) {
        return None;
    }
    Some(pivots.iter().map(|&r| a[r][n]).collect())
}

pub fn random_cost(rng: &mut impl Rng, l: usize, s: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| (0..s).map(|_| rng.random_range(0.0..2.0)).collect())
        .collect()
}

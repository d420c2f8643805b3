//! Dense two-phase simplex for small equality-form linear programs and the
//! balanced transport problem built on it.

use crate::error::{Error, Result};

const EPS: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

struct Tableau {
    /// `m` rows of `cols + 1` entries, the last being the right-hand side.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        *self.rows[i].last().expect("nonempty row")
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        self.rows[r].iter_mut().for_each(|v| *v /= p);
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    fn reduced_cost(&self, cost: &[f64], j: usize) -> f64 {
        cost[j]
            - self
                .rows
                .iter()
                .zip(&self.basis)
                .map(|(row, &b)| cost[b] * row[j])
                .sum::<f64>()
    }

    /// Primal simplex with Bland's rule over columns `0..allowed`.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<()> {
        for _ in 0..MAX_PIVOTS {
            let entering = (0..allowed)
                .filter(|j| !self.basis.contains(j))
                .find(|&j| self.reduced_cost(cost, j) < -EPS);
            let Some(c) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > EPS {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - EPS || (ratio <= lr + EPS && self.basis[i] < self.basis[li]) {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Contract("linear program is unbounded".into()));
            };
            self.pivot(r, c);
        }
        Err(Error::Contract("simplex exceeded its pivot budget".into()))
    }
}

/// Minimizes `cᵀx` subject to `A x = b`, `x ≥ 0`.
pub fn minimize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpSolution> {
    let n = c.len();
    let m = a.len();
    if b.len() != m || a.iter().any(|row| row.len() != n) {
        return Err(Error::dim("linear program dimensions disagree"));
    }
    // phase 1 tableau: [A | I | b] with b made nonnegative
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let mut row: Vec<f64> = a[i].iter().map(|v| sign * v).collect();
        row.extend((0..m).map(|k| if k == i { 1.0 } else { 0.0 }));
        row.push(sign * b[i]);
        rows.push(row);
    }
    let mut tab = Tableau {
        rows,
        basis: (n..n + m).collect(),
    };
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    tab.optimize(&phase1, n + m)?;
    let infeasibility: f64 = (0..m).filter(|&i| tab.basis[i] >= n).map(|i| tab.rhs(i)).sum();
    let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
    if infeasibility > 1e-9 * scale {
        return Err(Error::Contract(format!(
            "linear program is infeasible (residual {infeasibility:e})"
        )));
    }

    // drive artificials out of the basis; rows where that is impossible are
    // redundant constraints and are dropped
    let mut i = 0;
    while i < tab.rows.len() {
        if tab.basis[i] >= n {
            match (0..n).find(|&j| tab.rows[i][j].abs() > 1e-9) {
                Some(j) => tab.pivot(i, j),
                None => {
                    tab.rows.remove(i);
                    tab.basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }

    let mut cost = c.to_vec();
    cost.extend(std::iter::repeat_n(0.0, m));
    tab.optimize(&cost, n)?;

    let mut x = vec![0.0; n];
    for (i, &bv) in tab.basis.iter().enumerate() {
        if bv < n {
            x[bv] = tab.rhs(i).max(0.0);
        }
    }
    let objective = x.iter().zip(c).map(|(xi, ci)| xi * ci).sum();
    Ok(LpSolution { x, objective })
}

/// Optimal plan of a balanced transport problem; `cost` is `rows × cols`
/// row-major and the marginals must carry equal mass.
pub fn transport(cost: &[f64], row_mass: &[f64], col_mass: &[f64]) -> Result<LpSolution> {
    let (r, c) = (row_mass.len(), col_mass.len());
    if cost.len() != r * c {
        return Err(Error::dim(format!("cost has {} entries for a {r}x{c} plan", cost.len())));
    }
    if row_mass.iter().chain(col_mass).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain("transport marginals must be finite and nonnegative".into()));
    }
    let mut a = Vec::with_capacity(r + c);
    for i in 0..r {
        a.push((0..r * c).map(|k| if k / c == i { 1.0 } else { 0.0 }).collect());
    }
    for j in 0..c {
        a.push((0..r * c).map(|k| if k % c == j { 1.0 } else { 0.0 }).collect());
    }
    let b: Vec<f64> = row_mass.iter().chain(col_mass).copied().collect();
    minimize(cost, &a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_lp() {
        // min -x - y  s.t.  x + 2y + s1 = 4,  3x + y + s2 = 6
        let c = [-1.0, -1.0, 0.0, 0.0];
        let a = vec![vec![1.0, 2.0, 1.0, 0.0], vec![3.0, 1.0, 0.0, 1.0]];
        let sol = minimize(&c, &a, &[4.0, 6.0]).unwrap();
        assert!((sol.x[0] - 1.6).abs() < 1e-12 && (sol.x[1] - 1.2).abs() < 1e-12);
        assert!((sol.objective + 2.8).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_unbounded_programs_error() {
        let a = vec![vec![1.0, 1.0]];
        assert!(minimize(&[1.0, 1.0], &a, &[-1.0]).is_err());
        let a = vec![vec![1.0, -1.0]];
        assert!(minimize(&[-1.0, 0.0], &a, &[0.0]).is_err());
    }

    #[test]
    fn transport_handles_the_redundant_constraint() {
        let cost = [0.0, 1.0, 1.0, 0.0];
        let sol = transport(&cost, &[0.7, 0.3], &[0.4, 0.6]).unwrap();
        let want = [0.4, 0.3, 0.0, 0.3];
        for (x, w) in sol.x.iter().zip(want) {
            assert!((x - w).abs() < 1e-15, "{:?}", sol.x);
        }
        assert!((sol.objective - 0.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_transport_still_solves() {
        let cost = [0.5; 9];
        let sol = transport(&cost, &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((sol.x[2] - 1.0).abs() < 1e-15);
        assert!(transport(&cost, &[1.0, -1.0, 1.0], &[0.0, 0.0, 1.0]).is_err());
    }
}

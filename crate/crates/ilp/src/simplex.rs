//! Bounded-variable primal simplex for LP feasibility.
//!
//! Every row `r` gets a slack `s_r = a_r · x` whose bounds carry the row's
//! right-hand side, so the system is homogeneous (`A x - s = 0`) and every
//! variable, structural or slack, lives in a finite box. Phase one minimises
//! the sum of bound violations of basic variables directly (no artificial
//! columns), which lets a single tableau be reused across branch-and-bound
//! nodes: a node only changes column bounds, and any basis remains a valid
//! starting point.

use std::time::Instant;

use crate::error::IlpError;
use crate::model::{Comparator, IlpModel};

/// Primal feasibility tolerance on variable bounds.
pub const FEAS_TOL: f64 = 1e-6;
const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const DEGENERATE_LIMIT: usize = 50;
const REFACTOR_INTERVAL: usize = 2000;

/// LP relaxation of an [`IlpModel`]: integrality dropped, every row given a
/// finite activity range.
#[derive(Debug, Clone)]
pub struct LpRelaxation {
    pub num_cols: usize,
    pub col_lo: Vec<f64>,
    pub col_hi: Vec<f64>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub row_lo: Vec<f64>,
    pub row_hi: Vec<f64>,
}

impl LpRelaxation {
    pub fn from_model(model: &IlpModel) -> Self {
        let num_cols = model.vars.len();
        let col_lo: Vec<f64> = model.vars.iter().map(|v| v.lo as f64).collect();
        let col_hi: Vec<f64> = model.vars.iter().map(|v| v.hi as f64).collect();
        let mut rows = Vec::with_capacity(model.constraints.len());
        let mut row_lo = Vec::with_capacity(model.constraints.len());
        let mut row_hi = Vec::with_capacity(model.constraints.len());
        for c in &model.constraints {
            let mut terms: Vec<(usize, f64)> = Vec::with_capacity(c.terms.len());
            for &(v, coef) in &c.terms {
                match terms.iter_mut().find(|(j, _)| *j == v.0) {
                    Some(t) => t.1 += coef,
                    None => terms.push((v.0, coef)),
                }
            }
            terms.retain(|&(_, coef)| coef != 0.0);
            let (mut min_act, mut max_act) = (0.0, 0.0);
            for &(j, coef) in &terms {
                if coef > 0.0 {
                    min_act += coef * col_lo[j];
                    max_act += coef * col_hi[j];
                } else {
                    min_act += coef * col_hi[j];
                    max_act += coef * col_lo[j];
                }
            }
            let (lo, hi) = match c.cmp {
                Comparator::Le => (min_act.min(c.rhs), c.rhs),
                Comparator::Ge => (c.rhs, max_act.max(c.rhs)),
                Comparator::Eq => (c.rhs, c.rhs),
            };
            rows.push(terms);
            row_lo.push(lo);
            row_hi.push(hi);
        }
        LpRelaxation {
            num_cols,
            col_lo,
            col_hi,
            rows,
            row_lo,
            row_hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    /// A point satisfying all bounds and rows within [`FEAS_TOL`].
    Feasible(Vec<f64>),
    Infeasible,
    /// Deadline passed mid-solve.
    Interrupted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    AtLower,
    AtUpper,
}

/// Dense tableau simplex. Row `i` reads `Σ_j tab[i][j] x_j = 0` with the
/// basic variable of that row carrying coefficient one.
pub struct Simplex {
    m: usize,
    n_cols: usize,
    width: usize,
    tab: Vec<f64>,
    original: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    x: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    pivots_since_refactor: usize,
    pub iterations: u64,
}

impl Simplex {
    pub fn new(lp: &LpRelaxation) -> Self {
        let m = lp.rows.len();
        let n_cols = lp.num_cols;
        let width = n_cols + m;
        let mut tab = vec![0.0; m * width];
        for (i, row) in lp.rows.iter().enumerate() {
            for &(j, coef) in row {
                tab[i * width + j] -= coef;
            }
            tab[i * width + n_cols + i] = 1.0;
        }
        let mut lo = lp.col_lo.clone();
        lo.extend_from_slice(&lp.row_lo);
        let mut hi = lp.col_hi.clone();
        hi.extend_from_slice(&lp.row_hi);
        let mut status = vec![Status::AtLower; n_cols];
        status.extend(std::iter::repeat(Status::Basic).take(m));
        let basis = (n_cols..width).collect();
        let mut s = Simplex {
            m,
            n_cols,
            width,
            original: tab.clone(),
            tab,
            basis,
            status,
            x: vec![0.0; width],
            lo,
            hi,
            pivots_since_refactor: 0,
            iterations: 0,
        };
        s.place_nonbasics();
        s.recompute_basics();
        s
    }

    /// Replaces structural column bounds (slack bounds are fixed at build time).
    pub fn set_col_bounds(&mut self, lo: &[f64], hi: &[f64]) {
        self.lo[..self.n_cols].copy_from_slice(lo);
        self.hi[..self.n_cols].copy_from_slice(hi);
        self.place_nonbasics();
        self.recompute_basics();
    }

    fn place_nonbasics(&mut self) {
        for j in 0..self.width {
            match self.status[j] {
                Status::Basic => {}
                Status::AtLower => self.x[j] = self.lo[j],
                Status::AtUpper => self.x[j] = self.hi[j],
            }
        }
    }

    fn recompute_basics(&mut self) {
        for i in 0..self.m {
            let row = &self.tab[i * self.width..(i + 1) * self.width];
            let mut v = 0.0;
            for (j, &t) in row.iter().enumerate() {
                if t != 0.0 && self.status[j] != Status::Basic {
                    v -= t * self.x[j];
                }
            }
            self.x[self.basis[i]] = v;
        }
    }

    /// Rebuilds the tableau for the current basis from the original matrix.
    /// Falls back to the all-slack basis if the basis turned singular.
    fn refactor(&mut self) {
        self.pivots_since_refactor = 0;
        let mut tab = self.original.clone();
        let width = self.width;
        let mut assigned = vec![false; self.m];
        let mut new_basis = vec![usize::MAX; self.m];
        let mut ok = true;
        let mut order = self.basis.clone();
        order.sort_unstable();
        for &b in &order {
            let mut best = None;
            let mut best_abs = 1e-11;
            for r in 0..self.m {
                if !assigned[r] && tab[r * width + b].abs() > best_abs {
                    best_abs = tab[r * width + b].abs();
                    best = Some(r);
                }
            }
            let Some(p) = best else {
                ok = false;
                break;
            };
            assigned[p] = true;
            new_basis[p] = b;
            pivot_rows(&mut tab, width, p, b);
        }
        if ok {
            self.tab = tab;
            self.basis = new_basis;
        } else {
            self.tab = self.original.clone();
            for j in 0..width {
                if self.status[j] == Status::Basic {
                    self.status[j] = Status::AtLower;
                }
            }
            self.basis = (self.n_cols..width).collect();
            for &b in &self.basis {
                self.status[b] = Status::Basic;
            }
        }
        self.place_nonbasics();
        self.recompute_basics();
    }

    /// Structural part of the current point.
    pub fn point(&self) -> Vec<f64> {
        self.x[..self.n_cols].to_vec()
    }

    fn infeasibility_costs(&self, costs: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.m {
            let b = self.basis[i];
            let v = self.x[b];
            costs[i] = if v < self.lo[b] - FEAS_TOL {
                total += self.lo[b] - v;
                -1.0
            } else if v > self.hi[b] + FEAS_TOL {
                total += v - self.hi[b];
                1.0
            } else {
                0.0
            };
        }
        total
    }

    /// Phase-one simplex from the current basis.
    pub fn find_feasible(
        &mut self,
        max_iters: usize,
        deadline: Option<Instant>,
    ) -> Result<LpOutcome, IlpError> {
        let mut costs = vec![0.0; self.m];
        let mut reduced = vec![0.0; self.width];
        let mut degenerate = 0usize;
        let mut bland = false;
        let mut retried = false;
        for iter in 0..max_iters {
            if iter % 64 == 63 {
                if let Some(d) = deadline {
                    if Instant::now() >= d {
                        return Ok(LpOutcome::Interrupted);
                    }
                }
            }
            if self.pivots_since_refactor >= REFACTOR_INTERVAL {
                self.refactor();
            }
            let infeas = self.infeasibility_costs(&mut costs);
            if infeas == 0.0 {
                return Ok(LpOutcome::Feasible(self.point()));
            }

            reduced.iter_mut().for_each(|d| *d = 0.0);
            for i in 0..self.m {
                let c = costs[i];
                if c == 0.0 {
                    continue;
                }
                let row = &self.tab[i * self.width..(i + 1) * self.width];
                for (d, &t) in reduced.iter_mut().zip(row) {
                    *d -= c * t;
                }
            }

            // Entering variable.
            let mut entering = None;
            let mut best = 0.0;
            for j in 0..self.width {
                let dir = match self.status[j] {
                    Status::Basic => continue,
                    _ if self.hi[j] - self.lo[j] <= 0.0 => continue,
                    Status::AtLower if reduced[j] < -COST_TOL => 1.0,
                    Status::AtUpper if reduced[j] > COST_TOL => -1.0,
                    _ => continue,
                };
                let score = reduced[j].abs();
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if score > best {
                    best = score;
                    entering = Some((j, dir));
                }
            }
            let Some((q, dir)) = entering else {
                // Local optimum of a convex function: infeasible, unless the
                // verdict came from drifted values. Refactor once and retry.
                if !retried && infeas < 1e-3 {
                    retried = true;
                    self.refactor();
                    continue;
                }
                return Ok(LpOutcome::Infeasible);
            };

            // Ratio test.
            let mut step = self.hi[q] - self.lo[q];
            let mut leaving: Option<(usize, f64)> = None;
            let mut leaving_rate = 0.0f64;
            for i in 0..self.m {
                let rate = -self.tab[i * self.width + q] * dir;
                if rate.abs() <= PIVOT_TOL {
                    continue;
                }
                let b = self.basis[i];
                let v = self.x[b];
                let (lo, hi) = (self.lo[b], self.hi[b]);
                let (limit, target) = if rate > 0.0 {
                    if v < lo - FEAS_TOL {
                        ((lo - v) / rate, lo)
                    } else if v <= hi + FEAS_TOL {
                        ((hi - v).max(0.0) / rate, hi)
                    } else {
                        continue;
                    }
                } else if v > hi + FEAS_TOL {
                    ((v - hi) / -rate, hi)
                } else if v >= lo - FEAS_TOL {
                    ((v - lo).max(0.0) / -rate, lo)
                } else {
                    continue;
                };
                let better = match leaving {
                    None => limit < step,
                    Some(_) => {
                        if bland {
                            limit < step - 1e-12
                                || (limit <= step + 1e-12 && b < self.basis[leaving.unwrap().0])
                        } else {
                            limit < step - 1e-12
                                || (limit <= step + 1e-12 && rate.abs() > leaving_rate)
                        }
                    }
                };
                if better {
                    step = limit;
                    leaving = Some((i, target));
                    leaving_rate = rate.abs();
                }
            }

            if step <= 1e-12 {
                degenerate += 1;
                if degenerate > DEGENERATE_LIMIT {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = false;
            }
            self.iterations += 1;

            // Move along the edge.
            if step > 0.0 {
                for i in 0..self.m {
                    let t = self.tab[i * self.width + q];
                    if t != 0.0 {
                        self.x[self.basis[i]] -= t * dir * step;
                    }
                }
                self.x[q] += dir * step;
            }
            match leaving {
                None => {
                    self.status[q] = if dir > 0.0 {
                        Status::AtUpper
                    } else {
                        Status::AtLower
                    };
                    self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                }
                Some((p, target)) => {
                    let out = self.basis[p];
                    self.x[out] = target;
                    self.status[out] = if target == self.lo[out] {
                        Status::AtLower
                    } else {
                        Status::AtUpper
                    };
                    self.status[q] = Status::Basic;
                    self.basis[p] = q;
                    pivot_rows(&mut self.tab, self.width, p, q);
                    self.pivots_since_refactor += 1;
                    if self.pivots_since_refactor % 100 == 0 {
                        self.recompute_basics();
                    }
                }
            }
        }
        Err(IlpError::Numerical(format!(
            "phase one did not converge within {max_iters} iterations"
        )))
    }
}

fn pivot_rows(tab: &mut [f64], width: usize, p: usize, q: usize) {
    let piv = tab[p * width + q];
    let inv = 1.0 / piv;
    for v in &mut tab[p * width..(p + 1) * width] {
        *v *= inv;
    }
    tab[p * width + q] = 1.0;
    let (before, rest) = tab.split_at_mut(p * width);
    let (prow, after) = rest.split_at_mut(width);
    let eliminate = |row: &mut [f64]| {
        let factor = row[q];
        if factor != 0.0 {
            for (r, &pv) in row.iter_mut().zip(prow.iter()) {
                if pv != 0.0 {
                    *r -= factor * pv;
                }
            }
            row[q] = 0.0;
        }
    };
    for row in before.chunks_mut(width) {
        eliminate(row);
    }
    for row in after.chunks_mut(width) {
        eliminate(row);
    }
}

/// One-shot LP feasibility check with a fresh tableau.
pub fn solve_lp(lp: &LpRelaxation) -> Result<LpOutcome, IlpError> {
    for (j, (&l, &h)) in lp.col_lo.iter().zip(&lp.col_hi).enumerate() {
        if !(l.is_finite() && h.is_finite()) {
            return Err(IlpError::Invalid(format!("column {j} has an infinite bound")));
        }
        if l > h {
            return Ok(LpOutcome::Infeasible);
        }
    }
    for (&l, &h) in lp.row_lo.iter().zip(&lp.row_hi) {
        if l > h + FEAS_TOL {
            return Ok(LpOutcome::Infeasible);
        }
    }
    let mut s = Simplex::new(lp);
    s.find_feasible(50_000 + 50 * (lp.num_cols + lp.rows.len()), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IlpModel, LinConstraint};

    fn lp_of(model: &IlpModel) -> LpRelaxation {
        LpRelaxation::from_model(model)
    }

    #[test]
    fn two_lower_bounds_feasible() {
        let mut m = IlpModel::new();
        let x = m.add_integer("x", 0, 10);
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0)], 2.0));
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0)], 3.0));
        match solve_lp(&lp_of(&m)).unwrap() {
            LpOutcome::Feasible(p) => assert!(p[0] >= 3.0 - FEAS_TOL && p[0] <= 10.0),
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn contradictory_bounds_infeasible() {
        let mut m = IlpModel::new();
        let x = m.add_integer("x", 0, 10);
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0)], 2.0));
        m.add_constraint(LinConstraint::le(vec![(x, 1.0)], 1.0));
        assert_eq!(solve_lp(&lp_of(&m)).unwrap(), LpOutcome::Infeasible);
    }

    #[test]
    fn equality_system() {
        // x + y = 4, x - y = 1 -> (2.5, 1.5)
        let mut m = IlpModel::new();
        let x = m.add_integer("x", -10, 10);
        let y = m.add_integer("y", -10, 10);
        m.add_constraint(LinConstraint::eq(vec![(x, 1.0), (y, 1.0)], 4.0));
        m.add_constraint(LinConstraint::eq(vec![(x, 1.0), (y, -1.0)], 1.0));
        match solve_lp(&lp_of(&m)).unwrap() {
            LpOutcome::Feasible(p) => {
                assert!((p[0] - 2.5).abs() < 1e-6);
                assert!((p[1] - 1.5).abs() < 1e-6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn warm_start_after_bound_change() {
        let mut m = IlpModel::new();
        let x = m.add_integer("x", 0, 10);
        let y = m.add_integer("y", 0, 10);
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0), (y, 1.0)], 12.0));
        let lp = lp_of(&m);
        let mut s = Simplex::new(&lp);
        assert!(matches!(
            s.find_feasible(1000, None).unwrap(),
            LpOutcome::Feasible(_)
        ));
        s.set_col_bounds(&[0.0, 0.0], &[1.0, 10.0]);
        assert_eq!(s.find_feasible(1000, None).unwrap(), LpOutcome::Infeasible);
        s.set_col_bounds(&[5.0, 5.0], &[10.0, 10.0]);
        match s.find_feasible(1000, None).unwrap() {
            LpOutcome::Feasible(p) => assert!(p[0] + p[1] >= 12.0 - 1e-6),
            other => panic!("{other:?}"),
        }
    }
}

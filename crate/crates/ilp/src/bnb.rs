//! Depth-first branch-and-bound over the LP relaxation.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::IlpError;
use crate::exact;
use crate::model::{Comparator, IlpModel, VarKind};
use crate::simplex::{LpOutcome, LpRelaxation, Simplex};

const INT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub deadline: Option<Instant>,
    /// Every this many nodes the dive is abandoned in favour of the most
    /// promising open node.
    pub restart_interval: u64,
    pub bound_propagation: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            deadline: None,
            restart_interval: 256,
            bound_propagation: true,
        }
    }
}

impl SolverConfig {
    pub fn with_timeout(timeout: Duration) -> Self {
        SolverConfig {
            deadline: Some(Instant::now() + timeout),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub nodes: u64,
    pub lp_iterations: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub witness: Option<Vec<i64>>,
    pub stats: SolveStats,
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vec<i64>,
    hi: Vec<i64>,
    depth: u32,
    /// Fractionality of the parent's LP point; smaller looks closer to integral.
    score: f64,
}

/// Row data in the form used by bound propagation.
struct Rows {
    terms: Vec<Vec<(usize, f64)>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Rows {
    fn new(model: &IlpModel) -> Self {
        let lp = LpRelaxation::from_model(model);
        let mut lo = Vec::with_capacity(model.constraints.len());
        let mut hi = Vec::with_capacity(model.constraints.len());
        for c in &model.constraints {
            match c.cmp {
                Comparator::Le => {
                    lo.push(f64::NEG_INFINITY);
                    hi.push(c.rhs);
                }
                Comparator::Ge => {
                    lo.push(c.rhs);
                    hi.push(f64::INFINITY);
                }
                Comparator::Eq => {
                    lo.push(c.rhs);
                    hi.push(c.rhs);
                }
            }
        }
        Rows {
            terms: lp.rows,
            lo,
            hi,
        }
    }

    /// Activity-based bound tightening. Returns false when a domain empties.
    fn propagate(&self, lo: &mut [i64], hi: &mut [i64]) -> bool {
        for _ in 0..8 {
            let mut changed = false;
            for (r, terms) in self.terms.iter().enumerate() {
                let (mut min_act, mut max_act) = (0.0f64, 0.0f64);
                for &(j, c) in terms {
                    if c > 0.0 {
                        min_act += c * lo[j] as f64;
                        max_act += c * hi[j] as f64;
                    } else {
                        min_act += c * hi[j] as f64;
                        max_act += c * lo[j] as f64;
                    }
                }
                let tol = 1e-7 * (1.0 + min_act.abs().max(max_act.abs()));
                if min_act > self.hi[r] + tol || max_act < self.lo[r] - tol {
                    return false;
                }
                for &(j, c) in terms {
                    let (cmin, cmax) = if c > 0.0 {
                        (c * lo[j] as f64, c * hi[j] as f64)
                    } else {
                        (c * hi[j] as f64, c * lo[j] as f64)
                    };
                    // c·x_j ≤ hi - (min_act - cmin) and ≥ lo - (max_act - cmax)
                    let upper = self.hi[r] - (min_act - cmin);
                    let lower = self.lo[r] - (max_act - cmax);
                    let (mut new_lo, mut new_hi) = (lo[j], hi[j]);
                    if c > 0.0 {
                        if upper.is_finite() {
                            new_hi = new_hi.min(floor_tol(upper / c, tol / c));
                        }
                        if lower.is_finite() {
                            new_lo = new_lo.max(ceil_tol(lower / c, tol / c));
                        }
                    } else {
                        if upper.is_finite() {
                            new_lo = new_lo.max(ceil_tol(upper / c, tol / -c));
                        }
                        if lower.is_finite() {
                            new_hi = new_hi.min(floor_tol(lower / c, tol / -c));
                        }
                    }
                    if new_lo > new_hi {
                        return false;
                    }
                    if new_lo != lo[j] || new_hi != hi[j] {
                        lo[j] = new_lo;
                        hi[j] = new_hi;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        true
    }
}

fn floor_tol(v: f64, tol: f64) -> i64 {
    let t = (v + tol.max(1e-9) + 1e-9 * v.abs()).floor();
    t.clamp(i64::MIN as f64 / 4.0, i64::MAX as f64 / 4.0) as i64
}

fn ceil_tol(v: f64, tol: f64) -> i64 {
    let t = (v - tol.max(1e-9) - 1e-9 * v.abs()).ceil();
    t.clamp(i64::MIN as f64 / 4.0, i64::MAX as f64 / 4.0) as i64
}

/// Decides feasibility of a pure-integer model.
///
/// Branching picks the most fractional binary, then the most fractional
/// general integer. Integral LP points are rounded and re-checked exactly;
/// a point that fails the exact check is split further on a variable of a
/// violated row, so LP tolerances never decide the answer.
pub fn solve_ilp(model: &IlpModel, config: &SolverConfig) -> Result<SolveResult, IlpError> {
    let start = Instant::now();
    model.validate()?;
    let mut stats = SolveStats::default();
    let n = model.vars.len();
    let is_binary: Vec<bool> = model
        .vars
        .iter()
        .map(|v| v.kind == VarKind::Binary)
        .collect();
    let rows = Rows::new(model);
    let lp = LpRelaxation::from_model(model);
    let mut simplex = Simplex::new(&lp);
    let max_iters = 20_000 + 20 * (n + lp.rows.len());

    let finish = |status, witness, mut stats: SolveStats, simplex: &Simplex| {
        stats.lp_iterations = simplex.iterations;
        stats.wall_time_s = start.elapsed().as_secs_f64();
        Ok(SolveResult {
            status,
            witness,
            stats,
        })
    };

    let mut open = vec![Node {
        lo: model.vars.iter().map(|v| v.lo).collect(),
        hi: model.vars.iter().map(|v| v.hi).collect(),
        depth: 0,
        score: 0.0,
    }];
    let mut lo_f = vec![0.0; n];
    let mut hi_f = vec![0.0; n];

    while let Some(mut node) = pop_next(&mut open, stats.nodes, config.restart_interval) {
        if let Some(d) = config.deadline {
            if Instant::now() >= d {
                return finish(SolveStatus::Timeout, None, stats, &simplex);
            }
        }
        stats.nodes += 1;
        if config.bound_propagation && !rows.propagate(&mut node.lo, &mut node.hi) {
            continue;
        }

        let point: Vec<f64> = if node.lo == node.hi {
            node.lo.iter().map(|&v| v as f64).collect()
        } else {
            for j in 0..n {
                lo_f[j] = node.lo[j] as f64;
                hi_f[j] = node.hi[j] as f64;
            }
            simplex.set_col_bounds(&lo_f, &hi_f);
            match simplex.find_feasible(max_iters, config.deadline)? {
                LpOutcome::Infeasible => continue,
                LpOutcome::Interrupted => {
                    return finish(SolveStatus::Timeout, None, stats, &simplex)
                }
                LpOutcome::Feasible(p) => p,
            }
        };

        // Branching candidate on fractional values.
        let mut pick: Option<(usize, f64)> = None;
        let mut pick_key = (false, 0.0f64);
        let mut total_frac = 0.0;
        for j in 0..n {
            let v = point[j];
            let frac = v - v.floor();
            let dist = frac.min(1.0 - frac);
            if dist <= INT_TOL || node.lo[j] == node.hi[j] {
                continue;
            }
            total_frac += dist;
            let key = (is_binary[j], dist);
            if pick.is_none() || key.0 > pick_key.0 || (key.0 == pick_key.0 && key.1 > pick_key.1)
            {
                pick = Some((j, v));
                pick_key = key;
            }
        }

        if let Some((j, v)) = pick {
            let down_hi = v.floor() as i64;
            let up_lo = down_hi + 1;
            let mut down = node.clone();
            down.hi[j] = down_hi.min(node.hi[j]);
            down.depth += 1;
            down.score = total_frac;
            let mut up = node;
            up.lo[j] = up_lo.max(up.lo[j]);
            up.depth += 1;
            up.score = total_frac;
            // Explore the side nearer the LP value first.
            if v - v.floor() < 0.5 {
                open.push(up);
                open.push(down);
            } else {
                open.push(down);
                open.push(up);
            }
            continue;
        }

        let candidate: Vec<i64> = point
            .iter()
            .enumerate()
            .map(|(j, &v)| (v.round() as i64).clamp(node.lo[j], node.hi[j]))
            .collect();
        match exact::check_point(model, &candidate) {
            Ok(()) => {
                return finish(SolveStatus::Feasible, Some(candidate), stats, &simplex);
            }
            Err(row) => {
                if let Some((a, b)) = split_on_violation(model, &node, &candidate, row) {
                    open.push(b);
                    open.push(a);
                }
            }
        }
    }
    finish(SolveStatus::Infeasible, None, stats, &simplex)
}

fn pop_next(open: &mut Vec<Node>, explored: u64, restart_interval: u64) -> Option<Node> {
    if restart_interval > 0 && explored > 0 && explored % restart_interval == 0 && open.len() > 1
    {
        let best = open
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.score
                    .total_cmp(&b.score)
                    .then_with(|| a.depth.cmp(&b.depth))
            })
            .map(|(i, _)| i)?;
        return Some(open.swap_remove(best));
    }
    open.pop()
}

/// Splits a node whose rounded LP point fails the exact check. Both children
/// exclude the candidate value of the chosen variable on one side, so the
/// search still terminates.
fn split_on_violation(
    model: &IlpModel,
    node: &Node,
    candidate: &[i64],
    row: usize,
) -> Option<(Node, Node)> {
    let in_row: Vec<usize> = if row < model.constraints.len() {
        model.constraints[row].terms.iter().map(|(v, _)| v.0).collect()
    } else {
        Vec::new()
    };
    let free = |j: &usize| node.lo[*j] < node.hi[*j];
    let j = in_row
        .iter()
        .copied()
        .filter(free)
        .max_by_key(|&j| node.hi[j] - node.lo[j])
        .or_else(|| (0..node.lo.len()).filter(free).max_by_key(|&j| node.hi[j] - node.lo[j]))?;
    let v = candidate[j];
    let mut left = node.clone();
    let mut right = node.clone();
    if v < node.hi[j] {
        left.hi[j] = v;
        right.lo[j] = v + 1;
    } else {
        left.hi[j] = v - 1;
        right.lo[j] = v;
    }
    left.depth += 1;
    right.depth += 1;
    Some((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinConstraint;

    #[test]
    fn sum_too_small_is_infeasible() {
        let mut m = IlpModel::new();
        let x = m.add_integer("x", 0, 5);
        let y = m.add_integer("y", 0, 5);
        m.add_constraint(LinConstraint::le(vec![(x, 1.0), (y, 1.0)], 3.0));
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0)], 2.0));
        m.add_constraint(LinConstraint::ge(vec![(y, 1.0)], 2.0));
        let r = solve_ilp(&m, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.witness.is_none());
    }

    #[test]
    fn fractional_relaxation_integer_infeasible() {
        // 2x = 1 has an LP solution but no integer one.
        let mut m = IlpModel::new();
        let x = m.add_integer("x", -3, 3);
        m.add_constraint(LinConstraint::eq(vec![(x, 2.0)], 1.0));
        let mut cfg = SolverConfig::default();
        cfg.bound_propagation = false;
        let r = solve_ilp(&m, &cfg).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn witness_is_exactly_feasible() {
        let mut m = IlpModel::new();
        let x = m.add_integer("x", 0, 100);
        let y = m.add_integer("y", 0, 100);
        m.add_constraint(LinConstraint::eq(vec![(x, 3.0), (y, -7.0)], 1.0));
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0)], 10.0));
        let r = solve_ilp(&m, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Feasible);
        let w = r.witness.unwrap();
        assert_eq!(3 * w[0] - 7 * w[1], 1);
        assert!(w[0] >= 10);
    }

    #[test]
    fn expired_deadline_times_out() {
        let mut m = IlpModel::new();
        let x = m.add_integer("x", 0, 5);
        m.add_constraint(LinConstraint::ge(vec![(x, 1.0)], 1.0));
        let cfg = SolverConfig {
            deadline: Some(Instant::now() - Duration::from_millis(1)),
            ..SolverConfig::default()
        };
        assert_eq!(solve_ilp(&m, &cfg).unwrap().status, SolveStatus::Timeout);
    }
}

//! Exact integer-linear encoding of a robustness query.
//!
//! One program is built per candidate target class `t`; it is feasible iff
//! some input in the ball makes the network prefer `t` over the true label.
//! Every variable is integral: accumulators are tied to the inputs by an
//! equality with integer coefficients, rounding becomes a pair of
//! inequalities around `z_y + f·acc`, and clips, ReLU markers and max pools
//! become big-M max/min gadgets whose constants come from a [`BoundsTable`].
//! Neurons whose clip phase is already fixed by the bounds get an alias or a
//! constant instead of a gadget.

use qnnv_ilp::{IlpModel, LinConstraint, VarId};

use crate::error::{EncodeError, VerifyError};
use crate::interval::{misclass_threshold, AffineNeuronBounds, BoundsTable, IntRange, LayerBounds, Phase};
use crate::model::{AffineOp, Op, PoolOp, QuantModel, ReluOp};
use crate::query::RobustnessQuery;
use crate::quant::RoundingMode;

/// A network value inside the program: a variable or a known constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Var(VarId),
    Const(i64),
}

/// A value together with its range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounded {
    pub value: Value,
    pub range: IntRange,
}

impl Bounded {
    pub fn constant(c: i64) -> Self {
        Bounded {
            value: Value::Const(c),
            range: IntRange::new(c, c),
        }
    }
}

/// Linear expression under construction: variable terms plus a constant.
#[derive(Debug, Default, Clone)]
struct Expr {
    terms: Vec<(VarId, f64)>,
    constant: f64,
}

impl Expr {
    fn add(mut self, v: Value, k: f64) -> Self {
        match v {
            Value::Var(id) => self.terms.push((id, k)),
            Value::Const(c) => self.constant += k * c as f64,
        }
        self
    }

    fn add_const(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    /// `expr ≥ 0`.
    fn ge_zero(self) -> LinConstraint {
        LinConstraint::ge(self.terms, -self.constant)
    }

    /// `expr ≤ 0`.
    fn le_zero(self) -> LinConstraint {
        LinConstraint::le(self.terms, -self.constant)
    }
}

/// Right-hand side `a − ε` rounded so that the realized margin
/// `a − rhs` lies in `(0, ε]`. `None` when ε is below double resolution at `a`.
pub fn strict_rhs(a: f64, eps: f64) -> Option<f64> {
    let mut rhs = a - eps;
    // Two-sum: a − ε = rhs + err exactly.
    let bv = rhs - a;
    let err = (a - (rhs - bv)) + (-eps - bv);
    if err > 0.0 {
        // Realized margin ε + err would exceed ε; loosen by one ulp.
        rhs = rhs.next_up();
    }
    (rhs < a).then_some(rhs)
}

/// A single integer program together with the handles the pipeline needs.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub target: usize,
    pub model: IlpModel,
    /// One variable per input pixel, in input order.
    pub inputs: Vec<VarId>,
    pub logits: Vec<Bounded>,
}

impl Encoding {
    /// Input pixels of a feasible point.
    pub fn witness(&self, point: &[i64]) -> Vec<i64> {
        self.inputs.iter().map(|v| point[v.0]).collect()
    }
}

/// Incremental builder over one [`IlpModel`].
#[derive(Debug, Default)]
pub struct Encoder {
    pub ilp: IlpModel,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { ilp: IlpModel::new() }
    }

    fn var(&mut self, name: String, range: IntRange) -> Bounded {
        if range.lo == range.hi {
            return Bounded::constant(range.lo);
        }
        Bounded {
            value: Value::Var(self.ilp.add_integer(name, range.lo, range.hi)),
            range,
        }
    }

    /// One variable per pixel with the query box as bounds. Pixels are always
    /// variables (even when fixed) so a witness can be read back.
    pub fn encode_input(&mut self, input: &[IntRange]) -> (Vec<VarId>, Vec<Bounded>) {
        let mut ids = Vec::with_capacity(input.len());
        let mut vals = Vec::with_capacity(input.len());
        for (i, r) in input.iter().enumerate() {
            let id = self.ilp.add_integer(format!("x{i}"), r.lo, r.hi);
            ids.push(id);
            vals.push(Bounded {
                value: Value::Var(id),
                range: *r,
            });
        }
        (ids, vals)
    }

    /// Accumulator equality and the two rounding rows. Returns `ŷ1`.
    pub fn encode_affine_round(
        &mut self,
        op: &AffineOp,
        j: usize,
        nb: &AffineNeuronBounds,
        prev: &[Bounded],
        prefix: &str,
    ) -> Result<Bounded, VerifyError> {
        let n = &op.neurons[j];
        // acc − Σ w·x = b − z_x·Σ w
        let acc = self.var(format!("{prefix}.acc"), nb.acc);
        let mut e = Expr::default().add(acc.value, 1.0);
        for &(i, w) in &n.terms {
            e = e.add(prev[i].value, -(w as f64));
        }
        let wsum: i64 = n.terms.iter().map(|&(_, w)| w).sum();
        e = e.add_const(-(n.bias_acc as f64) + (op.input_zero * wsum) as f64);
        if !e.terms.is_empty() {
            self.ilp.add_constraint(LinConstraint::eq(e.terms, -e.constant).named(format!("{prefix}.acc_def")));
        } else if e.constant != 0.0 {
            return Err(EncodeError::Query(format!("{prefix}: constant accumulator outside its range")).into());
        }

        let f = n.requant.factor;
        let z = op.output_zero as f64;
        let yhat1 = self.var(format!("{prefix}.yhat1"), nb.yhat1);
        // ŷ1 − f·acc ≤ 1/2 + z_y
        let up = Expr::default().add(yhat1.value, 1.0).add(acc.value, -f).add_const(-(0.5 + z));
        // f·acc − ŷ1 ≤ 1/2 − ε − z_y
        let rhs = strict_rhs(0.5 - z, nb.epsilon).ok_or_else(|| {
            EncodeError::Query(format!("{prefix}: rounding margin {} below double resolution", nb.epsilon))
        })?;
        let down = Expr::default().add(acc.value, f).add(yhat1.value, -1.0).add_const(-rhs);
        for (c, tag) in [(up, "round_hi"), (down, "round_lo")] {
            if c.terms.is_empty() {
                // Both sides are constants: ŷ1 was computed by exact rounding.
                continue;
            }
            self.ilp.add_constraint(c.le_zero().named(format!("{prefix}.{tag}")));
        }
        Ok(yhat1)
    }

    /// `z = max(x, y)` with one binary `b` (`b = 1` selects `x`) and
    /// per-branch big-M constants from the operand ranges.
    pub fn encode_max(&mut self, x: Bounded, y: Bounded, name: &str) -> Bounded {
        let range = IntRange::new(x.range.lo.max(y.range.lo), x.range.hi.max(y.range.hi));
        if x.range.lo >= y.range.hi {
            return x;
        }
        if y.range.lo >= x.range.hi {
            return y;
        }
        let z = self.var(name.to_string(), range);
        let b = Value::Var(self.ilp.add_binary(format!("{name}.b")));
        let m_x = (y.range.hi - x.range.lo).max(0) as f64;
        let m_y = (x.range.hi - y.range.lo).max(0) as f64;
        // z ≥ x, z ≥ y
        self.push(Expr::default().add(z.value, 1.0).add(x.value, -1.0).ge_zero(), name, "ge_x");
        self.push(Expr::default().add(z.value, 1.0).add(y.value, -1.0).ge_zero(), name, "ge_y");
        // z ≤ x + M_x·(1 − b)
        self.push(
            Expr::default()
                .add(z.value, 1.0)
                .add(x.value, -1.0)
                .add(b, m_x)
                .add_const(-m_x)
                .le_zero(),
            name,
            "le_x",
        );
        // z ≤ y + M_y·b
        self.push(
            Expr::default().add(z.value, 1.0).add(y.value, -1.0).add(b, -m_y).le_zero(),
            name,
            "le_y",
        );
        z
    }

    /// `z = min(x, y)` with one binary `b` (`b = 1` selects `x`).
    pub fn encode_min(&mut self, x: Bounded, y: Bounded, name: &str) -> Bounded {
        let range = IntRange::new(x.range.lo.min(y.range.lo), x.range.hi.min(y.range.hi));
        if x.range.hi <= y.range.lo {
            return x;
        }
        if y.range.hi <= x.range.lo {
            return y;
        }
        let z = self.var(name.to_string(), range);
        let b = Value::Var(self.ilp.add_binary(format!("{name}.b")));
        let m_x = (x.range.hi - y.range.lo).max(0) as f64;
        let m_y = (y.range.hi - x.range.lo).max(0) as f64;
        // z ≤ x, z ≤ y
        self.push(Expr::default().add(z.value, 1.0).add(x.value, -1.0).le_zero(), name, "le_x");
        self.push(Expr::default().add(z.value, 1.0).add(y.value, -1.0).le_zero(), name, "le_y");
        // z ≥ x − M_x·(1 − b)
        self.push(
            Expr::default()
                .add(z.value, 1.0)
                .add(x.value, -1.0)
                .add(b, -m_x)
                .add_const(m_x)
                .ge_zero(),
            name,
            "ge_x",
        );
        // z ≥ y − M_y·b
        self.push(
            Expr::default().add(z.value, 1.0).add(y.value, -1.0).add(b, m_y).ge_zero(),
            name,
            "ge_y",
        );
        z
    }

    /// Narrows a value's variable bounds to a range known to contain it.
    fn tighten(&mut self, b: Bounded, r: IntRange) -> Bounded {
        let Value::Var(id) = b.value else { return b };
        let lo = b.range.lo.max(r.lo);
        let hi = b.range.hi.min(r.hi);
        if lo > hi {
            return b;
        }
        let v = &mut self.ilp.vars[id.0];
        v.lo = v.lo.max(lo);
        v.hi = v.hi.min(hi);
        Bounded {
            value: b.value,
            range: IntRange::new(v.lo, v.hi),
        }
    }

    fn push(&mut self, c: LinConstraint, name: &str, tag: &str) {
        self.ilp.add_constraint(c.named(format!("{name}.{tag}")));
    }

    /// `Clip(ŷ1, lbc, ubc)` as `min(max(ŷ1, lbc), ubc)`, shortcut by phase.
    pub fn encode_clip(
        &mut self,
        yhat1: Bounded,
        lbc: i64,
        ubc: i64,
        phase: Phase,
        prefix: &str,
    ) -> Result<Bounded, VerifyError> {
        if lbc > ubc {
            return Err(EncodeError::ClipOrder { lo: lbc, hi: ubc }.into());
        }
        Ok(match phase {
            Phase::AlwaysLb => Bounded::constant(lbc),
            Phase::AlwaysUb => Bounded::constant(ubc),
            Phase::AlwaysLinear => yhat1,
            Phase::Unknown => {
                let ymax = self.encode_max(yhat1, Bounded::constant(lbc), &format!("{prefix}.ymax"));
                self.encode_min(ymax, Bounded::constant(ubc), &format!("{prefix}.yq"))
            }
        })
    }

    fn encode_affine(
        &mut self,
        op: &AffineOp,
        table: &[AffineNeuronBounds],
        prev: &[Bounded],
        live: &[bool],
        k: usize,
    ) -> Result<Vec<Bounded>, VerifyError> {
        let mut out = Vec::with_capacity(op.neurons.len());
        for (j, nb) in table.iter().enumerate() {
            let prefix = format!("L{k}.n{j}");
            let out_val = match nb.phase {
                _ if !live[j] => placeholder(nb.out),
                // Constant outputs need no accumulator or rounding rows.
                Phase::AlwaysLb => Bounded::constant(op.clip_lo),
                Phase::AlwaysUb => Bounded::constant(op.clip_hi),
                phase => {
                    let yhat1 = self.encode_affine_round(op, j, nb, prev, &prefix)?;
                    let y = self.encode_clip(yhat1, op.clip_lo, op.clip_hi, phase, &prefix)?;
                    self.tighten(y, nb.out)
                }
            };
            out.push(out_val);
        }
        Ok(out)
    }

    fn encode_pool(&mut self, op: &PoolOp, prev: &[Bounded], live: &[bool], k: usize) -> Vec<Bounded> {
        op.windows
            .iter()
            .enumerate()
            .map(|(j, w)| {
                if !live[j] {
                    let r = w.iter().map(|&i| prev[i].range).reduce(|a, b| IntRange::new(a.lo.max(b.lo), a.hi.max(b.hi)));
                    return placeholder(r.expect("non-empty window"));
                }
                let floor = w.iter().map(|&i| prev[i].range.lo).max().expect("non-empty window");
                // Elements that can never exceed another's lower bound are dropped.
                let mut live: Vec<Bounded> = w.iter().map(|&i| prev[i]).filter(|b| b.range.hi >= floor).collect();
                live.dedup();
                let mut acc = live[0];
                for (c, &b) in live.iter().enumerate().skip(1) {
                    let name = if c + 1 == live.len() {
                        format!("L{k}.n{j}.pool")
                    } else {
                        format!("L{k}.n{j}.pool.c{c}")
                    };
                    acc = self.encode_max(acc, b, &name);
                }
                acc
            })
            .collect()
    }

    fn encode_relu(&mut self, op: &ReluOp, prev: &[Bounded], live: &[bool], k: usize) -> Vec<Bounded> {
        prev.iter()
            .enumerate()
            .map(|(j, &x)| {
                if live[j] {
                    self.encode_max(x, Bounded::constant(op.zero_point), &format!("L{k}.n{j}.relu"))
                } else {
                    placeholder(IntRange::new(x.range.lo.max(op.zero_point), x.range.hi.max(op.zero_point)))
                }
            })
            .collect()
    }

    /// `o_t − o_l ≥ c` with the tie-aware threshold `c`.
    pub fn encode_misclassification(&mut self, logits: &[Bounded], target: usize, label: usize) {
        let c = misclass_threshold(target, label) as f64;
        let e = Expr::default()
            .add(logits[target].value, 1.0)
            .add(logits[label].value, -1.0)
            .add_const(-c);
        self.ilp.add_constraint(e.ge_zero().named(format!("misclass_t{target}")));
    }
}

/// Stand-in for a neuron outside the cone of influence of the compared
/// logits. It is never referenced by any row.
fn placeholder(range: IntRange) -> Bounded {
    Bounded {
        value: Value::Const(range.lo),
        range,
    }
}

/// For every op, which of its outputs can influence logits `a` or `b`.
pub fn cone_of_influence(model: &QuantModel, a: usize, b: usize) -> Vec<Vec<bool>> {
    let ops = model.ops();
    let mut live = vec![Vec::new(); ops.len()];
    let mut need = vec![false; model.num_classes()];
    need[a] = true;
    need[b] = true;
    for (k, op) in ops.iter().enumerate().rev() {
        let in_len = match op {
            Op::Affine(o) => o.in_len,
            Op::MaxPool(p) => p.in_len,
            Op::Relu(r) => r.len,
        };
        let mut prev = vec![false; in_len];
        match op {
            Op::Affine(o) => {
                for (n, _) in o.neurons.iter().zip(&need).filter(|(_, &l)| l) {
                    for &(i, _) in &n.terms {
                        prev[i] = true;
                    }
                }
            }
            Op::MaxPool(p) => {
                for (w, _) in p.windows.iter().zip(&need).filter(|(_, &l)| l) {
                    for &i in w {
                        prev[i] = true;
                    }
                }
            }
            Op::Relu(_) => prev.copy_from_slice(&need),
        }
        live[k] = std::mem::replace(&mut need, prev);
    }
    live
}

/// Builds the program whose feasibility means "some input in the ball is
/// classified as `target`". Bounds must be sound for the query's ball.
/// Neurons that cannot influence the target or label logit are left out;
/// their entries in [`Encoding::logits`] are placeholders.
pub fn encode_query(
    model: &QuantModel,
    query: &RobustnessQuery,
    bounds: &BoundsTable,
    target: usize,
) -> Result<Encoding, VerifyError> {
    query.validate(model)?;
    if model.rounding_mode() != RoundingMode::HalfUp {
        return Err(EncodeError::UnsupportedRounding(model.rounding_mode()).into());
    }
    if target == query.label || target >= model.num_classes() {
        return Err(EncodeError::Query(format!("invalid target {target} for label {}", query.label)).into());
    }
    let mut enc = Encoder::new();
    let (inputs, mut cur) = enc.encode_input(&bounds.input);
    let live = cone_of_influence(model, target, query.label);
    for (k, (op, lb)) in model.ops().iter().zip(&bounds.layers).enumerate() {
        let live = &live[k];
        cur = match (op, lb) {
            (Op::Affine(a), LayerBounds::Affine(t)) => enc.encode_affine(a, t, &cur, live, k)?,
            (Op::MaxPool(p), LayerBounds::MaxPool(_)) => enc.encode_pool(p, &cur, live, k),
            (Op::Relu(r), LayerBounds::Relu(_)) => enc.encode_relu(r, &cur, live, k),
            _ => return Err(EncodeError::Query(format!("bounds table does not match layer {k}")).into()),
        };
    }
    enc.encode_misclassification(&cur, target, query.label);
    Ok(Encoding {
        target,
        model: enc.ilp,
        inputs,
        logits: cur,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use qnnv_ilp::{solve_ilp, SolveStatus, SolverConfig};

    fn exhaustive_feasible(model: &IlpModel) -> Vec<Vec<i64>> {
        let mut out = Vec::new();
        let n = model.num_vars();
        let mut point: Vec<i64> = (0..n).map(|i| model.vars[i].lo).collect();
        loop {
            if model.is_feasible_point(&point) {
                out.push(point.clone());
            }
            let mut i = 0;
            loop {
                if i == n {
                    return out;
                }
                if point[i] < model.vars[i].hi {
                    point[i] += 1;
                    break;
                }
                point[i] = model.vars[i].lo;
                i += 1;
            }
        }
    }

    fn grid_pair(enc: &mut Encoder, xr: IntRange, yr: IntRange) -> (Bounded, Bounded) {
        let x = enc.var("x".into(), xr);
        let y = enc.var("y".into(), yr);
        (x, y)
    }

    #[test]
    fn max_and_min_gadgets_are_exact() {
        for (xr, yr) in [
            (IntRange::new(-3, 4), IntRange::new(0, 6)),
            (IntRange::new(-10, 10), IntRange::new(-10, 10)),
            (IntRange::new(0, 1), IntRange::new(0, 5)),
        ] {
            for is_max in [true, false] {
                let mut enc = Encoder::new();
                let (x, y) = grid_pair(&mut enc, xr, yr);
                let z = if is_max { enc.encode_max(x, y, "z") } else { enc.encode_min(x, y, "z") };
                let Value::Var(zid) = z.value else { panic!("gadget collapsed") };
                let pts = exhaustive_feasible(&enc.ilp);
                let mut seen = std::collections::BTreeSet::new();
                for p in &pts {
                    let want = if is_max { p[0].max(p[1]) } else { p[0].min(p[1]) };
                    assert_eq!(p[zid.0], want);
                    seen.insert((p[0], p[1]));
                }
                assert_eq!(seen.len() as i64, (xr.width() + 1) * (yr.width() + 1));
            }
        }
    }

    #[test]
    fn strict_rhs_margin_is_positive_and_bounded() {
        for (a, eps) in [(0.5, 0.25), (-254.5, 1e-9), (0.5 - 7.0, 0.1), (100.5, 3e-14)] {
            let rhs = strict_rhs(a, eps).unwrap();
            assert!(rhs < a);
            // a − rhs is exact here (Sterbenz), so the margin check is exact.
            assert!(a - rhs <= eps && a - rhs > 0.0);
        }
        assert_eq!(strict_rhs(1e6 + 0.5, 1e-20), None);
    }

    #[test]
    fn clip_gadget_feasible_set_is_the_clip_graph() {
        let mut enc = Encoder::new();
        let v = enc.var("v".into(), IntRange::new(-20, 40));
        let out = enc.encode_clip(v, 0, 25, Phase::Unknown, "c").unwrap();
        let Value::Var(oid) = out.value else { panic!() };
        let cfg = SolverConfig::default();
        for target in [-20, -1, 0, 13, 25, 26, 40] {
            let mut m = enc.ilp.clone();
            let Value::Var(vid) = v.value else { panic!() };
            m.vars[vid.0].lo = target;
            m.vars[vid.0].hi = target;
            let r = solve_ilp(&m, &cfg).unwrap();
            assert_eq!(r.status, SolveStatus::Feasible);
            assert_eq!(r.witness.unwrap()[oid.0], target.clamp(0, 25));
        }
    }
}

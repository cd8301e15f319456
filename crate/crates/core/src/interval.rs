//! Sound bound propagation for quantized networks.
//!
//! Every neuron carries a concrete integer range plus symbolic affine lower
//! and upper bounds over the input pixels. Rounding shifts the symbolic bounds
//! by `ε − 1/2` and `+1/2`; a clip `[lo, hi]` is rewritten as
//! `lo + ReLU(v − lo)` followed by `hi − ReLU(hi − ·)` so each half gets the
//! usual triangle relaxation. Concrete ranges are computed twice, by integer
//! interval arithmetic and by concretizing the symbolic bounds, and the
//! intersection is kept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::VerifyError;
use crate::model::{AffineOp, Neuron, Op, PoolOp, QuantModel, ReluOp};
use crate::quant::{clip, Requant, RoundingMode};
use crate::query::RobustnessQuery;

/// Real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "empty interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Integer range `[lo, hi]` of one ILP variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: i64,
    pub hi: i64,
}

impl IntRange {
    pub fn new(lo: i64, hi: i64) -> Self {
        IntRange { lo, hi }
    }

    pub fn contains(&self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> i64 {
        self.hi - self.lo
    }

    fn intersect(self, other: IntRange) -> IntRange {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        // Float noise can cross bounds on degenerate ranges; keep the exact side.
        if lo > hi {
            self
        } else {
            IntRange { lo, hi }
        }
    }
}

/// Affine function `Σ coeffs[i]·x_i + constant` over the input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBound {
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl AffineBound {
    pub fn constant(n: usize, c: f64) -> Self {
        AffineBound {
            coeffs: vec![0.0; n],
            constant: c,
        }
    }

    pub fn input(n: usize, i: usize) -> Self {
        let mut coeffs = vec![0.0; n];
        coeffs[i] = 1.0;
        AffineBound {
            coeffs,
            constant: 0.0,
        }
    }

    fn scale(&self, k: f64, shift: f64) -> Self {
        AffineBound {
            coeffs: self.coeffs.iter().map(|c| c * k).collect(),
            constant: self.constant * k + shift,
        }
    }

    fn add_scaled(&mut self, other: &AffineBound, k: f64) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += k * b;
        }
        self.constant += k * other.constant;
    }

    /// Minimum and maximum over the input box.
    pub fn concretize(&self, input: &[IntRange]) -> (f64, f64) {
        let (mut lo, mut hi) = (self.constant, self.constant);
        for (c, r) in self.coeffs.iter().zip(input) {
            if *c > 0.0 {
                lo += c * r.lo as f64;
                hi += c * r.hi as f64;
            } else if *c < 0.0 {
                lo += c * r.hi as f64;
                hi += c * r.lo as f64;
            }
        }
        (lo, hi)
    }

    pub fn eval(&self, x: &[i64]) -> f64 {
        self.constant
            + self
                .coeffs
                .iter()
                .zip(x)
                .map(|(c, &v)| c * v as f64)
                .sum::<f64>()
    }
}

/// Symbolic and concrete bounds of one neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct SymNeuron {
    pub lower: AffineBound,
    pub upper: AffineBound,
    pub range: IntRange,
}

/// Symbolic state of one layer's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractState {
    pub neurons: Vec<SymNeuron>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Output is always the lower clip value (for a ReLU marker: the zero point).
    AlwaysLb,
    AlwaysUb,
    /// Clip (or ReLU) never active; output equals input.
    AlwaysLinear,
    Unknown,
}

/// Classifies a clip `[lbc, ubc]` by the range of its input.
pub fn clip_phase(input: IntRange, lbc: i64, ubc: i64) -> Phase {
    if input.hi <= lbc {
        Phase::AlwaysLb
    } else if input.lo >= ubc {
        Phase::AlwaysUb
    } else if input.lo >= lbc && input.hi <= ubc {
        Phase::AlwaysLinear
    } else {
        Phase::Unknown
    }
}

/// Ranges of every ILP variable of one affine neuron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineNeuronBounds {
    pub acc: IntRange,
    pub yhat1: IntRange,
    pub ymax: IntRange,
    pub out: IntRange,
    pub phase: Phase,
    /// Strict-inequality margin of the rounding constraint for this range.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReluBounds {
    pub out: IntRange,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerBounds {
    Affine(Vec<AffineNeuronBounds>),
    MaxPool(Vec<IntRange>),
    Relu(Vec<ReluBounds>),
}

impl LayerBounds {
    pub fn out(&self, j: usize) -> IntRange {
        match self {
            LayerBounds::Affine(v) => v[j].out,
            LayerBounds::MaxPool(v) => v[j],
            LayerBounds::Relu(v) => v[j].out,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LayerBounds::Affine(v) => v.len(),
            LayerBounds::MaxPool(v) => v.len(),
            LayerBounds::Relu(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-variable ranges for the whole network, one entry per op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsTable {
    pub input: Vec<IntRange>,
    pub layers: Vec<LayerBounds>,
}

impl BoundsTable {
    pub fn logits(&self) -> Vec<IntRange> {
        let last = self.layers.last().expect("at least one layer");
        (0..last.len()).map(|j| last.out(j)).collect()
    }

    /// Flat `name → [lo, hi]` map using the encoder's variable names.
    pub fn named(&self) -> BTreeMap<String, [i64; 2]> {
        let mut out = BTreeMap::new();
        for (i, r) in self.input.iter().enumerate() {
            out.insert(format!("x{i}"), [r.lo, r.hi]);
        }
        for (k, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerBounds::Affine(ns) => {
                    for (j, n) in ns.iter().enumerate() {
                        out.insert(format!("L{k}.n{j}.acc"), [n.acc.lo, n.acc.hi]);
                        out.insert(format!("L{k}.n{j}.yhat1"), [n.yhat1.lo, n.yhat1.hi]);
                        out.insert(format!("L{k}.n{j}.ymax"), [n.ymax.lo, n.ymax.hi]);
                        out.insert(format!("L{k}.n{j}.yq"), [n.out.lo, n.out.hi]);
                    }
                }
                LayerBounds::MaxPool(rs) => {
                    for (j, r) in rs.iter().enumerate() {
                        out.insert(format!("L{k}.n{j}.pool"), [r.lo, r.hi]);
                    }
                }
                LayerBounds::Relu(rs) => {
                    for (j, r) in rs.iter().enumerate() {
                        out.insert(format!("L{k}.n{j}.relu"), [r.out.lo, r.out.hi]);
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.named()).expect("bounds serialize")
    }
}

/// Outcome of the bound-propagation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntervalVerdict {
    Robust,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub bounds: BoundsTable,
    /// Upper bound on `o_t − o_l*` per class (`None` at `l*`).
    pub gap_upper: Vec<Option<f64>>,
    /// Targets whose misclassification is already impossible.
    pub ruled_out: Vec<bool>,
    pub verdict: IntervalVerdict,
}

/// Enumeration cap when choosing the strict rounding margin.
pub const MARGIN_ENUMERATION_CAP: u64 = 1 << 22;

/// Strict margin ε for `Round(z_y + f·acc)` over an accumulator range: the
/// largest value that keeps the `≤ 1/2 − ε` row exact on that range, capped
/// at 1/2; the dyadic grid step when the range is too wide to enumerate.
pub fn rounding_margin(requant: &Requant, acc: IntRange) -> f64 {
    requant
        .strict_margin(acc.lo, acc.hi, MARGIN_ENUMERATION_CAP)
        .unwrap_or_else(|| requant.grid())
        .min(0.5)
}

fn tol(v: f64) -> f64 {
    1e-7 * (1.0 + v.abs())
}

fn floor_out(v: f64) -> i64 {
    (v + tol(v)).floor() as i64
}

fn ceil_out(v: f64) -> i64 {
    (v - tol(v)).ceil() as i64
}

/// Integer interval arithmetic for the accumulator.
fn acc_box(op: &AffineOp, n: &Neuron, prev: &[IntRange]) -> IntRange {
    let (mut lo, mut hi) = (n.bias_acc as i128, n.bias_acc as i128);
    for &(i, w) in &n.terms {
        let a = (prev[i].lo - op.input_zero) as i128 * w as i128;
        let b = (prev[i].hi - op.input_zero) as i128 * w as i128;
        lo += a.min(b);
        hi += a.max(b);
    }
    let clamp = |v: i128| v.clamp(i64::MIN as i128 / 4, i64::MAX as i128 / 4) as i64;
    IntRange::new(clamp(lo), clamp(hi))
}

/// Ranges of round and clip variables given the accumulator range.
pub fn neuron_ranges(op: &AffineOp, n: &Neuron, acc: IntRange, mode: RoundingMode) -> AffineNeuronBounds {
    let yhat1 = IntRange::new(
        n.requant.round(op.output_zero, acc.lo, mode),
        n.requant.round(op.output_zero, acc.hi, mode),
    );
    let ymax = IntRange::new(yhat1.lo.max(op.clip_lo), yhat1.hi.max(op.clip_lo));
    let out = IntRange::new(
        clip(yhat1.lo, op.clip_lo, op.clip_hi),
        clip(yhat1.hi, op.clip_lo, op.clip_hi),
    );
    AffineNeuronBounds {
        acc,
        yhat1,
        ymax,
        out,
        phase: clip_phase(yhat1, op.clip_lo, op.clip_hi),
        epsilon: rounding_margin(&n.requant, acc),
    }
}

/// Triangle relaxation of `ReLU(v)` for symbolic bounds of `v` with range
/// `[l, u]`. Returns (lower, upper).
fn relu_relax(lower: &AffineBound, upper: &AffineBound, l: f64, u: f64) -> (AffineBound, AffineBound) {
    let n = lower.coeffs.len();
    if l >= 0.0 {
        (lower.clone(), upper.clone())
    } else if u <= 0.0 {
        (AffineBound::constant(n, 0.0), AffineBound::constant(n, 0.0))
    } else {
        let slope = u / (u - l);
        let up = upper.scale(slope, -slope * l);
        let low = if u >= -l {
            lower.clone()
        } else {
            AffineBound::constant(n, 0.0)
        };
        (low, up)
    }
}

/// Affine transformer: symbolic accumulator bounds plus its integer range.
pub fn propagate_affine(
    state: &AbstractState,
    op: &AffineOp,
    input: &[IntRange],
) -> (Vec<(AffineBound, AffineBound)>, Vec<IntRange>) {
    let n_in = input.len();
    let prev_ranges: Vec<IntRange> = state.neurons.iter().map(|s| s.range).collect();
    let mut sym = Vec::with_capacity(op.neurons.len());
    let mut ranges = Vec::with_capacity(op.neurons.len());
    for n in &op.neurons {
        let mut lower = AffineBound::constant(n_in, n.bias_acc as f64);
        let mut upper = AffineBound::constant(n_in, n.bias_acc as f64);
        for &(i, w) in &n.terms {
            let w = w as f64;
            let s = &state.neurons[i];
            if w > 0.0 {
                lower.add_scaled(&s.lower, w);
                upper.add_scaled(&s.upper, w);
            } else {
                lower.add_scaled(&s.upper, w);
                upper.add_scaled(&s.lower, w);
            }
            lower.constant -= w * op.input_zero as f64;
            upper.constant -= w * op.input_zero as f64;
        }
        let (slo, _) = lower.concretize(input);
        let (_, shi) = upper.concretize(input);
        let boxed = acc_box(op, n, &prev_ranges);
        let range = boxed.intersect(IntRange::new(ceil_out(slo), floor_out(shi)));
        sym.push((lower, upper));
        ranges.push(range);
    }
    (sym, ranges)
}

/// Rounding transformer on real bounds `[lo, hi]` of the pre-round value.
pub fn propagate_round(pre: Interval, epsilon: f64) -> Interval {
    Interval::new(pre.lo + epsilon - 0.5, pre.hi + 0.5)
}

/// Clip transformer on symbolic bounds, as two stacked ReLUs. Returns the
/// output bounds and the input's phase.
pub fn propagate_clip(
    lower: &AffineBound,
    upper: &AffineBound,
    input: IntRange,
    lbc: i64,
    ubc: i64,
    pixels: &[IntRange],
) -> Result<(SymNeuron, Phase), VerifyError> {
    if lbc > ubc {
        return Err(crate::error::EncodeError::ClipOrder { lo: lbc, hi: ubc }.into());
    }
    let (l, u) = (input.lo as f64, input.hi as f64);
    let (lbf, ubf) = (lbc as f64, ubc as f64);
    // ymax = lbc + ReLU(v − lbc)
    let (rl, ru) = relu_relax(&lower.scale(1.0, -lbf), &upper.scale(1.0, -lbf), l - lbf, u - lbf);
    let max_lower = rl.scale(1.0, lbf);
    let max_upper = ru.scale(1.0, lbf);
    let max_range = IntRange::new(input.lo.max(lbc), input.hi.max(lbc));
    // y2 = ubc − ReLU(ubc − ymax)
    let (ml, mu) = (max_range.lo as f64, max_range.hi as f64);
    let (tl, tu) = relu_relax(
        &max_upper.scale(-1.0, ubf),
        &max_lower.scale(-1.0, ubf),
        ubf - mu,
        ubf - ml,
    );
    let out_lower = tu.scale(-1.0, ubf);
    let out_upper = tl.scale(-1.0, ubf);
    let exact = IntRange::new(clip(input.lo, lbc, ubc), clip(input.hi, lbc, ubc));
    let (slo, _) = out_lower.concretize(pixels);
    let (_, shi) = out_upper.concretize(pixels);
    let range = exact.intersect(IntRange::new(ceil_out(slo), floor_out(shi)));
    Ok((
        SymNeuron {
            lower: out_lower,
            upper: out_upper,
            range,
        },
        clip_phase(input, lbc, ubc),
    ))
}

/// Max-pool transformer. Windows with a dominating element inherit its
/// symbolic bounds; otherwise the upper bound is the constant window maximum.
pub fn propagate_maxpool(state: &AbstractState, op: &PoolOp) -> AbstractState {
    let n_in = state.neurons.first().map_or(0, |s| s.lower.coeffs.len());
    let neurons = op
        .windows
        .iter()
        .map(|w| {
            let best_lo = w
                .iter()
                .copied()
                .max_by_key(|&i| state.neurons[i].range.lo)
                .expect("non-empty window");
            let lo = state.neurons[best_lo].range.lo;
            let hi = w.iter().map(|&i| state.neurons[i].range.hi).max().expect("non-empty");
            let dominated = w
                .iter()
                .all(|&i| i == best_lo || state.neurons[i].range.hi <= lo);
            let s = &state.neurons[best_lo];
            SymNeuron {
                lower: s.lower.clone(),
                upper: if dominated {
                    s.upper.clone()
                } else {
                    AffineBound::constant(n_in, hi as f64)
                },
                range: IntRange::new(lo, hi),
            }
        })
        .collect();
    AbstractState { neurons }
}

fn propagate_relu(
    state: &AbstractState,
    op: &ReluOp,
    pixels: &[IntRange],
) -> (AbstractState, Vec<ReluBounds>) {
    let z = op.zero_point;
    let zf = z as f64;
    let mut out = Vec::with_capacity(state.neurons.len());
    let mut bounds = Vec::with_capacity(state.neurons.len());
    for s in &state.neurons {
        let (rl, ru) = relu_relax(
            &s.lower.scale(1.0, -zf),
            &s.upper.scale(1.0, -zf),
            (s.range.lo - z) as f64,
            (s.range.hi - z) as f64,
        );
        let lower = rl.scale(1.0, zf);
        let upper = ru.scale(1.0, zf);
        let exact = IntRange::new(s.range.lo.max(z), s.range.hi.max(z));
        let (slo, _) = lower.concretize(pixels);
        let (_, shi) = upper.concretize(pixels);
        let range = exact.intersect(IntRange::new(ceil_out(slo), floor_out(shi)));
        let phase = if s.range.hi <= z {
            Phase::AlwaysLb
        } else if s.range.lo >= z {
            Phase::AlwaysLinear
        } else {
            Phase::Unknown
        };
        bounds.push(ReluBounds { out: range, phase });
        out.push(SymNeuron { lower, upper, range });
    }
    (AbstractState { neurons: out }, bounds)
}

/// Full symbolic propagation over the query's input box.
pub fn propagate(model: &QuantModel, input: &[IntRange]) -> Result<(BoundsTable, AbstractState), VerifyError> {
    let n = input.len();
    let mode = model.rounding_mode();
    let mut state = AbstractState {
        neurons: input
            .iter()
            .enumerate()
            .map(|(i, &r)| SymNeuron {
                lower: AffineBound::input(n, i),
                upper: AffineBound::input(n, i),
                range: r,
            })
            .collect(),
    };
    let mut layers = Vec::with_capacity(model.ops().len());
    for op in model.ops() {
        match op {
            Op::Affine(a) => {
                let (sym, acc_ranges) = propagate_affine(&state, a, input);
                let mut neurons = Vec::with_capacity(a.neurons.len());
                let mut table = Vec::with_capacity(a.neurons.len());
                for ((neuron, (acc_lo, acc_hi)), acc) in a.neurons.iter().zip(sym).zip(acc_ranges) {
                    let mut nb = neuron_ranges(a, neuron, acc, mode);
                    let f = neuron.requant.factor;
                    let z = a.output_zero as f64;
                    let y1_lower = acc_lo.scale(f, z + nb.epsilon - 0.5);
                    let y1_upper = acc_hi.scale(f, z + 0.5);
                    let (sym_out, phase) =
                        propagate_clip(&y1_lower, &y1_upper, nb.yhat1, a.clip_lo, a.clip_hi, input)?;
                    nb.out = sym_out.range;
                    nb.phase = phase;
                    table.push(nb);
                    neurons.push(sym_out);
                }
                layers.push(LayerBounds::Affine(table));
                state = AbstractState { neurons };
            }
            Op::MaxPool(p) => {
                state = propagate_maxpool(&state, p);
                layers.push(LayerBounds::MaxPool(state.neurons.iter().map(|s| s.range).collect()));
            }
            Op::Relu(r) => {
                let (next, bounds) = propagate_relu(&state, r, input);
                state = next;
                layers.push(LayerBounds::Relu(bounds));
            }
        }
    }
    Ok((
        BoundsTable {
            input: input.to_vec(),
            layers,
        },
        state,
    ))
}

/// Threshold `c` such that the target `t` misclassifies iff `o_t − o_l ≥ c`
/// (ties go to the smaller index).
pub fn misclass_threshold(target: usize, label: usize) -> i64 {
    if target > label {
        1
    } else {
        0
    }
}

/// Bound propagation stage: ranges for every encoder variable plus a
/// ROBUST verdict when every target is ruled out.
pub fn analyze(model: &QuantModel, query: &RobustnessQuery) -> Result<Analysis, VerifyError> {
    query.validate(model)?;
    let input = query.input_box(model).into_iter().map(|(lo, hi)| IntRange::new(lo, hi)).collect::<Vec<_>>();
    let (bounds, out) = propagate(model, &input)?;
    let l = query.label;
    let m = out.neurons.len();
    let mut gap_upper = vec![None; m];
    let mut ruled_out = vec![false; m];
    for t in 0..m {
        if t == l {
            continue;
        }
        let mut diff = out.neurons[t].upper.clone();
        diff.add_scaled(&out.neurons[l].lower, -1.0);
        let (_, sym_hi) = diff.concretize(&input);
        let box_hi = (out.neurons[t].range.hi - out.neurons[l].range.lo) as f64;
        let hi = sym_hi.min(box_hi);
        gap_upper[t] = Some(hi);
        ruled_out[t] = floor_out(hi) < misclass_threshold(t, l);
    }
    let robust = (0..m).all(|t| t == l || ruled_out[t]);
    Ok(Analysis {
        bounds,
        gap_upper,
        ruled_out,
        verdict: if robust {
            IntervalVerdict::Robust
        } else {
            IntervalVerdict::Inconclusive
        },
    })
}

/// Bounds from plain interval arithmetic with each layer's input taken at its
/// full dtype range (the first layer uses the query box). No phase is fixed.
pub fn structural_bounds(model: &QuantModel, query: &RobustnessQuery) -> BoundsTable {
    let input: Vec<IntRange> = query
        .input_box(model)
        .into_iter()
        .map(|(lo, hi)| IntRange::new(lo, hi))
        .collect();
    let mode = model.rounding_mode();
    let mut prev: Vec<IntRange> = input.clone();
    let mut layers = Vec::with_capacity(model.ops().len());
    for op in model.ops() {
        match op {
            Op::Affine(a) => {
                let table: Vec<AffineNeuronBounds> = a
                    .neurons
                    .iter()
                    .map(|n| {
                        let mut nb = neuron_ranges(a, n, acc_box(a, n, &prev), mode);
                        nb.phase = Phase::Unknown;
                        nb
                    })
                    .collect();
                prev = vec![IntRange::new(a.clip_lo, a.clip_hi); a.neurons.len()];
                layers.push(LayerBounds::Affine(table));
            }
            Op::MaxPool(p) => {
                let lo = prev.iter().map(|r| r.lo).min().unwrap_or(0);
                let hi = prev.iter().map(|r| r.hi).max().unwrap_or(0);
                prev = vec![IntRange::new(lo, hi); p.windows.len()];
                layers.push(LayerBounds::MaxPool(prev.clone()));
            }
            Op::Relu(r) => {
                prev = prev
                    .iter()
                    .map(|x| IntRange::new(x.lo.max(r.zero_point), x.hi.max(r.zero_point)))
                    .collect();
                layers.push(LayerBounds::Relu(
                    prev.iter()
                        .map(|&out| ReluBounds {
                            out,
                            phase: Phase::Unknown,
                        })
                        .collect(),
                ));
            }
        }
    }
    BoundsTable { input, layers }
}

//! Staged verification: attack, bound propagation, exact ILP.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use qnnv_ilp::{solve_ilp, write_lp, SolveStatus, SolverConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackConfig};
use crate::encode::encode_query;
use crate::error::VerifyError;
use crate::infer::predict;
use crate::interval::{analyze, misclass_threshold, structural_bounds, BoundsTable, IntervalVerdict};
use crate::model::QuantModel;
use crate::query::{validate_counterexample, RobustnessQuery};

/// Which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// ILP only, big-M constants from plain interval arithmetic.
    #[serde(rename = "ilp")]
    Ilp,
    /// ILP with constants and phases from bound propagation.
    #[serde(rename = "ilp+in")]
    IlpIn,
    /// Attack, then bound propagation, then ILP.
    #[serde(rename = "eqv")]
    Eqv,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ilp, Mode::IlpIn, Mode::Eqv];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ilp => "ilp",
            Mode::IlpIn => "ilp+in",
            Mode::Eqv => "eqv",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ilp" => Ok(Mode::Ilp),
            "ilp+in" => Ok(Mode::IlpIn),
            "eqv" => Ok(Mode::Eqv),
            other => Err(format!("unknown mode '{other}' (expected ilp, ilp+in or eqv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Robust,
    Unsafe,
    Unknown,
    /// The center itself is not classified as the label.
    Misclassified,
}

impl Status {
    pub fn is_decided(self) -> bool {
        matches!(self, Status::Robust | Status::Unsafe)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Robust => "ROBUST",
            Status::Unsafe => "UNSAFE",
            Status::Unknown => "UNKNOWN",
            Status::Misclassified => "MISCLASSIFIED",
        })
    }
}

/// Stage that produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Inference,
    Attack,
    Interval,
    Ilp,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Inference => "inference",
            Stage::Attack => "attack",
            Stage::Interval => "interval",
            Stage::Ilp => "ilp",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub attack_s: f64,
    pub interval_s: f64,
    pub ilp_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IlpCounters {
    /// Programs solved (one per target class not ruled out earlier).
    pub programs: u64,
    pub nodes: u64,
    pub lp_iterations: u64,
    /// Largest program solved.
    pub max_vars: u64,
    pub max_binaries: u64,
    pub max_constraints: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub stage: Option<Stage>,
    #[serde(rename = "witness", skip_serializing_if = "Option::is_none", default)]
    pub counterexample: Option<Vec<i64>>,
    /// Class the counterexample is assigned to.
    #[serde(rename = "witness_label", skip_serializing_if = "Option::is_none", default)]
    pub counterexample_label: Option<usize>,
    pub times: StageTimes,
    pub ilp: IlpCounters,
    #[serde(rename = "time_s")]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub mode: Mode,
    pub attack: AttackConfig,
    /// Fraction of the query timeout the attack may use. Bound propagation
    /// runs to completion (it is cheap); the ILP gets whatever remains.
    pub attack_share: f64,
    /// When set, every program is also written to `<prefix>_t<target>.lp`.
    pub emit_lp: Option<PathBuf>,
    pub bound_propagation: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            mode: Mode::Eqv,
            attack: AttackConfig::default(),
            attack_share: 0.05,
            emit_lp: None,
            bound_propagation: true,
        }
    }
}

impl VerifyConfig {
    pub fn with_mode(mode: Mode) -> Self {
        VerifyConfig {
            mode,
            ..Default::default()
        }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Target classes in the order the ILP stage tries them: largest possible
/// `o_t − o_l` first, ruled-out classes dropped.
fn target_order(bounds: &BoundsTable, gaps: Option<&[Option<f64>]>, ruled_out: Option<&[bool]>, label: usize) -> Vec<usize> {
    let logits = bounds.logits();
    let mut ts: Vec<(usize, f64)> = (0..logits.len())
        .filter(|&t| t != label && !ruled_out.is_some_and(|r| r[t]))
        .map(|t| {
            let g = gaps
                .and_then(|g| g[t])
                .unwrap_or((logits[t].hi - logits[label].lo) as f64);
            (t, g)
        })
        .filter(|&(t, g)| g + 1e-6 >= misclass_threshold(t, label) as f64)
        .collect();
    ts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ts.into_iter().map(|(t, _)| t).collect()
}

/// Decides one query. `UNKNOWN` means the budget ran out; it is never a
/// claim either way.
pub fn verify(model: &QuantModel, query: &RobustnessQuery, cfg: &VerifyConfig) -> Result<Verdict, VerifyError> {
    query.validate(model)?;
    let start = Instant::now();
    let deadline = start + query.timeout;
    let mut v = Verdict {
        status: Status::Unknown,
        stage: None,
        counterexample: None,
        counterexample_label: None,
        times: StageTimes::default(),
        ilp: IlpCounters::default(),
        wall_time_s: 0.0,
    };
    let finish = |mut v: Verdict, status: Status, stage: Option<Stage>| {
        v.status = status;
        v.stage = stage;
        v.wall_time_s = secs(start.elapsed());
        Ok(v)
    };

    if predict(model, &query.center.data)? != query.label {
        return finish(v, Status::Misclassified, Some(Stage::Inference));
    }

    if cfg.mode == Mode::Eqv {
        let t0 = Instant::now();
        let budget = query.timeout.mul_f64(cfg.attack_share);
        let found = pgd_attack(model, query, &cfg.attack, Some(t0 + budget))?;
        v.times.attack_s = secs(t0.elapsed());
        if let Some(x) = found {
            v.counterexample_label = Some(predict(model, &x)?);
            v.counterexample = Some(x);
            return finish(v, Status::Unsafe, Some(Stage::Attack));
        }
    }

    let t0 = Instant::now();
    let (bounds, gaps, ruled_out) = match cfg.mode {
        Mode::Ilp => (structural_bounds(model, query), None, None),
        Mode::IlpIn | Mode::Eqv => {
            let a = analyze(model, query)?;
            v.times.interval_s = secs(t0.elapsed());
            if a.verdict == IntervalVerdict::Robust {
                return finish(v, Status::Robust, Some(Stage::Interval));
            }
            (a.bounds, Some(a.gap_upper), Some(a.ruled_out))
        }
    };

    let t0 = Instant::now();
    let targets = target_order(&bounds, gaps.as_deref(), ruled_out.as_deref(), query.label);
    for t in targets {
        if Instant::now() >= deadline {
            v.times.ilp_s = secs(t0.elapsed());
            return finish(v, Status::Unknown, None);
        }
        let enc = encode_query(model, query, &bounds, t)?;
        if let Some(prefix) = &cfg.emit_lp {
            let path = PathBuf::from(format!("{}_t{t}.lp", prefix.display()));
            std::fs::write(&path, write_lp(&enc.model))
                .map_err(|e| VerifyError::Query(format!("cannot write {}: {e}", path.display())))?;
        }
        let solver = SolverConfig {
            deadline: Some(deadline),
            bound_propagation: cfg.bound_propagation,
            ..Default::default()
        };
        let r = solve_ilp(&enc.model, &solver)?;
        v.ilp.programs += 1;
        v.ilp.nodes += r.stats.nodes;
        v.ilp.lp_iterations += r.stats.lp_iterations;
        v.ilp.max_vars = v.ilp.max_vars.max(enc.model.num_vars() as u64);
        v.ilp.max_binaries = v.ilp.max_binaries.max(enc.model.num_binaries() as u64);
        v.ilp.max_constraints = v.ilp.max_constraints.max(enc.model.constraints.len() as u64);
        match r.status {
            SolveStatus::Infeasible => continue,
            SolveStatus::Timeout => {
                v.times.ilp_s = secs(t0.elapsed());
                return finish(v, Status::Unknown, None);
            }
            SolveStatus::Feasible => {
                let point = r.witness.expect("feasible result carries a point");
                let x = enc.witness(&point);
                v.times.ilp_s = secs(t0.elapsed());
                if !validate_counterexample(model, query, &x) {
                    return Err(VerifyError::Query(format!(
                        "solver point for target {t} does not reproduce under integer inference: {x:?}"
                    )));
                }
                v.counterexample_label = Some(predict(model, &x)?);
                v.counterexample = Some(x);
                return finish(v, Status::Unsafe, Some(Stage::Ilp));
            }
        }
    }
    v.times.ilp_s = secs(t0.elapsed());
    finish(v, Status::Robust, Some(Stage::Ilp))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub inference: usize,
    pub attack: usize,
    pub interval: usize,
    pub ilp: usize,
}

/// Aggregate of a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub total: usize,
    pub robust: usize,
    #[serde(rename = "unsafe")]
    pub unsafe_: usize,
    pub unknown: usize,
    pub misclassified: usize,
    pub rob_pct: f64,
    pub uns_pct: f64,
    pub unk_pct: f64,
    pub mis_pct: f64,
    /// Decided instances (including misclassified centers) by deciding stage.
    pub by_stage: StageCounts,
    /// Sum of per-instance wall times.
    pub total_time_s: f64,
    /// Wall time of the whole batch.
    pub elapsed_s: f64,
    pub instances: Vec<Verdict>,
}

impl Report {
    pub fn from_verdicts(mode: Mode, instances: Vec<Verdict>, elapsed: Duration) -> Self {
        let count = |s: Status| instances.iter().filter(|v| v.status == s).count();
        let total = instances.len();
        let pct = |n: usize| if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
        let mut by_stage = StageCounts::default();
        for v in &instances {
            match v.stage {
                Some(Stage::Inference) => by_stage.inference += 1,
                Some(Stage::Attack) => by_stage.attack += 1,
                Some(Stage::Interval) => by_stage.interval += 1,
                Some(Stage::Ilp) => by_stage.ilp += 1,
                None => {}
            }
        }
        let (robust, unsafe_, unknown, misclassified) = (
            count(Status::Robust),
            count(Status::Unsafe),
            count(Status::Unknown),
            count(Status::Misclassified),
        );
        Report {
            mode,
            total,
            robust,
            unsafe_,
            unknown,
            misclassified,
            rob_pct: pct(robust),
            uns_pct: pct(unsafe_),
            unk_pct: pct(unknown),
            mis_pct: pct(misclassified),
            by_stage,
            total_time_s: instances.iter().map(|v| v.wall_time_s).sum(),
            elapsed_s: secs(elapsed),
            instances,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Verifies every query on a pool of `jobs` threads. With an LP prefix set,
/// query `i` writes to `<prefix>_q<i>_t<target>.lp`.
pub fn verify_batch(
    model: &QuantModel,
    queries: &[RobustnessQuery],
    cfg: &VerifyConfig,
    jobs: usize,
) -> Result<Report, VerifyError> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| VerifyError::Query(format!("cannot start worker pool: {e}")))?;
    let verdicts = pool.install(|| {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut c = cfg.clone();
                c.emit_lp = cfg
                    .emit_lp
                    .as_ref()
                    .map(|p| PathBuf::from(format!("{}_q{i}", p.display())));
                verify(model, q, &c)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(Report::from_verdicts(cfg.mode, verdicts, start.elapsed()))
}

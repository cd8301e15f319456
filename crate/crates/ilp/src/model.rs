//! Pure-integer linear feasibility models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::IlpError;

/// Index of a variable inside its [`IlpModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Integer,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Var {
    pub name: String,
    pub kind: VarKind,
    pub lo: i64,
    pub hi: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    Le,
    Eq,
    Ge,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Le => "<=",
            Comparator::Eq => "=",
            Comparator::Ge => ">=",
        }
    }
}

/// `Σ coef·var  cmp  rhs`. Duplicate variables in `terms` are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinConstraint {
    pub name: Option<String>,
    pub terms: Vec<(VarId, f64)>,
    pub cmp: Comparator,
    pub rhs: f64,
}

impl LinConstraint {
    pub fn new(terms: Vec<(VarId, f64)>, cmp: Comparator, rhs: f64) -> Self {
        LinConstraint {
            name: None,
            terms,
            cmp,
            rhs,
        }
    }

    pub fn le(terms: Vec<(VarId, f64)>, rhs: f64) -> Self {
        Self::new(terms, Comparator::Le, rhs)
    }

    pub fn ge(terms: Vec<(VarId, f64)>, rhs: f64) -> Self {
        Self::new(terms, Comparator::Ge, rhs)
    }

    pub fn eq(terms: Vec<(VarId, f64)>, rhs: f64) -> Self {
        Self::new(terms, Comparator::Eq, rhs)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Evaluates the left-hand side in floating point.
    pub fn activity(&self, point: &[i64]) -> f64 {
        self.terms
            .iter()
            .map(|&(v, c)| c * point[v.0] as f64)
            .sum()
    }
}

/// A conjunctive feasibility problem over bounded integer variables. There is
/// no objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IlpModel {
    pub vars: Vec<Var>,
    pub constraints: Vec<LinConstraint>,
}

impl IlpModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, lo: i64, hi: i64) -> VarId {
        let (lo, hi) = match kind {
            VarKind::Binary => (lo.max(0), hi.min(1)),
            VarKind::Integer => (lo, hi),
        };
        self.vars.push(Var {
            name: name.into(),
            kind,
            lo,
            hi,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn add_integer(&mut self, name: impl Into<String>, lo: i64, hi: i64) -> VarId {
        self.add_var(name, VarKind::Integer, lo, hi)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> VarId {
        self.add_var(name, VarKind::Binary, 0, 1)
    }

    pub fn add_constraint(&mut self, c: LinConstraint) {
        self.constraints.push(c);
    }

    pub fn var(&self, id: VarId) -> &Var {
        &self.vars[id.0]
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_binaries(&self) -> usize {
        self.vars
            .iter()
            .filter(|v| v.kind == VarKind::Binary)
            .count()
    }

    /// Checks the structural invariants: every referenced variable exists,
    /// bounds are ordered, coefficients are finite.
    pub fn validate(&self) -> Result<(), IlpError> {
        for (i, v) in self.vars.iter().enumerate() {
            if v.lo > v.hi {
                return Err(IlpError::EmptyDomain {
                    var: v.name.clone(),
                    lo: v.lo,
                    hi: v.hi,
                });
            }
            if v.kind == VarKind::Binary && (v.lo < 0 || v.hi > 1) {
                return Err(IlpError::Invalid(format!(
                    "binary variable {} (#{i}) has bounds [{}, {}]",
                    v.name, v.lo, v.hi
                )));
            }
        }
        for (ci, c) in self.constraints.iter().enumerate() {
            if !c.rhs.is_finite() {
                return Err(IlpError::Invalid(format!("constraint #{ci} has non-finite rhs")));
            }
            for &(v, coef) in &c.terms {
                if v.0 >= self.vars.len() {
                    return Err(IlpError::UnknownVar(v.0));
                }
                if !coef.is_finite() {
                    return Err(IlpError::Invalid(format!(
                        "constraint #{ci} has non-finite coefficient on {}",
                        self.vars[v.0].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact feasibility check of an integer point; see [`crate::exact`].
    pub fn is_feasible_point(&self, point: &[i64]) -> bool {
        crate::exact::check_point(self, point).is_ok()
    }
}

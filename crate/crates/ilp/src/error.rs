use thiserror::Error;

#[derive(Debug, Error)]
pub enum IlpError {
    #[error("variable {var} has empty domain [{lo}, {hi}]")]
    EmptyDomain { var: String, lo: i64, hi: i64 },
    #[error("constraint references undeclared variable #{0}")]
    UnknownVar(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("LP parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numerical trouble in simplex: {0}")]
    Numerical(String),
}

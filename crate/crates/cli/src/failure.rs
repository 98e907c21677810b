use std::fmt;
use std::path::PathBuf;

/// Failures with a dedicated exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Missing { path: PathBuf, producer: &'static str },
    Numerical(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Missing { path, producer } => write!(
                f,
                "missing dependency {}: run `archdistill {producer}` first",
                path.display()
            ),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => EXIT_VALIDATION,
                Failure::Missing { .. } => EXIT_MISSING,
                Failure::Numerical(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<archdistill::Error>() {
            return match e {
                archdistill::Error::Diverged { .. } => EXIT_NUMERICAL,
                archdistill::Error::Io(_) => EXIT_OTHER,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<archdistill::Violation>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_OTHER
}

//! Errors, exit codes and the text/JSON/CSV writers shared by subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments.
    Usage(String),
    /// Input that does not parse or validate.
    Invalid(String),
    /// Valid input the solver or engine could not satisfy.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Failed(_) => EXIT_FAILED,
        }
    }

    pub fn to_json_line(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Invalid(m) => ("invalid_input", m),
            CliError::Failed(m) => ("failed", m),
        };
        json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

pub fn invalid(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(format!("{}: {e}", path.display()))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| invalid(path, e))
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Comma-separated floats, e.g. `0.1,-1.57,0`.
#[derive(Debug, Clone)]
pub struct Floats(pub Vec<f64>);

pub fn floats(text: &str) -> Result<Floats, String> {
    parse_floats(text).map(Floats)
}

fn parse_floats(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|s| {
            let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("`{s}` is not finite"))
            }
        })
        .collect()
}

pub fn triple(text: &str) -> Result<[f64; 3], String> {
    let v = parse_floats(text)?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 values, got {}", v.len()))
}

/// Where a report goes: pretty text for people, one JSON document for tools.
pub struct Out {
    pub json: bool,
    pub csv: Option<PathBuf>,
}

impl Out {
    pub fn emit(&self, value: &Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            print!("{}", text());
        }
    }

    /// Rows of `t` followed by one column per header entry.
    pub fn csv(&self, header: &[String], rows: impl IntoIterator<Item = (f64, Vec<f64>)>) -> Result<(), CliError> {
        let Some(path) = &self.csv else { return Ok(()) };
        let mut text = String::from("t");
        for h in header {
            text.push(',');
            text.push_str(h);
        }
        text.push('\n');
        for (t, row) in rows {
            let _ = write!(text, "{t}");
            for v in row {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
        write(path, &text)
    }
}

pub fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

//! Artifact writing, output-directory resolution and exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use moe_peft::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "MOE_PEFT_OUT";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Contract(_) | Error::Format(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Verification(_) => EXIT_VERIFICATION,
        _ => EXIT_FAILURE,
    }
}

/// `--out` names the directory itself. Otherwise the directory is
/// `<root>/<verb>-<seed>`, with the root taken from `MOE_PEFT_OUT`, then
/// `config_root`, then `runs`.
pub fn resolve_out(flag: Option<&Path>, config_root: Option<&Path>, verb: &str, seed: u64) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| config_root.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{verb}-{seed}"))
}

/// Six significant digits, '.' decimal, shortest form of the rounded value.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

/// Writes `header` and `rows` as CSV.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    write_file(path, csv_string(header, rows)?)
}

pub fn csv_string(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn strings<const N: usize>(cols: [&str; N]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

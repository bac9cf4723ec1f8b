//! Run directory bookkeeping: lock file, checkpoints, reports.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use msf_core::eval::EvalRow;

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = "lock";
pub const ECHO_FILE: &str = "config.echo";
pub const EVAL_FILE: &str = "eval.csv";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

/// Exclusive use of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    /// Creates `dir` if needed and takes its lock.
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::runtime(format!(
                "run directory {} is in use (remove {} if no other msf process is running)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `(step, path)` of every `ckpt_<step>.msf` in `dir`, by step.
pub fn checkpoints(dir: &Path) -> CliResult<Vec<(u64, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name();
        let step = name
            .to_str()
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|n| n.strip_suffix(".msf"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn latest_checkpoint(dir: &Path) -> CliResult<PathBuf> {
    checkpoints(dir)?
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| CliError::usage(format!("no checkpoint in {}", dir.display())))
}

pub fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn row_key(line: &str) -> Option<(String, String, String)> {
    let mut f = line.split(',');
    Some((f.next()?.into(), f.next()?.into(), f.next()?.into()))
}

/// Rewrites `eval.csv`: rows for the same (metric, split, k) are replaced,
/// everything else is kept in place.
pub fn merge_eval_rows(dir: &Path, rows: &[EvalRow]) -> CliResult<PathBuf> {
    let path = dir.join(EVAL_FILE);
    let fresh: Vec<String> = rows.iter().map(|r| r.csv_row()).collect();
    let keys: Vec<_> = fresh.iter().filter_map(|l| row_key(l)).collect();
    let mut lines = vec![EvalRow::CSV_HEADER.to_string()];
    if path.exists() {
        let old = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        lines.extend(
            old.lines()
                .skip(1)
                .filter(|l| row_key(l).is_some_and(|k| !keys.contains(&k)))
                .map(String::from),
        );
    }
    lines.extend(fresh);
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&path, &text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(d.path()).unwrap();
        assert!(RunLock::acquire(d.path()).is_err());
        drop(a);
        assert!(RunLock::acquire(d.path()).is_ok());
    }

    #[test]
    fn latest_checkpoint_is_numeric() {
        let d = tempfile::tempdir().unwrap();
        for s in [9, 10, 100] {
            fs::write(d.path().join(format!("ckpt_{s}.msf")), b"").unwrap();
        }
        fs::write(d.path().join("ckpt_x.msf"), b"").unwrap();
        assert!(latest_checkpoint(d.path()).unwrap().ends_with("ckpt_100.msf"));
    }

    #[test]
    fn eval_rows_merge_by_key() {
        let d = tempfile::tempdir().unwrap();
        merge_eval_rows(d.path(), &[EvalRow::new("nn1", "test", Some(1), 1.0), EvalRow::new("purity", "train", Some(5), 2.0)])
            .unwrap();
        merge_eval_rows(d.path(), &[EvalRow::new("nn1", "test", Some(1), 3.0)]).unwrap();
        let text = fs::read_to_string(d.path().join(EVAL_FILE)).unwrap();
        assert_eq!(text, "metric,split,k,value\npurity,train,5,2\nnn1,test,1,3\n");
    }
}

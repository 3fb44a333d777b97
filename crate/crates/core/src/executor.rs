//! Client side of the execution shim protocol.
//!
//! The shim is an external process: it reads one JSON request line on stdin,
//! runs the cells in a fresh interpreter rooted at `workdir`, writes one JSON
//! response line on stdout and exits 0 iff the response has `ok: true`.
//! Stray lines before the response are ignored.
//! Per-cell timeouts are enforced by the shim; this side only guards against
//! a shim that hangs past the sum of its cell budgets.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

/// Environment variable naming the shim command.
pub const SHIM_ENV: &str = "NBHARNESS_SHIM";

/// Error messages longer than this are truncated by the shim.
pub const MAX_ERROR_MESSAGE_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecCell {
    pub id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub workdir: PathBuf,
    pub cells: Vec<ExecCell>,
    pub timeout_per_cell_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Exception,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub id: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResponse {
    #[serde(default)]
    pub results: Vec<CellResult>,
    pub ok: bool,
}

impl ExecResponse {
    /// Checks the response against the request it answers: results must be a
    /// prefix of the requested cells in order, and only the last may fail.
    pub fn validate(&self, req: &ExecRequest) -> Result<(), ExecutorError> {
        if !self.ok {
            return Err(ExecutorError::Protocol(
                "shim rejected the request (ok=false)".into(),
            ));
        }
        if self.results.len() > req.cells.len() {
            return Err(ExecutorError::Protocol(format!(
                "{} results for {} cells",
                self.results.len(),
                req.cells.len()
            )));
        }
        for (i, (res, cell)) in self.results.iter().zip(&req.cells).enumerate() {
            if res.id != cell.id {
                return Err(ExecutorError::Protocol(format!(
                    "result {i} has id {:?}, expected {:?}",
                    res.id, cell.id
                )));
            }
            if res.status != CellStatus::Ok && i + 1 != self.results.len() {
                return Err(ExecutorError::Protocol(format!(
                    "execution continued after failing cell {:?}",
                    res.id
                )));
            }
        }
        Ok(())
    }

    /// True when every requested cell up to the stop point ran with status ok.
    pub fn all_ok(&self, req: &ExecRequest) -> bool {
        let expected = match &req.stop_after_id {
            Some(stop) => req
                .cells
                .iter()
                .position(|c| &c.id == stop)
                .map_or(req.cells.len(), |i| i + 1),
            None => req.cells.len(),
        };
        self.results.len() == expected && self.results.iter().all(|r| r.status == CellStatus::Ok)
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("failed to start shim `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("shim crashed: {0}")]
    Crash(String),
    #[error("shim protocol violation: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Runs a batch of cells in one fresh session.
pub trait Executor: Send + Sync {
    fn run(&self, req: &ExecRequest) -> Result<ExecResponse, ExecutorError>;
}

impl<E: Executor + ?Sized> Executor for &E {
    fn run(&self, req: &ExecRequest) -> Result<ExecResponse, ExecutorError> {
        (**self).run(req)
    }
}

/// Spawns the shim once per request.
#[derive(Debug, Clone)]
pub struct ShimExecutor {
    program: String,
    args: Vec<String>,
    /// Slack on top of the summed per-cell timeouts before the process is
    /// treated as hung.
    pub grace: Duration,
}

impl ShimExecutor {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        ShimExecutor {
            program: program.into(),
            args,
            grace: Duration::from_secs(10),
        }
    }

    /// Whitespace-separated command line, e.g. `python3 /opt/nbshim.py`.
    pub fn from_command_line(cmd: &str) -> Option<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self::new(program, parts.collect()))
    }

    /// Reads the command from `NBHARNESS_SHIM`.
    pub fn from_env() -> Option<Self> {
        std::env::var(SHIM_ENV)
            .ok()
            .and_then(|c| Self::from_command_line(&c))
    }

    pub fn command_line(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn deadline(&self, req: &ExecRequest) -> Duration {
        let per_cell = req.timeout_per_cell_s.max(0.0);
        Duration::from_secs_f64(per_cell * req.cells.len() as f64) + self.grace
    }
}

impl Executor for ShimExecutor {
    fn run(&self, req: &ExecRequest) -> Result<ExecResponse, ExecutorError> {
        let mut line = serde_json::to_vec(req).expect("request serializes");
        line.push(b'\n');

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| ExecutorError::Spawn {
                command: self.command_line(),
                source,
            })?;

        let mut stdin = child.stdin.take().expect("stdin is piped");
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");
        let writer = std::thread::spawn(move || {
            // A shim that exits early closes its end; that surfaces below.
            let _ = stdin.write_all(&line);
        });
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let status = match child.wait_timeout(self.deadline(req))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ExecutorError::Crash(format!(
                    "no response within {:?}",
                    self.deadline(req)
                )));
            }
        };
        let _ = writer.join();
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();

        // the response is the final line; anything before it is stray output
        let last_line = out
            .split(|&b| b == b'\n')
            .rfind(|l| !l.trim_ascii().is_empty())
            .unwrap_or_default();
        let resp: ExecResponse = match serde_json::from_slice(last_line) {
            Ok(r) => r,
            Err(e) => {
                let stderr_tail = String::from_utf8_lossy(&err);
                let stderr_tail = stderr_tail.trim();
                let tail: String = stderr_tail
                    .chars()
                    .rev()
                    .take(500)
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect();
                return Err(ExecutorError::Crash(format!(
                    "{status}, unreadable response ({e}){}{}",
                    if tail.is_empty() { "" } else { ": " },
                    tail
                )));
            }
        };
        if resp.ok != status.success() {
            return Err(ExecutorError::Protocol(format!(
                "exit status {status} disagrees with ok={}",
                resp.ok
            )));
        }
        resp.validate(req)?;
        Ok(resp)
    }
}

/// Recursively copies `src` into `dst`, skipping VCS and checkpoint
/// directories.
pub fn copy_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in walkdir::WalkDir::new(src)
        .min_depth(1)
        .into_iter()
        .filter_entry(|e| {
            let name = e.file_name();
            name != ".git" && name != ".ipynb_checkpoints"
        })
    {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

//! Task environment: runs a candidate program in an isolated working
//! directory and grades the submission it leaves behind.

mod pack;

use std::collections::VecDeque;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExecStatus, ExecutionOutcome, TaskSpec};

pub use pack::{
    generate, human_leaderboard, load_task_definitions, reference_submission, synthetic_task_pack,
    synthetic_task_pack_with, write_task_definitions, GraderKind, GraderParams, TaskData,
    DEFAULT_N_TEAMS,
};

pub const SUBMISSION_FILE: &str = "submission.csv";
pub const SOLUTION_FILE: &str = "solution.py";
/// Bytes of combined stdout/stderr kept from the end of a run.
pub const LOG_TAIL_BYTES: usize = 16 * 1024;
pub const DEFAULT_EXEC_LIMIT_S: f64 = 300.0;
pub const DEFAULT_MEMORY_LIMIT_BYTES: u64 = 4 << 30;

/// Expected shape of a submission file: an exact header and one row per id
/// `0..n_rows`. The first column holds the id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionSchema {
    pub columns: Vec<String>,
    pub n_rows: usize,
}

/// Grader of an executable task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grading {
    pub kind: GraderKind,
    pub params: GraderParams,
    pub schema: SubmissionSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    MissingFile,
    SchemaMismatch,
    GraderError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradeResult {
    pub valid: bool,
    pub raw_score: Option<f64>,
    pub failure_reason: Option<FailureReason>,
    pub detail: String,
}

impl GradeResult {
    fn fail(reason: FailureReason, detail: impl Into<String>) -> Self {
        Self {
            valid: false,
            raw_score: None,
            failure_reason: Some(reason),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPolicy {
    Deny,
    Allow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandboxPolicy {
    pub time_limit_s: f64,
    pub memory_limit_bytes: Option<u64>,
    pub network: NetworkPolicy,
    pub interpreter: PathBuf,
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        Self {
            time_limit_s: DEFAULT_EXEC_LIMIT_S,
            memory_limit_bytes: Some(DEFAULT_MEMORY_LIMIT_BYTES),
            network: NetworkPolicy::Deny,
            interpreter: PathBuf::from("python3"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("could not prepare working directory {path}: {source}")]
    Setup {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not start {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid sandbox policy: {0}")]
    Policy(String),
    #[error("task {0} has no grader")]
    Ungraded(String),
}

/// Result of one sandboxed run.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub outcome: ExecutionOutcome,
    pub grade: Option<GradeResult>,
}

impl Execution {
    pub fn score(&self) -> Option<f64> {
        match self.outcome.status {
            ExecStatus::Success => self.grade.as_ref().and_then(|g| g.raw_score),
            _ => None,
        }
    }
}

/// Writes the task's data files into `dir`.
pub fn prepare_workdir(task: &TaskSpec, dir: &Path) -> Result<(), SandboxError> {
    let g = task
        .grading
        .as_ref()
        .ok_or_else(|| SandboxError::Ungraded(task.task_id.clone()))?;
    let setup = |source| SandboxError::Setup {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(setup)?;
    let data = generate(g.kind, &g.params);
    for (name, contents) in &data.files {
        std::fs::write(dir.join(name), contents).map_err(setup)?;
    }
    let mut sample = g.schema.columns.join(",");
    sample.push('\n');
    for i in 0..g.schema.n_rows {
        sample.push_str(&format!("{i},0\n"));
    }
    std::fs::write(dir.join("sample_submission.csv"), sample).map_err(setup)?;
    Ok(())
}

/// Checks a submission file against the task schema and grades it.
pub fn validate_submission(path: &Path, task: &TaskSpec) -> GradeResult {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return GradeResult::fail(FailureReason::MissingFile, e.to_string()),
    };
    validate_submission_text(&text, task)
}

/// Grades an in-memory submission.
pub fn validate_submission_text(text: &str, task: &TaskSpec) -> GradeResult {
    let Some(g) = task.grading.as_ref() else {
        return GradeResult::fail(FailureReason::GraderError, "task has no grader");
    };
    match parse_submission(text, g) {
        Ok(preds) => grade_predictions(g, &preds),
        Err(detail) => GradeResult::fail(FailureReason::SchemaMismatch, detail),
    }
}

fn parse_submission(text: &str, g: &Grading) -> Result<Vec<f64>, String> {
    let schema = &g.schema;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| format!("unreadable header: {e}"))?;
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err("empty submission".into());
    }
    if header.iter().ne(schema.columns.iter().map(String::as_str)) {
        return Err(format!(
            "header {:?} does not match expected {:?}",
            header.iter().collect::<Vec<_>>(),
            schema.columns
        ));
    }
    let mut values: Vec<Option<f64>> = vec![None; schema.n_rows];
    let label_task = pack::is_label_task(g.kind);
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("row {}: {e}", line + 2))?;
        if record.len() != schema.columns.len() {
            return Err(format!("row {}: expected {} fields", line + 2, schema.columns.len()));
        }
        let id: usize = record[0]
            .parse()
            .map_err(|_| format!("row {}: bad id {:?}", line + 2, &record[0]))?;
        if id >= schema.n_rows {
            return Err(format!("row {}: id {id} out of range", line + 2));
        }
        let v: f64 = record[1]
            .parse()
            .map_err(|_| format!("row {}: bad value {:?}", line + 2, &record[1]))?;
        if !v.is_finite() {
            return Err(format!("row {}: non-finite value", line + 2));
        }
        if label_task && v.fract() != 0.0 {
            return Err(format!("row {}: label {v} is not an integer", line + 2));
        }
        if values[id].replace(v).is_some() {
            return Err(format!("duplicate id {id}"));
        }
    }
    if let Some(missing) = values.iter().position(Option::is_none) {
        return Err(format!("missing id {missing}"));
    }
    Ok(values.into_iter().map(|v| v.expect("checked")).collect())
}

fn grade_predictions(g: &Grading, preds: &[f64]) -> GradeResult {
    let data = generate(g.kind, &g.params);
    if data.targets.len() != preds.len() {
        return GradeResult::fail(
            FailureReason::GraderError,
            format!("{} targets for {} predictions", data.targets.len(), preds.len()),
        );
    }
    let s = pack::score(g.kind, &g.params, &data.targets, preds);
    if !s.is_finite() {
        return GradeResult::fail(FailureReason::GraderError, "non-finite score");
    }
    GradeResult {
        valid: true,
        raw_score: Some(s),
        failure_reason: None,
        detail: String::new(),
    }
}

fn unshare_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        Command::new("unshare")
            .args(["-rn", "true"])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .is_ok_and(|s| s.success())
    })
}

const SOCKET_GUARD: &str = "import socket\n\
def _denied(*args, **kwargs):\n    raise OSError('network access is disabled')\n\
socket.socket.connect = _denied\nsocket.socket.connect_ex = _denied\n\
socket.create_connection = _denied\nsocket.getaddrinfo = _denied\n";

struct TailBuffer {
    bytes: VecDeque<u8>,
}

impl TailBuffer {
    fn push(&mut self, chunk: &[u8]) {
        self.bytes.extend(chunk);
        let excess = self.bytes.len().saturating_sub(LOG_TAIL_BYTES);
        self.bytes.drain(..excess);
    }
}

fn pump<R: Read + Send + 'static>(mut src: R, sink: Arc<Mutex<TailBuffer>>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => sink.lock().expect("tail buffer").push(&buf[..n]),
            }
        }
    })
}

fn kill_group(pid: u32) {
    // SAFETY: plain syscall on a process group we created.
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
}

/// Runs `code` for `task` inside `workdir` and classifies the outcome.
///
/// The program runs in its own process group; on timeout the whole group
/// is killed. Exit 0 with a valid submission is a success, exit 0 without
/// one is an invalid submission and any other exit is a bug.
pub fn execute(
    code: &str,
    task: &TaskSpec,
    workdir: &Path,
    policy: &SandboxPolicy,
) -> Result<Execution, SandboxError> {
    if !(policy.time_limit_s > 0.0 && policy.time_limit_s.is_finite()) {
        return Err(SandboxError::Policy(format!(
            "time limit {} must be positive",
            policy.time_limit_s
        )));
    }
    prepare_workdir(task, workdir)?;
    let setup = |source| SandboxError::Setup {
        path: workdir.to_path_buf(),
        source,
    };
    let _ = std::fs::remove_file(workdir.join(SUBMISSION_FILE));
    std::fs::write(workdir.join(SOLUTION_FILE), code).map_err(setup)?;

    let deny = policy.network == NetworkPolicy::Deny;
    let mut cmd = if deny && unshare_available() {
        let mut c = Command::new("unshare");
        c.arg("-rn").arg(&policy.interpreter);
        c
    } else {
        Command::new(&policy.interpreter)
    };
    cmd.arg(SOLUTION_FILE)
        .current_dir(workdir)
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
        .env("HOME", workdir)
        .env("PYTHONHASHSEED", "0")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTHONUNBUFFERED", "1")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if deny {
        let guard_dir = workdir.join(".sandbox");
        std::fs::create_dir_all(&guard_dir).map_err(setup)?;
        std::fs::write(guard_dir.join("sitecustomize.py"), SOCKET_GUARD).map_err(setup)?;
        cmd.env("PYTHONPATH", &guard_dir);
    }
    if let Some(limit) = policy.memory_limit_bytes {
        // SAFETY: setrlimit is async-signal-safe and touches only the child.
        unsafe {
            cmd.pre_exec(move || {
                let lim = libc::rlimit {
                    rlim_cur: limit as libc::rlim_t,
                    rlim_max: limit as libc::rlim_t,
                };
                if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|source| SandboxError::Spawn {
        program: policy.interpreter.display().to_string(),
        source,
    })?;
    let tail = Arc::new(Mutex::new(TailBuffer {
        bytes: VecDeque::new(),
    }));
    let readers = [
        pump(child.stdout.take().expect("piped stdout"), tail.clone()),
        pump(child.stderr.take().expect("piped stderr"), tail.clone()),
    ];
    let limit = Duration::from_secs_f64(policy.time_limit_s);
    let pid = child.id();
    let (exit, timed_out) = loop {
        match child.try_wait() {
            Ok(Some(status)) => break (Some(status), false),
            Ok(None) if start.elapsed() >= limit => {
                kill_group(pid);
                let _ = child.wait();
                break (None, true);
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => {
                kill_group(pid);
                let _ = child.wait();
                break (None, false);
            }
        }
    };
    // descendants that outlived the leader still hold the pipes
    kill_group(pid);
    for r in readers {
        let _ = r.join();
    }
    let wall_time_s = start.elapsed().as_secs_f64();
    let log_excerpt = {
        let t = tail.lock().expect("tail buffer");
        String::from_utf8_lossy(&t.bytes.iter().copied().collect::<Vec<_>>()).into_owned()
    };

    let (status, grade) = if timed_out {
        (ExecStatus::Timeout, None)
    } else if exit.is_some_and(|s| s.success()) {
        let g = validate_submission(&workdir.join(SUBMISSION_FILE), task);
        let status = if g.valid {
            ExecStatus::Success
        } else {
            ExecStatus::InvalidSubmission
        };
        (status, Some(g))
    } else {
        (ExecStatus::Buggy, None)
    };
    Ok(Execution {
        outcome: ExecutionOutcome {
            status,
            wall_time_s: if timed_out {
                wall_time_s.max(policy.time_limit_s)
            } else {
                wall_time_s
            },
            log_excerpt,
        },
        grade,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str) -> TaskSpec {
        synthetic_task_pack()
            .into_iter()
            .find(|t| t.task_id == id)
            .unwrap()
    }

    #[test]
    fn reference_submission_hits_optimum() {
        for t in synthetic_task_pack() {
            let g = validate_submission_text(&reference_submission(&t).unwrap(), &t);
            assert!(g.valid, "{}: {}", t.task_id, g.detail);
            assert_eq!(g.raw_score, t.optimum, "{}", t.task_id);
        }
    }

    #[test]
    fn empty_submission_is_invalid() {
        let t = task("linear-fit");
        let g = validate_submission_text("", &t);
        assert!(!g.valid);
        assert_eq!(g.failure_reason, Some(FailureReason::SchemaMismatch));
    }

    #[test]
    fn missing_file_is_reported() {
        let t = task("linear-fit");
        let g = validate_submission(Path::new("/nonexistent/submission.csv"), &t);
        assert_eq!(g.failure_reason, Some(FailureReason::MissingFile));
    }

    #[test]
    fn schema_violations_are_rejected() {
        let t = task("separable-points");
        let good = reference_submission(&t).unwrap();
        let wrong_header = good.replacen("id,label", "id,y", 1);
        assert!(!validate_submission_text(&wrong_header, &t).valid);
        let short: String = good.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(!validate_submission_text(&short, &t).valid);
        let fractional = good.replacen("\n0,", "\n0,0.5\n#", 1);
        assert!(!validate_submission_text(&fractional, &t).valid);
    }

    #[test]
    fn rows_may_come_in_any_order() {
        let t = task("quadratic-min");
        let text = "id,value\n3,-2\n2,3\n1,-1\n0,0.5\n";
        let g = validate_submission_text(text, &t);
        assert_eq!(g.raw_score, Some(1.5));
    }

    #[test]
    fn generation_is_deterministic() {
        let g = task("centroid-classes").grading.unwrap();
        assert_eq!(generate(g.kind, &g.params), generate(g.kind, &g.params));
    }

    #[test]
    fn task_definitions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pack = synthetic_task_pack_with(7);
        write_task_definitions(&pack, dir.path()).unwrap();
        let mut loaded = load_task_definitions(dir.path()).unwrap();
        let mut expected = pack.clone();
        expected.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        loaded.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        assert_eq!(loaded, expected);
        assert_eq!(loaded[0].leaderboard.n_teams(), 7);
    }
}

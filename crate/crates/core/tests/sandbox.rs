use std::net::TcpListener;
use std::time::{Duration, Instant};

use ideaforest_core::model::{ExecStatus, TaskSpec};
use ideaforest_core::taskenv::{
    execute, reference_submission, synthetic_task_pack, FailureReason, NetworkPolicy, SandboxPolicy,
    LOG_TAIL_BYTES,
};

fn task(id: &str) -> TaskSpec {
    synthetic_task_pack()
        .into_iter()
        .find(|t| t.task_id == id)
        .unwrap()
}

fn policy(limit_s: f64) -> SandboxPolicy {
    SandboxPolicy {
        time_limit_s: limit_s,
        ..SandboxPolicy::default()
    }
}

fn writes(csv: &str) -> String {
    format!("open('submission.csv', 'w').write({csv:?})\n")
}

#[test]
fn valid_program_is_graded() {
    for t in synthetic_task_pack() {
        let dir = tempfile::tempdir().unwrap();
        let code = writes(&reference_submission(&t).unwrap());
        let ex = execute(&code, &t, dir.path(), &policy(30.0)).unwrap();
        assert_eq!(ex.outcome.status, ExecStatus::Success, "{}", ex.outcome.log_excerpt);
        assert_eq!(ex.score(), t.optimum, "{}", t.task_id);
    }
}

#[test]
fn data_files_are_readable_by_the_program() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let code = r#"
import csv
rows = list(csv.DictReader(open('test.csv')))
with open('submission.csv', 'w') as f:
    f.write('id,y\n')
    for r in rows:
        f.write(f"{r['id']},0\n")
"#;
    let ex = execute(code, &t, dir.path(), &policy(30.0)).unwrap();
    assert_eq!(ex.outcome.status, ExecStatus::Success, "{}", ex.outcome.log_excerpt);
    assert!(ex.score().unwrap() > 0.0);
}

#[test]
fn crash_is_buggy_with_traceback() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let ex = execute("import nn\n", &t, dir.path(), &policy(30.0)).unwrap();
    assert_eq!(ex.outcome.status, ExecStatus::Buggy);
    assert!(ex.outcome.log_excerpt.contains("ModuleNotFoundError"));
    assert_eq!(ex.score(), None);
}

#[test]
fn clean_exit_without_valid_file_is_invalid_submission() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let ex = execute("print('done')\n", &t, dir.path(), &policy(30.0)).unwrap();
    assert_eq!(ex.outcome.status, ExecStatus::InvalidSubmission);
    let g = ex.grade.unwrap();
    assert_eq!(g.failure_reason, Some(FailureReason::MissingFile));

    let ex = execute(&writes("id,wrong\n0,1\n"), &t, dir.path(), &policy(30.0)).unwrap();
    assert_eq!(ex.outcome.status, ExecStatus::InvalidSubmission);
    assert_eq!(ex.grade.unwrap().failure_reason, Some(FailureReason::SchemaMismatch));
}

#[test]
fn stale_submission_from_a_previous_run_is_discarded() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let code = writes(&reference_submission(&t).unwrap());
    execute(&code, &t, dir.path(), &policy(30.0)).unwrap();
    let ex = execute("pass\n", &t, dir.path(), &policy(30.0)).unwrap();
    assert_eq!(ex.outcome.status, ExecStatus::InvalidSubmission);
}

fn alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat.rsplit(')').next().unwrap_or("").trim_start();
            !state.starts_with('Z')
        }
        Err(_) => false,
    }
}

#[test]
fn timeout_kills_the_whole_process_group() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let code = r#"
import subprocess, time
p = subprocess.Popen(['sleep', '60'])
open('child.pid', 'w').write(str(p.pid))
time.sleep(60)
"#;
    let started = Instant::now();
    let ex = execute(code, &t, dir.path(), &policy(1.0)).unwrap();
    let took = started.elapsed();
    assert_eq!(ex.outcome.status, ExecStatus::Timeout);
    assert!(ex.outcome.wall_time_s >= 1.0);
    assert!(took < Duration::from_secs(3), "{took:?}");
    assert_eq!(ex.score(), None);
    let pid: u32 = std::fs::read_to_string(dir.path().join("child.pid"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    // the pid recorded inside a user namespace is still the host pid
    let deadline = Instant::now() + Duration::from_secs(2);
    while alive(pid) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(!alive(pid), "grandchild {pid} survived");
}

#[test]
fn network_is_denied_by_default() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let code = format!(
        r#"
import socket
try:
    s = socket.create_connection(('127.0.0.1', {port}), timeout=2)
    print('CONNECTED')
except Exception as e:
    print('BLOCKED', type(e).__name__)
"#
    );
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let ex = execute(&code, &t, dir.path(), &policy(30.0)).unwrap();
    assert!(ex.outcome.log_excerpt.contains("BLOCKED"), "{}", ex.outcome.log_excerpt);

    let open = SandboxPolicy {
        network: NetworkPolicy::Allow,
        ..policy(30.0)
    };
    let ex = execute(&code, &t, dir.path(), &open).unwrap();
    assert!(ex.outcome.log_excerpt.contains("CONNECTED"), "{}", ex.outcome.log_excerpt);
}

#[test]
fn memory_cap_turns_large_allocations_into_failures() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let capped = SandboxPolicy {
        memory_limit_bytes: Some(256 << 20),
        ..policy(30.0)
    };
    let ex = execute("x = bytearray(1 << 30)\n", &t, dir.path(), &capped).unwrap();
    assert_eq!(ex.outcome.status, ExecStatus::Buggy);
    assert!(ex.outcome.log_excerpt.contains("MemoryError"));
}

#[test]
fn log_keeps_only_the_tail() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    let code = "for i in range(20000):\n    print('line', i)\n";
    let ex = execute(code, &t, dir.path(), &policy(30.0)).unwrap();
    assert!(ex.outcome.log_excerpt.len() <= LOG_TAIL_BYTES);
    assert!(ex.outcome.log_excerpt.trim_end().ends_with("line 19999"));
}

#[test]
fn non_positive_time_limit_is_rejected() {
    let t = task("linear-fit");
    let dir = tempfile::tempdir().unwrap();
    assert!(execute("pass\n", &t, dir.path(), &policy(0.0)).is_err());
}

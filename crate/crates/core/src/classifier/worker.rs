//! Out-of-process backend speaking single-line JSON control messages over stdio.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    entailment_probability, read_jsonl, write_jsonl, ClassifierBackend, ClassifierError, EpochRow, ModelHandle,
    NliPair, ScoreResult, TrainReport, TrainSpec,
};

/// Worker `p_pos` must agree with the locally recomputed softmax within this.
const P_POS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Deserialize)]
struct Response {
    ok: bool,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    model_handle: Option<String>,
    #[serde(default)]
    report_path: Option<PathBuf>,
}

#[derive(Deserialize)]
struct WorkerReport {
    epochs: Vec<EpochRow>,
    selected_epoch: usize,
}

/// Spawns the worker on first use and keeps it alive; one request at a time.
pub struct WorkerBackend {
    command: WorkerCommand,
    work_dir: PathBuf,
    session: Mutex<Option<Session>>,
    jobs: AtomicU64,
}

impl WorkerBackend {
    pub fn new(command: WorkerCommand, work_dir: impl Into<PathBuf>) -> Self {
        WorkerBackend {
            command,
            work_dir: work_dir.into(),
            session: Mutex::new(None),
            jobs: AtomicU64::new(0),
        }
    }

    fn spawn(&self) -> Result<Session, ClassifierError> {
        let mut child = Command::new(&self.command.program)
            .args(&self.command.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ClassifierError::Transport(format!("cannot start `{}`: {e}", self.command.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Session { child, stdin, stdout })
    }

    fn request(&self, message: serde_json::Value) -> Result<Response, ClassifierError> {
        let mut guard = self.session.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let session = guard.as_mut().expect("session just set");
        let result = (|| {
            writeln!(session.stdin, "{message}")?;
            session.stdin.flush()?;
            let mut line = String::new();
            if session.stdout.read_line(&mut line)? == 0 {
                return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "worker closed its output"));
            }
            Ok(line)
        })();
        let line = match result {
            Ok(l) => l,
            Err(e) => {
                *guard = None;
                return Err(ClassifierError::Transport(e.to_string()));
            }
        };
        let resp: Response = serde_json::from_str(line.trim())
            .map_err(|e| ClassifierError::Protocol(format!("bad control response `{}`: {e}", line.trim())))?;
        if !resp.ok {
            return Err(ClassifierError::BackendFailed(
                resp.error.unwrap_or_else(|| "worker reported failure without a message".into()),
            ));
        }
        Ok(resp)
    }

    fn job_dir(&self, kind: &str) -> PathBuf {
        let n = self.jobs.fetch_add(1, Ordering::SeqCst);
        self.work_dir.join(format!("{kind}-{n:04}"))
    }
}

impl ClassifierBackend for WorkerBackend {
    fn name(&self) -> &str {
        "worker"
    }

    fn train(&self, spec: &TrainSpec) -> Result<TrainReport, ClassifierError> {
        spec.validate()?;
        let dir = self.job_dir("train");
        let (train_path, dev_path) = (dir.join("train.jsonl"), dir.join("dev.jsonl"));
        write_jsonl(&train_path, &spec.train)?;
        write_jsonl(&dev_path, &spec.dev)?;
        let resp = self.request(json!({
            "cmd": "train",
            "train_path": train_path,
            "dev_path": dev_path,
            "spec": spec.params,
        }))?;
        let handle = resp
            .model_handle
            .ok_or_else(|| ClassifierError::Protocol("train response without model_handle".into()))?;
        let report_path = resp
            .report_path
            .ok_or_else(|| ClassifierError::Protocol("train response without report_path".into()))?;
        let report: WorkerReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)
            .map_err(|e| ClassifierError::Protocol(format!("{}: {e}", report_path.display())))?;
        if !report.epochs.iter().any(|r| r.epoch == report.selected_epoch) {
            return Err(ClassifierError::Protocol(format!(
                "selected epoch {} not among reported epochs",
                report.selected_epoch
            )));
        }
        Ok(TrainReport {
            backend: self.name().to_string(),
            epochs: report.epochs,
            selected_epoch: report.selected_epoch,
            model_handle: ModelHandle(handle),
            params: spec.params.clone(),
            train_size: spec.train.len(),
            dev_size: spec.dev.len(),
        })
    }

    fn score(&self, handle: &ModelHandle, pairs: &[NliPair]) -> Result<Vec<ScoreResult>, ClassifierError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let dir = self.job_dir("score");
        let (pairs_path, out_path) = (dir.join("pairs.jsonl"), dir.join("scores.jsonl"));
        write_jsonl(&pairs_path, pairs)?;
        self.request(json!({
            "cmd": "score",
            "model_handle": handle.0,
            "pairs_path": pairs_path,
            "out_path": out_path,
        }))?;
        let scores: Vec<ScoreResult> = read_jsonl(&out_path)?;
        if scores.len() != pairs.len() {
            return Err(ClassifierError::Protocol(format!(
                "{} scores for {} pairs",
                scores.len(),
                pairs.len()
            )));
        }
        for (s, p) in scores.iter().zip(pairs) {
            if s.pair_id != p.pair_id {
                return Err(ClassifierError::Protocol(format!(
                    "score order mismatch: expected {}, got {}",
                    p.pair_id, s.pair_id
                )));
            }
            let local = entailment_probability(s.logits())?;
            if (local - s.p_pos).abs() > P_POS_TOLERANCE {
                return Err(ClassifierError::Protocol(format!(
                    "p_pos {} for {} disagrees with logits ({local})",
                    s.p_pos, s.pair_id
                )));
            }
        }
        Ok(scores)
    }
}

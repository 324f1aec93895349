//! Long-running work as jobs: on-disk records, at most K running at once,
//! cancellation between elements, results renamed into place before a job
//! is marked done.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use ipdm_core::control::RunControl;
use ipdm_core::{fsutil, Error, Result};

use crate::ops;

pub const RECORD_FILE: &str = "job.json";
pub const RESULT_DIR: &str = "result";
const PARTIAL_DIR: &str = "result.partial";
const LOG_TAIL: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Train,
    Generate,
    Verify,
    Validate,
    EstimateInterventions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Cancelled)
    }
}

/// A parsed job configuration, one variant per kind.
#[derive(Debug, Clone)]
pub enum JobSpec {
    Train(ops::TrainJob),
    Generate(ops::GenerateJob),
    Verify(ops::VerifyJob),
    Validate(ops::ValidateJob),
    EstimateInterventions(ops::InterventionsJob),
}

impl JobSpec {
    pub fn parse(kind: JobKind, config: serde_json::Value) -> std::result::Result<Self, String> {
        fn de<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> std::result::Result<T, String> {
            serde_json::from_value(v).map_err(|e| e.to_string())
        }
        let config = if config.is_null() { serde_json::json!({}) } else { config };
        Ok(match kind {
            JobKind::Train => Self::Train(de(config)?),
            JobKind::Generate => Self::Generate(de(config)?),
            JobKind::Verify => Self::Verify(de(config)?),
            JobKind::Validate => Self::Validate(de(config)?),
            JobKind::EstimateInterventions => Self::EstimateInterventions(de(config)?),
        })
    }

    pub fn run(&self, out: &Path, control: &RunControl) -> Result<Vec<String>> {
        match self {
            Self::Train(j) => ops::train(j, out, control),
            Self::Generate(j) => ops::generate(j, out, control),
            Self::Verify(j) => ops::verify(j, out, control),
            Self::Validate(j) => ops::validate(j, out, control),
            Self::EstimateInterventions(j) => ops::train_interventions(j, out, control),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub config: serde_json::Value,
    /// Directory holding the outputs; set once the job is done.
    pub result: Option<PathBuf>,
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub log_tail: Vec<String>,
}

impl JobRecord {
    fn log(&mut self, line: impl Into<String>) {
        self.log_tail.push(line.into());
        if self.log_tail.len() > LOG_TAIL {
            self.log_tail.remove(0);
        }
    }
}

/// Job body: writes its outputs into the given directory and returns their
/// relative paths.
pub type Work = Box<dyn FnOnce(&Path, &RunControl) -> Result<Vec<String>> + Send + 'static>;

struct Entry {
    record: JobRecord,
    control: RunControl,
}

#[derive(Debug)]
pub enum CancelError {
    NotFound,
    Finished(JobState),
}

/// Owns every job record; handlers only read snapshots.
pub struct JobManager {
    dir: PathBuf,
    jobs: Mutex<BTreeMap<String, Entry>>,
    slots: Arc<Semaphore>,
}

impl JobManager {
    /// Loads earlier records from `dir`. Jobs that were queued or running
    /// when the service stopped are marked failed.
    pub fn open(dir: &Path, max_concurrent: usize) -> Result<Arc<Self>> {
        fsutil::create_dir_all(dir)?;
        let mut jobs = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::Other(format!("{}: {e}", dir.display())))?;
        for ent in entries.flatten() {
            let path = ent.path().join(RECORD_FILE);
            let Ok(text) = std::fs::read_to_string(&path) else { continue };
            let Ok(mut rec) = serde_json::from_str::<JobRecord>(&text) else {
                log::warn!("ignoring unreadable job record {}", path.display());
                continue;
            };
            if !rec.state.is_finished() {
                rec.state = JobState::Failed;
                rec.error = Some("interrupted by a service restart".into());
                rec.log("interrupted by a service restart");
                let _ = std::fs::remove_dir_all(ent.path().join(PARTIAL_DIR));
                fsutil::write_atomic(&path, &ops::json_bytes(&rec)?)?;
            }
            jobs.insert(rec.id.clone(), Entry { record: rec, control: RunControl::new() });
        }
        Ok(Arc::new(Self {
            dir: dir.to_path_buf(),
            jobs: Mutex::new(jobs),
            slots: Arc::new(Semaphore::new(max_concurrent.max(1))),
        }))
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    fn persist(&self, rec: &JobRecord) -> Result<()> {
        fsutil::create_dir_all(&self.job_dir(&rec.id))?;
        fsutil::write_atomic(&self.job_dir(&rec.id).join(RECORD_FILE), &ops::json_bytes(rec)?)
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) -> Option<JobRecord> {
        let mut jobs = self.jobs.lock().expect("job table poisoned");
        let e = jobs.get_mut(id)?;
        f(&mut e.record);
        let rec = e.record.clone();
        drop(jobs);
        if let Err(err) = self.persist(&rec) {
            log::error!("persisting job {id}: {err}");
        }
        Some(rec)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        let jobs = self.jobs.lock().expect("job table poisoned");
        jobs.get(id).map(|e| {
            let mut r = e.record.clone();
            if r.state == JobState::Running {
                r.progress = e.control.progress();
            }
            r
        })
    }

    pub fn list(&self) -> Vec<JobRecord> {
        let ids: Vec<String> = self.jobs.lock().expect("job table poisoned").keys().cloned().collect();
        ids.iter().filter_map(|id| self.get(id)).collect()
    }

    /// Records the job and schedules it; returns without waiting for a slot.
    pub fn submit(self: &Arc<Self>, kind: JobKind, config: serde_json::Value, spec: JobSpec) -> Result<JobRecord> {
        self.submit_work(kind, config, Box::new(move |out, control| spec.run(out, control)))
    }

    /// As [`submit`](Self::submit) with arbitrary work writing into the
    /// directory it is given.
    pub fn submit_work(self: &Arc<Self>, kind: JobKind, config: serde_json::Value, work: Work) -> Result<JobRecord> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut rec = JobRecord {
            id: id.clone(),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            config,
            result: None,
            files: Vec::new(),
            error: None,
            log_tail: Vec::new(),
        };
        rec.log("queued");
        self.persist(&rec)?;
        let control = RunControl::new();
        self.jobs
            .lock()
            .expect("job table poisoned")
            .insert(id.clone(), Entry { record: rec.clone(), control: control.clone() });
        let me = Arc::clone(self);
        tokio::spawn(async move { me.drive(id, work, control).await });
        Ok(rec)
    }

    async fn drive(self: Arc<Self>, id: String, work: Work, control: RunControl) {
        let Ok(_permit) = Arc::clone(&self.slots).acquire_owned().await else { return };
        if control.is_cancelled() {
            return;
        }
        self.update(&id, |r| {
            r.state = JobState::Running;
            r.log("running");
        });
        let dir = self.job_dir(&id);
        let partial = dir.join(PARTIAL_DIR);
        let _ = std::fs::remove_dir_all(&partial);
        let run_partial = partial.clone();
        let run_control = control.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            std::panic::catch_unwind(AssertUnwindSafe(|| work(&run_partial, &run_control)))
        })
        .await;
        let result = match outcome {
            Ok(Ok(r)) => r,
            Ok(Err(panic)) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "worker panicked".into());
                Err(Error::Other(format!("worker panicked: {msg}")))
            }
            Err(e) => Err(Error::Other(format!("worker aborted: {e}"))),
        };
        match result {
            Ok(mut files) => {
                let target = dir.join(RESULT_DIR);
                let _ = std::fs::remove_dir_all(&target);
                let moved = if partial.exists() {
                    std::fs::rename(&partial, &target).map_err(|e| e.to_string())
                } else {
                    std::fs::create_dir_all(&target).map_err(|e| e.to_string())
                };
                files.sort();
                self.update(&id, |r| match moved {
                    Ok(()) => {
                        r.state = JobState::Done;
                        r.progress = 1.0;
                        r.result = Some(target);
                        r.log(format!("done, {} files", files.len()));
                        r.files = files;
                    }
                    Err(e) => {
                        r.state = JobState::Failed;
                        r.error = Some(format!("moving results into place: {e}"));
                        r.log("failed");
                    }
                });
            }
            Err(Error::Cancelled) => {
                let _ = std::fs::remove_dir_all(&partial);
                self.update(&id, |r| {
                    r.state = JobState::Cancelled;
                    r.log("cancelled, partial outputs deleted");
                });
            }
            Err(e) => {
                let _ = std::fs::remove_dir_all(&partial);
                let msg = e.to_string();
                self.update(&id, |r| {
                    r.state = JobState::Failed;
                    r.log(format!("failed: {msg}"));
                    r.error = Some(msg);
                });
            }
        }
    }

    /// Queued jobs are cancelled at once; running jobs stop at the next
    /// element boundary.
    pub fn cancel(&self, id: &str) -> std::result::Result<JobRecord, CancelError> {
        let mut jobs = self.jobs.lock().expect("job table poisoned");
        let e = jobs.get_mut(id).ok_or(CancelError::NotFound)?;
        if e.record.state.is_finished() {
            return Err(CancelError::Finished(e.record.state));
        }
        e.control.cancel();
        if e.record.state == JobState::Queued {
            e.record.state = JobState::Cancelled;
            e.record.log("cancelled before start");
        } else {
            e.record.log("cancellation requested");
        }
        let rec = e.record.clone();
        drop(jobs);
        if let Err(err) = self.persist(&rec) {
            log::error!("persisting job {id}: {err}");
        }
        Ok(rec)
    }

    /// Blocks until the job has finished; for tests and the CLI.
    pub async fn wait(&self, id: &str) -> Option<JobRecord> {
        loop {
            let r = self.get(id)?;
            if r.state.is_finished() {
                return Some(r);
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        }
    }
}

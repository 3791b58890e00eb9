//! Job records and their append-only journal.
//!
//! Every state change is one JSON line, flushed and synced before the change
//! becomes visible. Replaying the journal at startup rebuilds the table; jobs
//! caught mid-run are marked failed, queued jobs are queued again.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use emojich::pipeline::Artifact;
use emojich::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    Segment,
    Export,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    /// queued -> running -> {done, failed}
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub request: serde_json::Value,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Files produced by the job, with content hashes.
    pub artifacts: Vec<Artifact>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Submitted {
        job: Job,
    },
    Started {
        id: String,
        at: u64,
    },
    Finished {
        id: String,
        at: u64,
        result: serde_json::Value,
        artifacts: Vec<Artifact>,
    },
    Failed {
        id: String,
        at: u64,
        error: String,
    },
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Inner {
    jobs: HashMap<String, Job>,
    order: Vec<String>,
    journal: File,
}

/// Thread-safe job table backed by the journal; the mutex makes the journal
/// single-writer.
pub struct JobStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl JobStore {
    /// Opens (or creates) the journal and replays it. Returns the store and
    /// the ids of jobs that should be queued again, oldest first.
    pub fn open(path: impl Into<PathBuf>) -> Result<(Self, Vec<String>)> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut jobs = HashMap::new();
        let mut order = Vec::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from a crash is ignored.
                let Ok(ev) = serde_json::from_str::<Event>(&line) else {
                    log::warn!("journal line {} unreadable; skipped", i + 1);
                    continue;
                };
                apply(&mut jobs, &mut order, ev);
            }
        }
        let mut journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        // Terminate a torn line so the next event starts on its own line.
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            journal.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        let store = Self {
            path,
            inner: Mutex::new(Inner {
                jobs,
                order,
                journal,
            }),
        };
        let interrupted: Vec<String> = store.ids_with(JobStatus::Running);
        for id in interrupted {
            store.fail(&id, "interrupted by a service restart")?;
        }
        let queued = store.ids_with(JobStatus::Queued);
        Ok((store, queued))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn ids_with(&self, status: JobStatus) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        inner
            .order
            .iter()
            .filter(|id| inner.jobs[*id].status == status)
            .cloned()
            .collect()
    }

    fn commit(inner: &mut Inner, path: &Path, ev: Event) -> Result<()> {
        let line = serde_json::to_string(&ev)?;
        writeln!(inner.journal, "{line}").map_err(|e| Error::io(path, e))?;
        inner.journal.sync_data().map_err(|e| Error::io(path, e))?;
        apply(&mut inner.jobs, &mut inner.order, ev);
        Ok(())
    }

    pub fn submit(&self, kind: JobKind, request: serde_json::Value) -> Result<Job> {
        let at = now_ms();
        let job = Job {
            id: uuid::Uuid::new_v4().simple().to_string(),
            kind,
            request,
            status: JobStatus::Queued,
            result: None,
            error: None,
            artifacts: vec![],
            created_at: at,
            updated_at: at,
        };
        let mut inner = self.inner.lock().unwrap();
        Self::commit(
            &mut inner,
            &self.path,
            Event::Submitted { job: job.clone() },
        )?;
        Ok(job)
    }

    fn transition(&self, id: &str, next: JobStatus, ev: Event) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let current = inner
            .jobs
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown job {id}")))?
            .status;
        if !current.can_become(next) {
            return Err(Error::Contract(format!(
                "job {id} cannot go from {current:?} to {next:?}"
            )));
        }
        Self::commit(&mut inner, &self.path, ev)
    }

    pub fn start(&self, id: &str) -> Result<()> {
        self.transition(
            id,
            JobStatus::Running,
            Event::Started {
                id: id.into(),
                at: now_ms(),
            },
        )
    }

    pub fn finish(
        &self,
        id: &str,
        result: serde_json::Value,
        artifacts: Vec<Artifact>,
    ) -> Result<()> {
        self.transition(
            id,
            JobStatus::Done,
            Event::Finished {
                id: id.into(),
                at: now_ms(),
                result,
                artifacts,
            },
        )
    }

    pub fn fail(&self, id: &str, error: &str) -> Result<()> {
        self.transition(
            id,
            JobStatus::Failed,
            Event::Failed {
                id: id.into(),
                at: now_ms(),
                error: error.into(),
            },
        )
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().unwrap().jobs.get(id).cloned()
    }

    /// All jobs, oldest first.
    pub fn list(&self) -> Vec<Job> {
        let inner = self.inner.lock().unwrap();
        inner
            .order
            .iter()
            .map(|id| inner.jobs[id].clone())
            .collect()
    }
}

fn apply(jobs: &mut HashMap<String, Job>, order: &mut Vec<String>, ev: Event) {
    match ev {
        Event::Submitted { job } => {
            if !jobs.contains_key(&job.id) {
                order.push(job.id.clone());
            }
            jobs.insert(job.id.clone(), job);
        }
        Event::Started { id, at } => {
            if let Some(j) = jobs.get_mut(&id) {
                j.status = JobStatus::Running;
                j.updated_at = at;
            }
        }
        Event::Finished {
            id,
            at,
            result,
            artifacts,
        } => {
            if let Some(j) = jobs.get_mut(&id) {
                j.status = JobStatus::Done;
                j.result = Some(result);
                j.artifacts = artifacts;
                j.updated_at = at;
            }
        }
        Event::Failed { id, at, error } => {
            if let Some(j) = jobs.get_mut(&id) {
                j.status = JobStatus::Failed;
                j.error = Some(error);
                j.updated_at = at;
            }
        }
    }
}

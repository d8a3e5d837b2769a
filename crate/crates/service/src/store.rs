//! On-disk session store plus append-only game and choice logs.
//!
//! Layout under the data directory:
//! `sessions/{id}.json`, `games.jsonl`, `choices.jsonl`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use altq_core::eval::GameRecord;
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::session::{Rating, Result, Session, SessionError};

/// One finished game in the export log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub session: String,
    pub model: String,
    pub checkpoint: String,
    pub seed: u64,
    pub finished_at: DateTime<Utc>,
    #[serde(flatten)]
    pub record: GameRecord,
    pub rating: Rating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub seed: u64,
    pub label: String,
    pub model: String,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    /// Share of choices per model, in percent.
    pub preferred: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExportFilter {
    pub model: Option<String>,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl ExportFilter {
    pub fn accepts(&self, line: &LogLine) -> bool {
        let day = line.finished_at.date_naive();
        self.model.as_ref().is_none_or(|m| *m == line.model)
            && self.from.is_none_or(|f| day >= f)
            && self.to.is_none_or(|t| day <= t)
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

pub struct SessionStore {
    dir: PathBuf,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    log: Mutex<()>,
}

fn io_err(path: &Path, e: std::io::Error) -> SessionError {
    SessionError::Internal(format!("{}: {e}", path.display()))
}

fn json_err(e: serde_json::Error) -> SessionError {
    SessionError::Internal(e.to_string())
}

impl SessionStore {
    /// Opens (creating if needed) the data directory and loads saved sessions.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let sessions_dir = dir.join("sessions");
        fs::create_dir_all(&sessions_dir).map_err(|e| io_err(&sessions_dir, e))?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&sessions_dir).map_err(|e| io_err(&sessions_dir, e))? {
            let path = entry.map_err(|e| io_err(&sessions_dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                let s: Session = serde_json::from_str(&text).map_err(json_err)?;
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(SessionStore {
            dir,
            sessions: Mutex::new(sessions),
            log: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.dir.join("sessions").join(format!("{id}.json"))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, session: Session) -> Result<SessionHandle> {
        self.persist(&session)?;
        let id = session.id.clone();
        let handle = Arc::new(Mutex::new(session));
        self.sessions.lock().unwrap().insert(id, handle.clone());
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("no game with id {id}")))
    }

    /// Writes the session atomically (temp file + rename).
    pub fn persist(&self, session: &Session) -> Result<()> {
        let path = self.session_path(&session.id);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(session).map_err(json_err)?;
        fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    fn append(&self, name: &str, line: &impl Serialize) -> Result<()> {
        let _guard = self.log.lock().unwrap();
        let path = self.dir.join(name);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let mut buf = serde_json::to_vec(line).map_err(json_err)?;
        buf.push(b'\n');
        f.write_all(&buf).map_err(|e| io_err(&path, e))
    }

    fn read_lines<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<Vec<T>> {
        let _guard = self.log.lock().unwrap();
        let path = self.dir.join(name);
        let f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path, e)),
        };
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| io_err(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line).map_err(json_err)?);
            }
        }
        Ok(out)
    }

    pub fn log_finished(&self, session: &Session) -> Result<()> {
        let rating = session
            .rating
            .ok_or_else(|| SessionError::Internal("finished session without rating".into()))?;
        self.append(
            "games.jsonl",
            &LogLine {
                session: session.id.clone(),
                model: session.model.clone(),
                checkpoint: session.checkpoint.clone(),
                seed: session.seed,
                finished_at: session.updated_at,
                record: session.record(),
                rating,
            },
        )
    }

    pub fn export(&self, filter: &ExportFilter) -> Result<Vec<LogLine>> {
        Ok(self
            .read_lines::<LogLine>("games.jsonl")?
            .into_iter()
            .filter(|l| filter.accepts(l))
            .collect())
    }

    pub fn record_choice(&self, choice: &Choice) -> Result<()> {
        self.append("choices.jsonl", choice)
    }

    pub fn tally(&self) -> Result<Tally> {
        let choices: Vec<Choice> = self.read_lines("choices.jsonl")?;
        let mut t = Tally {
            total: choices.len(),
            ..Tally::default()
        };
        for c in &choices {
            *t.counts.entry(c.model.clone()).or_default() += 1;
        }
        t.preferred = t
            .counts
            .iter()
            .map(|(m, &n)| (m.clone(), 100.0 * n as f64 / t.total as f64))
            .collect();
        Ok(t)
    }
}

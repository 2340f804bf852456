//! Query queue, rater sessions and the persistence journal.
//!
//! Every mutation is written to the journal before it is applied in memory,
//! under one write lock, so the journal is a total order of events and a
//! restart replays it into the same state. Reads take the shared lock.
//!
//! Each reservation draws an A/B swap bit per query. Payloads present
//! `(a, b)`; the bit maps them back to `(plus, minus)` on submission and never
//! leaves the store.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use perceptscore_core::evaluators::{quantize, PairQuery, PairResponse};
use perceptscore_core::rng::RngStream;
use perceptscore_core::DataPoint;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SESSION_TTL_SECS: f64 = 30.0 * 60.0;
/// Slider resolution; submitted ratings are rounded to it.
pub const RATING_QUANTUM: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("journal: {0}")]
    Journal(String),
}

pub trait Clock: Send + Sync {
    /// UTC seconds.
    fn now(&self) -> f64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

/// Settable clock for tests and simulations.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<Mutex<f64>>);

impl ManualClock {
    pub fn new(t: f64) -> Self {
        ManualClock(Arc::new(Mutex::new(t)))
    }

    pub fn set(&self, t: f64) {
        *self.0.lock().unwrap() = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.0.lock().unwrap() += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stimulus {
    Coords { coords: Vec<f64> },
    Media { url: String },
}

/// What a rater sees for one pair. Carries no hint of which slot is `+dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusPayload {
    pub query_id: String,
    pub a: Stimulus,
    pub b: Stimulus,
}

/// Turns a stimulus point into something presentable.
pub trait Renderer: Send + Sync {
    fn render(&self, query_id: &str, slot: Slot, point: &DataPoint) -> Stimulus;
}

/// Ships raw coordinates.
pub struct DebugRenderer;

impl Renderer for DebugRenderer {
    fn render(&self, _query_id: &str, _slot: Slot, point: &DataPoint) -> Stimulus {
        Stimulus::Coords {
            coords: point.coords().to_vec(),
        }
    }
}

/// Media URLs from an external renderer, e.g.
/// `https://media.example/{query_id}/{slot}.wav`.
pub struct UrlTemplateRenderer {
    pub template: String,
}

impl Renderer for UrlTemplateRenderer {
    fn render(&self, query_id: &str, slot: Slot, _point: &DataPoint) -> Stimulus {
        let slot = match slot {
            Slot::A => "a",
            Slot::B => "b",
        };
        Stimulus::Media {
            url: self.template.replace("{query_id}", query_id).replace("{slot}", slot),
        }
    }
}

#[derive(Clone)]
pub struct StoreConfig {
    pub session_ttl_secs: f64,
    pub swap_seed: u64,
    pub journal: Option<PathBuf>,
    pub renderer: Arc<dyn Renderer>,
    pub clock: Arc<dyn Clock>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            session_ttl_secs: DEFAULT_SESSION_TTL_SECS,
            swap_seed: rand::random(),
            journal: None,
            renderer: Arc::new(DebugRenderer),
            clock: Arc::new(SystemClock),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Drained,
    Completed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub rater_id: String,
    pub status: SessionStatus,
    pub query_ids: Vec<String>,
    pub completed: usize,
    pub created: f64,
    pub expires: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub rater_id: String,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRating {
    pub query_id: String,
    pub rating_a: f64,
    pub rating_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub query_id: String,
    pub session_completed: usize,
    pub session_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnqueueAck {
    pub added: usize,
    pub existing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pending: usize,
    pub assigned: usize,
    pub completed: usize,
    pub total: usize,
    /// Completed ratings per rater.
    pub raters: BTreeMap<String, usize>,
}

impl Progress {
    pub fn is_complete(&self) -> bool {
        self.total > 0 && self.completed == self.total
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEvent {
    Enqueue {
        query: PairQuery,
    },
    Reserve {
        session_id: String,
        rater_id: String,
        query_ids: Vec<String>,
        swapped: Vec<bool>,
        created: f64,
        expires: f64,
    },
    Response {
        session_id: String,
        response: PairResponse,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Pending,
    Assigned { session: String, swapped: bool },
    Completed,
}

struct Entry {
    query: PairQuery,
    status: Status,
}

struct Session {
    session_id: String,
    rater_id: String,
    query_ids: Vec<String>,
    completed: usize,
    created: f64,
    expires: f64,
    released: bool,
}

impl Session {
    fn status(&self, now: f64) -> SessionStatus {
        if self.query_ids.is_empty() {
            SessionStatus::Drained
        } else if self.completed == self.query_ids.len() {
            SessionStatus::Completed
        } else if self.released || now >= self.expires {
            SessionStatus::Expired
        } else {
            SessionStatus::Active
        }
    }

    fn info(&self, now: f64) -> SessionInfo {
        SessionInfo {
            session_id: self.session_id.clone(),
            rater_id: self.rater_id.clone(),
            status: self.status(now),
            query_ids: self.query_ids.clone(),
            completed: self.completed,
            created: self.created,
            expires: self.expires,
        }
    }
}

#[derive(Default)]
struct State {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    pending: BTreeSet<usize>,
    sessions: HashMap<String, Session>,
    responses: Vec<PairResponse>,
    raters: BTreeMap<String, usize>,
    reservations: u64,
    journal: Option<File>,
}

impl State {
    fn write(&mut self, event: &JournalEvent) -> Result<(), ServiceError> {
        if let Some(file) = self.journal.as_mut() {
            let mut line = serde_json::to_string(event).map_err(|e| ServiceError::Journal(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| ServiceError::Journal(e.to_string()))?;
        }
        Ok(())
    }

    fn apply(&mut self, event: JournalEvent) -> Result<(), ServiceError> {
        match event {
            JournalEvent::Enqueue { query } => {
                let idx = self.entries.len();
                self.index.insert(query.query_id.clone(), idx);
                self.entries.push(Entry {
                    query,
                    status: Status::Pending,
                });
                self.pending.insert(idx);
            }
            JournalEvent::Reserve {
                session_id,
                rater_id,
                query_ids,
                swapped,
                created,
                expires,
            } => {
                for (id, swapped) in query_ids.iter().zip(swapped) {
                    let idx = self.lookup(id)?;
                    self.pending.remove(&idx);
                    self.entries[idx].status = Status::Assigned {
                        session: session_id.clone(),
                        swapped,
                    };
                }
                self.reservations += 1;
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id,
                        rater_id,
                        query_ids,
                        completed: 0,
                        created,
                        expires,
                        released: false,
                    },
                );
            }
            JournalEvent::Response { session_id, response } => {
                let idx = self.lookup(&response.query_id)?;
                self.pending.remove(&idx);
                self.entries[idx].status = Status::Completed;
                if let Some(s) = self.sessions.get_mut(&session_id) {
                    s.completed += 1;
                }
                *self.raters.entry(response.rater_id.clone()).or_default() += 1;
                self.responses.push(response);
            }
        }
        Ok(())
    }

    fn lookup(&self, query_id: &str) -> Result<usize, ServiceError> {
        self.index
            .get(query_id)
            .copied()
            .ok_or_else(|| ServiceError::NotFound(format!("query {query_id}")))
    }

    /// Releases the unsubmitted queries of every session past its expiry.
    fn sweep(&mut self, now: f64) {
        let State {
            sessions,
            entries,
            pending,
            index,
            ..
        } = self;
        for s in sessions.values_mut().filter(|s| !s.released && now >= s.expires) {
            for id in &s.query_ids {
                let idx = index[id];
                if matches!(&entries[idx].status, Status::Assigned { session, .. } if *session == s.session_id) {
                    entries[idx].status = Status::Pending;
                    pending.insert(idx);
                }
            }
            s.released = true;
        }
    }
}

pub struct RatingStore {
    state: RwLock<State>,
    config: StoreConfig,
}

impl RatingStore {
    pub fn in_memory() -> Self {
        Self::open(StoreConfig::default()).expect("in-memory store has no journal to fail")
    }

    /// Opens the store, replaying the journal if it already exists.
    pub fn open(config: StoreConfig) -> Result<Self, ServiceError> {
        let mut state = State::default();
        if let Some(path) = &config.journal {
            if path.exists() {
                for event in read_journal(path)? {
                    state.apply(event)?;
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| ServiceError::Journal(format!("{}: {e}", path.display())))?;
            state.journal = Some(file);
        }
        Ok(RatingStore {
            state: RwLock::new(state),
            config,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn now(&self) -> f64 {
        self.config.clock.now()
    }

    /// Adds queries to the pending queue. Re-posting an identical query is a
    /// no-op; reusing an id for a different query is a conflict.
    pub fn enqueue(&self, queries: &[PairQuery]) -> Result<EnqueueAck, ServiceError> {
        let mut seen = HashSet::new();
        for q in queries {
            if !seen.insert(q.query_id.as_str()) {
                return Err(ServiceError::Validation(format!("duplicate query_id {}", q.query_id)));
            }
            if q.stim_plus.dim() != q.stim_minus.dim() {
                return Err(ServiceError::Validation(format!("stimulus dimensions differ in {}", q.query_id)));
            }
        }
        let mut state = self.state.write().unwrap();
        let mut fresh = Vec::new();
        for q in queries {
            match state.index.get(&q.query_id) {
                Some(&idx) if state.entries[idx].query == *q => {}
                Some(_) => {
                    return Err(ServiceError::Conflict(format!(
                        "query_id {} already holds a different query",
                        q.query_id
                    )))
                }
                None => fresh.push(q.clone()),
            }
        }
        let added = fresh.len();
        for query in fresh {
            let event = JournalEvent::Enqueue { query };
            state.write(&event)?;
            state.apply(event)?;
        }
        Ok(EnqueueAck {
            added,
            existing: queries.len() - added,
        })
    }

    /// Atomically reserves up to `batch_size` pending queries.
    pub fn create_session(&self, rater_id: &str, batch_size: usize) -> Result<SessionInfo, ServiceError> {
        if rater_id.trim().is_empty() {
            return Err(ServiceError::Validation("rater_id must be non-empty".into()));
        }
        if batch_size == 0 {
            return Err(ServiceError::Validation("batch_size must be >= 1".into()));
        }
        let now = self.now();
        let mut state = self.state.write().unwrap();
        state.sweep(now);
        let picked: Vec<usize> = state.pending.iter().take(batch_size).copied().collect();
        let mut coin = RngStream::new(self.config.swap_seed, "ab-swap").indexed(state.reservations);
        let swapped = picked.iter().map(|_| coin.uniform(0.0, 1.0) < 0.5).collect();
        let session_id = uuid::Uuid::new_v4().to_string();
        let event = JournalEvent::Reserve {
            session_id: session_id.clone(),
            rater_id: rater_id.to_string(),
            query_ids: picked.iter().map(|&i| state.entries[i].query.query_id.clone()).collect(),
            swapped,
            created: now,
            expires: now + self.config.session_ttl_secs,
        };
        state.write(&event)?;
        state.apply(event)?;
        Ok(state.sessions[&session_id].info(now))
    }

    pub fn session(&self, session_id: &str) -> Result<SessionInfo, ServiceError> {
        let state = self.state.read().unwrap();
        state
            .sessions
            .get(session_id)
            .map(|s| s.info(self.now()))
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))
    }

    /// Unrated pairs of an active session, in assignment order.
    pub fn tasks(&self, session_id: &str) -> Result<Vec<StimulusPayload>, ServiceError> {
        let now = self.now();
        let state = self.state.read().unwrap();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
        if session.status(now) == SessionStatus::Expired {
            return Err(ServiceError::NotFound(format!("session {session_id} has expired")));
        }
        let renderer = &self.config.renderer;
        let mut out = Vec::new();
        for id in &session.query_ids {
            let entry = &state.entries[state.index[id]];
            if let Status::Assigned { swapped, .. } = entry.status {
                let q = &entry.query;
                let (a, b) = if swapped {
                    (&q.stim_minus, &q.stim_plus)
                } else {
                    (&q.stim_plus, &q.stim_minus)
                };
                out.push(StimulusPayload {
                    query_id: id.clone(),
                    a: renderer.render(id, Slot::A, a),
                    b: renderer.render(id, Slot::B, b),
                });
            }
        }
        Ok(out)
    }

    /// Records one rated pair, mapping `(a, b)` back to `(plus, minus)`.
    pub fn submit_rating(&self, session_id: &str, rating: &SubmitRating) -> Result<SubmitAck, ServiceError> {
        let now = self.now();
        let mut state = self.state.write().unwrap();
        state.sweep(now);
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))?;
        let rater_id = session.rater_id.clone();
        let idx = state.lookup(&rating.query_id)?;
        if !session.query_ids.contains(&rating.query_id) {
            return Err(ServiceError::NotFound(format!(
                "query {} is not part of session {session_id}",
                rating.query_id
            )));
        }
        let swapped = match &state.entries[idx].status {
            Status::Completed => {
                return Err(ServiceError::Conflict(format!("query {} already rated", rating.query_id)))
            }
            Status::Assigned { session, swapped } if session == session_id => *swapped,
            _ => return Err(ServiceError::NotFound(format!("session {session_id} has expired"))),
        };
        for (name, r) in [("rating_a", rating.rating_a), ("rating_b", rating.rating_b)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(ServiceError::Validation(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        let a = quantize(rating.rating_a, RATING_QUANTUM);
        let b = quantize(rating.rating_b, RATING_QUANTUM);
        let (rating_plus, rating_minus) = if swapped { (b, a) } else { (a, b) };
        let event = JournalEvent::Response {
            session_id: session_id.to_string(),
            response: PairResponse {
                query_id: rating.query_id.clone(),
                rating_plus,
                rating_minus,
                rater_id,
                timestamp: now,
            },
        };
        state.write(&event)?;
        state.apply(event)?;
        let s = &state.sessions[session_id];
        Ok(SubmitAck {
            query_id: rating.query_id.clone(),
            session_completed: s.completed,
            session_remaining: s.query_ids.len() - s.completed,
        })
    }

    /// Counts as of now; queries held by expired sessions count as pending.
    pub fn progress(&self) -> Progress {
        let now = self.now();
        let state = self.state.read().unwrap();
        let (mut pending, mut assigned, mut completed) = (0, 0, 0);
        for e in &state.entries {
            match &e.status {
                Status::Pending => pending += 1,
                Status::Completed => completed += 1,
                Status::Assigned { session, .. } => {
                    if now >= state.sessions[session].expires {
                        pending += 1;
                    } else {
                        assigned += 1;
                    }
                }
            }
        }
        Progress {
            pending,
            assigned,
            completed,
            total: state.entries.len(),
            raters: state.raters.clone(),
        }
    }

    /// All collected responses in completion order.
    pub fn responses(&self) -> Vec<PairResponse> {
        self.state.read().unwrap().responses.clone()
    }

    /// Collected responses for the given ids, in the order of `ids`; ids
    /// without a response are skipped.
    pub fn responses_for(&self, ids: &[String]) -> Vec<PairResponse> {
        let state = self.state.read().unwrap();
        let by_id: HashMap<&str, &PairResponse> =
            state.responses.iter().map(|r| (r.query_id.as_str(), r)).collect();
        ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|r| (*r).clone())).collect()
    }
}

fn read_journal(path: &Path) -> Result<Vec<JournalEvent>, ServiceError> {
    let file = File::open(path).map_err(|e| ServiceError::Journal(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| ServiceError::Journal(e.to_string()))?;
    let mut events = Vec::with_capacity(lines.len());
    for (k, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            // a crash mid-append leaves at most one torn final line
            Err(_) if k + 1 == lines.len() => break,
            Err(e) => {
                return Err(ServiceError::Journal(format!(
                    "{} line {}: {e}",
                    path.display(),
                    k + 1
                )))
            }
        }
    }
    Ok(events)
}

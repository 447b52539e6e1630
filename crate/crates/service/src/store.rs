//! Session registry with optional on-disk event logs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use active_measure::variance::EstimateReport;

use crate::error::{ServiceError, ServiceResult};
use crate::events::{append_event, read_log, render_log, Event};
use crate::session::{CreateParams, PendingSample, Session, SessionSummary};

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Entry {
    // writers serialize on this lock
    session: Mutex<Session>,
    // last committed trajectory, readable while a writer works
    trajectory: RwLock<Arc<Vec<EstimateReport>>>,
    summary: RwLock<SessionSummary>,
}

/// Outcome of a next-sample request.
#[derive(Debug, Clone, PartialEq)]
pub enum Next {
    Pending(PendingSample),
    Exhausted(Option<EstimateReport>),
}

pub struct SessionStore {
    dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
}

impl SessionStore {
    /// Sessions kept in memory only.
    pub fn in_memory() -> Self {
        SessionStore {
            dir: None,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Sessions persisted under `dir`, restoring any logs already there.
    pub fn open(dir: impl Into<PathBuf>) -> ServiceResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            if let Some(session) = Session::from_events(read_log(&path)?)? {
                sessions.insert(session.id().to_string(), Arc::new(Self::entry(session)));
            }
        }
        Ok(SessionStore {
            dir: Some(dir),
            sessions: RwLock::new(sessions),
        })
    }

    fn entry(session: Session) -> Entry {
        Entry {
            trajectory: RwLock::new(Arc::new(session.trajectory().to_vec())),
            summary: RwLock::new(session.summary()),
            session: Mutex::new(session),
        }
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn get(&self, id: &str) -> ServiceResult<Arc<Entry>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn persist(&self, id: &str, event: &Event) -> ServiceResult<()> {
        if let Some(path) = self.log_path(id) {
            append_event(path, event)?;
        }
        Ok(())
    }

    fn commit(entry: &Entry, session: &Session) {
        *entry.trajectory.write().expect("trajectory poisoned") = Arc::new(session.trajectory().to_vec());
        *entry.summary.write().expect("summary poisoned") = session.summary();
    }

    /// Runs a prepared mutation: persist the event, then fold it in.
    fn mutate<T>(
        &self,
        id: &str,
        op: impl FnOnce(&mut Session, u64) -> ServiceResult<Option<Event>>,
        result: impl FnOnce(&Session) -> ServiceResult<T>,
    ) -> ServiceResult<T> {
        let entry = self.get(id)?;
        let mut session = entry.session.lock().expect("session poisoned");
        if let Some(event) = op(&mut session, now_ms())? {
            self.persist(id, &event)?;
            session.apply(event)?;
            Self::commit(&entry, &session);
        }
        result(&session)
    }

    pub fn create(&self, params: &CreateParams) -> ServiceResult<String> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let event = Session::prepare_create(&id, params, now_ms())?;
        self.persist(&id, &event)?;
        let session = Session::from_created(event)?;
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(Self::entry(session)));
        Ok(id)
    }

    pub fn next(&self, id: &str) -> ServiceResult<Next> {
        let drawn = self.mutate(id, |s, now| s.prepare_next(now), |s| Ok(s.pending().cloned()));
        match drawn {
            Ok(Some(p)) => Ok(Next::Pending(p)),
            Ok(None) => unreachable!("a sample is pending after prepare_next"),
            Err(ServiceError::Exhausted) => {
                let entry = self.get(id)?;
                let last = entry.trajectory.read().expect("trajectory poisoned").last().cloned();
                Ok(Next::Exhausted(last))
            }
            Err(e) => Err(e),
        }
    }

    pub fn label(&self, id: &str, unit_id: &str, value: f64) -> ServiceResult<EstimateReport> {
        self.mutate(
            id,
            |s, now| s.prepare_label(unit_id, value, now).map(Some),
            |s| Ok(s.trajectory().last().cloned().expect("a step was applied")),
        )
    }

    pub fn push_predictions(&self, id: &str, predictions: &BTreeMap<String, f64>) -> ServiceResult<usize> {
        self.mutate(
            id,
            |s, now| s.prepare_push(predictions, now).map(Some),
            |s| Ok(s.run().table_versions()),
        )
    }

    /// Last committed trajectory; does not wait for an in-flight writer.
    pub fn trajectory(&self, id: &str) -> ServiceResult<Arc<Vec<EstimateReport>>> {
        Ok(self.get(id)?.trajectory.read().expect("trajectory poisoned").clone())
    }

    pub fn summary(&self, id: &str) -> ServiceResult<SessionSummary> {
        Ok(self.get(id)?.summary.read().expect("summary poisoned").clone())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let map = self.sessions.read().expect("session map poisoned");
        let mut out: Vec<SessionSummary> = map
            .values()
            .map(|e| e.summary.read().expect("summary poisoned").clone())
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        out
    }

    /// The session's event log in JSON-lines form.
    pub fn export(&self, id: &str) -> ServiceResult<String> {
        let entry = self.get(id)?;
        let session = entry.session.lock().expect("session poisoned");
        Ok(render_log(session.events()))
    }

    pub fn pending(&self, id: &str) -> ServiceResult<Option<PendingSample>> {
        let entry = self.get(id)?;
        let session = entry.session.lock().expect("session poisoned");
        Ok(session.pending().cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{SessionConfig, UnitSpec};
    use active_measure::proposal::ClampPolicy;
    use active_measure::weights::WeightScheme;

    fn params() -> CreateParams {
        CreateParams {
            units: (0..6)
                .map(|i| UnitSpec {
                    id: format!("u{i}"),
                    payload_ref: String::new(),
                })
                .collect(),
            config: SessionConfig {
                scheme: WeightScheme::Lure,
                clamp: ClampPolicy::default(),
                level: 0.9,
                seed: 7,
            },
            predictions: None,
            uniform_fallback: true,
        }
    }

    fn label_next(store: &SessionStore, id: &str, v: f64) -> EstimateReport {
        let Next::Pending(p) = store.next(id).unwrap() else {
            panic!("exhausted")
        };
        store.label(id, &p.unit_id, v).unwrap()
    }

    #[test]
    fn restart_restores_pending_and_idle() {
        let dir = tempfile::tempdir().unwrap();
        let (id, pending, traj) = {
            let store = SessionStore::open(dir.path()).unwrap();
            let id = store.create(&params()).unwrap();
            label_next(&store, &id, 2.0);
            label_next(&store, &id, 3.0);
            let Next::Pending(p) = store.next(&id).unwrap() else {
                panic!()
            };
            let traj = store.trajectory(&id).unwrap();
            (id, p, traj)
        };
        let store = SessionStore::open(dir.path()).unwrap();
        assert_eq!(store.trajectory(&id).unwrap(), traj);
        assert_eq!(store.pending(&id).unwrap(), Some(pending.clone()));
        let Next::Pending(again) = store.next(&id).unwrap() else {
            panic!()
        };
        assert_eq!(again, pending);
        assert_eq!(store.list().len(), 1);
    }

    #[test]
    fn exhaustion_reports_final_total() {
        let store = SessionStore::in_memory();
        let id = store.create(&params()).unwrap();
        for _ in 0..6 {
            label_next(&store, &id, 1.5);
        }
        match store.next(&id).unwrap() {
            Next::Exhausted(Some(r)) => assert_eq!(r.estimate, 9.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_session() {
        let store = SessionStore::in_memory();
        assert!(matches!(store.next("nope"), Err(ServiceError::NotFound(_))));
        assert!(matches!(store.trajectory("nope"), Err(ServiceError::NotFound(_))));
    }

    #[test]
    fn rejected_label_leaves_log_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let id = store.create(&params()).unwrap();
        store.next(&id).unwrap();
        let before = store.export(&id).unwrap();
        assert!(store.label(&id, "zz", 1.0).is_err());
        assert_eq!(store.export(&id).unwrap(), before);
        let on_disk = fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
        assert_eq!(on_disk, before);
    }
}

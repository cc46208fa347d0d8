use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dlmap_core::compare::{append_choices, read_choices, ChoiceMatrix, ChoiceRecord, Side};
use dlmap_core::ImageGrid;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::schedule::{build_pairs, observer_seed, schedule, Assignment, DisplayMetadata, Pair, StudySpec, Stimulus, Trial};

const STUDY_FILE: &str = "study.json";
const SESSIONS_FILE: &str = "sessions.jsonl";
const LOG_FILE: &str = "choices.csv";

struct Study {
    id: String,
    spec: StudySpec,
    dir: PathBuf,
    /// Scored then practice stimuli, as stored PNG bytes and `(width, height)`.
    images: Vec<(Arc<Vec<u8>>, (usize, usize))>,
    pairs: Vec<Pair>,
    models: Vec<String>,
    observers: Mutex<Vec<String>>,
    log: Mutex<()>,
}

impl Study {
    fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    fn ordinal(&self, observer_id: &str) -> usize {
        let mut seen = self.observers.lock().expect("observer registry poisoned");
        match seen.iter().position(|o| o == observer_id) {
            Some(n) => n,
            None => {
                seen.push(observer_id.to_string());
                seen.len() - 1
            }
        }
    }
}

struct Session {
    id: String,
    study: Arc<Study>,
    observer_id: String,
    seed: u64,
    trials: Vec<Trial>,
    n_training: usize,
    cursor: usize,
    paused: bool,
    shown_at: Option<Instant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Training,
    Active,
    Paused,
    Done,
}

impl Session {
    fn status(&self) -> SessionStatus {
        if self.cursor == self.trials.len() {
            SessionStatus::Done
        } else if self.paused {
            SessionStatus::Paused
        } else if self.cursor < self.n_training {
            SessionStatus::Training
        } else {
            SessionStatus::Active
        }
    }

    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            study_id: self.study.id.clone(),
            observer_id: self.observer_id.clone(),
            seed: self.seed,
            status: self.status(),
            cursor: self.cursor,
            total: self.trials.len(),
            training_trials: self.n_training,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyInfo {
    pub study_id: String,
    pub name: String,
    pub models: Vec<String>,
    pub pairs: usize,
    pub training_pairs: usize,
    pub metadata: DisplayMetadata,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSession {
    pub study_id: String,
    pub observer_id: String,
    /// Overrides the observer's default schedule seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub study_id: String,
    pub observer_id: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub cursor: usize,
    pub total: usize,
    pub training_trials: usize,
}

/// What an observer sees: two opaque image URLs, never model identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialView {
    pub trial_index: usize,
    pub total: usize,
    pub training: bool,
    pub left_url: String,
    pub right_url: String,
    pub left_size: (usize, usize),
    pub right_size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextPair {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<TrialView>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceRequest {
    pub trial_index: usize,
    /// `"left"` or `"right"`; kept as text so a bad value is a contract
    /// violation rather than a decoding failure.
    pub side: String,
    #[serde(default)]
    pub response_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub trial_index: usize,
    pub excluded: bool,
    pub cursor: usize,
    pub status: SessionStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedMatrix {
    pub models: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub trials: u64,
}

impl From<&ChoiceMatrix> for ExportedMatrix {
    fn from(m: &ChoiceMatrix) -> Self {
        ExportedMatrix {
            models: m.models().to_vec(),
            counts: m.counts().to_vec(),
            trials: m.total_trials(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SessionEntry {
    session_id: String,
    observer_id: String,
    seed: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn id_number(id: &str) -> u64 {
    id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(0)
}

/// All studies and sessions of one data directory. The per-study choice log
/// is the source of truth; sessions are replayed from it on [`open`].
///
/// [`open`]: StudyService::open
pub struct StudyService {
    root: PathBuf,
    studies: RwLock<BTreeMap<String, Arc<Study>>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl StudyService {
    /// Serve from `root`, restoring any studies and sessions already there.
    pub fn open(root: impl Into<PathBuf>) -> ServiceResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let service = StudyService {
            root,
            studies: RwLock::default(),
            sessions: RwLock::default(),
            next_id: AtomicU64::new(1),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&service.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(STUDY_FILE).is_file())
            .collect();
        dirs.sort_by_key(|d| id_number(&d.file_name().unwrap_or_default().to_string_lossy()));
        for dir in dirs {
            service.restore(&dir)?;
        }
        Ok(service)
    }

    fn fresh_id(&self, kind: &str) -> String {
        format!("{kind}-{}", self.next_id.fetch_add(1, Ordering::SeqCst))
    }

    fn bump_past(&self, id: &str) {
        self.next_id.fetch_max(id_number(id) + 1, Ordering::SeqCst);
    }

    fn restore(&self, dir: &Path) -> ServiceResult<()> {
        let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let spec: StudySpec = serde_json::from_slice(&fs::read(dir.join(STUDY_FILE))?)
            .map_err(|e| ServiceError::Invalid(format!("{}: {e}", dir.display())))?;
        let study = Arc::new(load_study(id.clone(), spec, dir.to_path_buf())?);
        self.bump_past(&id);
        let records = match study.log_path().exists() {
            true => read_choices(study.log_path())?,
            false => Vec::new(),
        };
        let sessions_path = dir.join(SESSIONS_FILE);
        if sessions_path.exists() {
            for line in BufReader::new(fs::File::open(&sessions_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: SessionEntry = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::Invalid(format!("{}: {e}", sessions_path.display())))?;
                let mut session = new_session(&study, entry.session_id.clone(), entry.observer_id, entry.seed)?;
                session.cursor = records.iter().filter(|r| r.session_id == entry.session_id).count().min(session.trials.len());
                self.bump_past(&entry.session_id);
                self.sessions.write().expect("session table poisoned").insert(entry.session_id, Arc::new(Mutex::new(session)));
            }
        }
        self.studies.write().expect("study table poisoned").insert(id, study);
        Ok(())
    }

    /// Validate a study, copy its images into the data directory and
    /// persist it.
    pub fn create_study(&self, spec: StudySpec) -> ServiceResult<StudyInfo> {
        if spec.stimuli.is_empty() {
            return Err(ServiceError::Invalid("a study needs stimuli".into()));
        }
        let id = self.fresh_id("study");
        let dir = self.root.join(&id);
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let result = (|| {
            let mut stored = spec.clone();
            let all = stored.stimuli.iter_mut().chain(stored.training.iter_mut());
            for (k, s) in all.enumerate() {
                let bytes = fs::read(&s.path).map_err(|e| ServiceError::Invalid(format!("{}: {e}", s.path.display())))?;
                let target = images.join(format!("{k}.png"));
                fs::write(&target, bytes)?;
                s.path = target;
            }
            let study = load_study(id.clone(), stored, dir.clone())?;
            fs::write(dir.join(STUDY_FILE), serde_json::to_vec_pretty(&study.spec).expect("spec serialises"))?;
            Ok(study)
        })();
        let study = match result {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir);
                return Err(e);
            }
        };
        let info = info(&study);
        log::info!("created {} with {} pairs", id, info.pairs);
        self.studies.write().expect("study table poisoned").insert(id, Arc::new(study));
        Ok(info)
    }

    fn study(&self, id: &str) -> ServiceResult<Arc<Study>> {
        self.studies
            .read()
            .expect("study table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("study {id}")))
    }

    fn session(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn study_info(&self, id: &str) -> ServiceResult<StudyInfo> {
        Ok(info(&*self.study(id)?))
    }

    pub fn list_studies(&self) -> Vec<StudyInfo> {
        self.studies.read().expect("study table poisoned").values().map(|s| info(s)).collect()
    }

    pub fn create_session(&self, req: NewSession) -> ServiceResult<SessionView> {
        let study = self.study(&req.study_id)?;
        if req.observer_id.trim().is_empty() {
            return Err(ServiceError::Contract("observer id must not be empty".into()));
        }
        let seed = req.seed.unwrap_or_else(|| observer_seed(study.spec.seed, &req.observer_id));
        let id = self.fresh_id("session");
        let session = new_session(&study, id.clone(), req.observer_id.clone(), seed)?;
        let entry = SessionEntry {
            session_id: id.clone(),
            observer_id: req.observer_id,
            seed,
        };
        {
            let _guard = study.log.lock().expect("log lock poisoned");
            let mut f = OpenOptions::new().create(true).append(true).open(study.dir.join(SESSIONS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&entry).expect("entry serialises"))?;
        }
        let view = session.view();
        self.sessions.write().expect("session table poisoned").insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn session_view(&self, id: &str) -> ServiceResult<SessionView> {
        Ok(self.session(id)?.lock().expect("session poisoned").view())
    }

    /// The pending trial, unchanged until a choice is recorded.
    pub fn next_pair(&self, id: &str) -> ServiceResult<NextPair> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        match s.status() {
            SessionStatus::Done => return Ok(NextPair { done: true, trial: None }),
            SessionStatus::Paused => return Err(ServiceError::Conflict(format!("session {id} is paused"))),
            _ => {}
        }
        if s.shown_at.is_none() {
            s.shown_at = Some(Instant::now());
        }
        let trial = s.trials[s.cursor];
        let pair = &s.study.pairs[trial.pair];
        let (left, right) = if trial.swap { (pair.stim_b, pair.stim_a) } else { (pair.stim_a, pair.stim_b) };
        let url = |k: usize| format!("/studies/{}/images/{k}.png", s.study.id);
        Ok(NextPair {
            done: false,
            trial: Some(TrialView {
                trial_index: s.cursor,
                total: s.trials.len(),
                training: pair.training,
                left_url: url(left),
                right_url: url(right),
                left_size: s.study.images[left].1,
                right_size: s.study.images[right].1,
            }),
        })
    }

    /// Append the observer's answer to the log and advance. Only the pending
    /// trial can be answered; practice answers are logged as excluded.
    pub fn record_choice(&self, id: &str, req: ChoiceRequest) -> ServiceResult<Acknowledgment> {
        let side: Side = req.side.parse()?;
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        match s.status() {
            SessionStatus::Done => return Err(ServiceError::Conflict(format!("session {id} is finished"))),
            SessionStatus::Paused => return Err(ServiceError::Conflict(format!("session {id} is paused"))),
            _ => {}
        }
        if req.trial_index != s.cursor {
            return Err(ServiceError::Conflict(format!("trial {} is not pending; the current trial is {}", req.trial_index, s.cursor)));
        }
        let trial = s.trials[s.cursor];
        let pair = &s.study.pairs[trial.pair];
        let (left, right) = if trial.swap { (&pair.model_b, &pair.model_a) } else { (&pair.model_a, &pair.model_b) };
        let measured = s.shown_at.map(|t| t.elapsed().as_millis() as u64);
        let record = ChoiceRecord {
            trial_id: s.cursor as u64,
            pair_id: pair.pair_id.clone(),
            left_model: left.clone(),
            right_model: right.clone(),
            chosen_side: side,
            observer_id: s.observer_id.clone(),
            timestamp: now_ms(),
            session_id: s.id.clone(),
            response_ms: req.response_ms.or(measured),
            excluded: pair.training,
        };
        {
            let _guard = s.study.log.lock().expect("log lock poisoned");
            append_choices(s.study.log_path(), std::slice::from_ref(&record))?;
        }
        s.cursor += 1;
        s.shown_at = None;
        Ok(Acknowledgment {
            trial_index: req.trial_index,
            excluded: record.excluded,
            cursor: s.cursor,
            status: s.status(),
        })
    }

    pub fn pause(&self, id: &str) -> ServiceResult<SessionView> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        if s.status() == SessionStatus::Done {
            return Err(ServiceError::Conflict(format!("session {id} is finished")));
        }
        s.paused = true;
        s.shown_at = None;
        Ok(s.view())
    }

    pub fn resume(&self, id: &str) -> ServiceResult<SessionView> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        if s.status() == SessionStatus::Done {
            return Err(ServiceError::Conflict(format!("session {id} is finished and cannot be resumed")));
        }
        s.paused = false;
        Ok(s.view())
    }

    /// Every record of a study's log, practice included.
    pub fn trial_log(&self, study_id: &str) -> ServiceResult<Vec<ChoiceRecord>> {
        let study = self.study(study_id)?;
        let _guard = study.log.lock().expect("log lock poisoned");
        match study.log_path().exists() {
            true => Ok(read_choices(study.log_path())?),
            false => Ok(Vec::new()),
        }
    }

    pub fn log_path(&self, study_id: &str) -> ServiceResult<PathBuf> {
        Ok(self.study(study_id)?.log_path())
    }

    /// Win counts over all sessions' scored trials, computed from the log
    /// alone.
    pub fn export_choice_matrix(&self, study_id: &str) -> ServiceResult<ChoiceMatrix> {
        let study = self.study(study_id)?;
        let records = self.trial_log(study_id)?;
        if records.iter().all(|r| r.excluded) {
            return Err(ServiceError::EmptyExport(format!("study {study_id} has no scored trials yet")));
        }
        Ok(ChoiceMatrix::from_records(&records, Some(&study.models))?)
    }

    /// A stored stimulus as PNG bytes.
    pub fn image(&self, study_id: &str, index: usize) -> ServiceResult<Arc<Vec<u8>>> {
        let study = self.study(study_id)?;
        study
            .images
            .get(index)
            .map(|(b, _)| b.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("image {index} of study {study_id}")))
    }
}

fn info(study: &Study) -> StudyInfo {
    StudyInfo {
        study_id: study.id.clone(),
        name: study.spec.name.clone(),
        models: study.models.clone(),
        pairs: study.pairs.iter().filter(|p| !p.training).count(),
        training_pairs: study.pairs.iter().filter(|p| p.training).count(),
        metadata: study.spec.metadata.clone(),
    }
}

fn load_study(id: String, spec: StudySpec, dir: PathBuf) -> ServiceResult<Study> {
    let all: Vec<&Stimulus> = spec.stimuli.iter().chain(&spec.training).collect();
    let mut images = Vec::with_capacity(all.len());
    for s in all {
        let bytes = fs::read(&s.path).map_err(|e| ServiceError::Invalid(format!("{}: {e}", s.path.display())))?;
        let grid = ImageGrid::from_png_bytes(&bytes)
            .map_err(|e| ServiceError::Invalid(format!("{} is not a readable PNG: {e}", s.path.display())))?;
        images.push((Arc::new(bytes), (grid.width(), grid.height())));
    }
    let mut pairs = build_pairs(&spec.stimuli, 0, false)?;
    pairs.extend(build_pairs(&spec.training, spec.stimuli.len(), true)?);
    let mut models: Vec<String> = spec.stimuli.iter().map(|s| s.model.clone()).collect();
    models.sort();
    models.dedup();
    if let Assignment::Split { groups } = spec.assignment {
        let scored = pairs.iter().filter(|p| !p.training).count();
        if groups == 0 || groups > scored {
            // some observers would get no scored trials at all
            return Err(ServiceError::Invalid(format!("cannot split {scored} pairs into {groups} groups")));
        }
    }
    Ok(Study {
        id,
        spec,
        dir,
        images,
        pairs,
        models,
        observers: Mutex::default(),
        log: Mutex::default(),
    })
}

fn new_session(study: &Arc<Study>, id: String, observer_id: String, seed: u64) -> ServiceResult<Session> {
    let ordinal = study.ordinal(&observer_id);
    let trials = schedule(&study.pairs, study.spec.seed, seed, ordinal, study.spec.assignment)?;
    let n_training = trials.iter().take_while(|t| study.pairs[t.pair].training).count();
    Ok(Session {
        id,
        study: study.clone(),
        observer_id,
        seed,
        trials,
        n_training,
        cursor: 0,
        paused: false,
        shown_at: None,
    })
}

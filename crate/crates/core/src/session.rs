//! One enhancement session: the source image, its normalised and working
//! copies, the current intensities and the optimisation history.
//!
//! The optimisation loop only ever sees the 224x224 working image; the
//! normalised full-resolution image is touched by [`Session::render`] alone.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assessor::{AssessorKind, QualityAssessor, ASSESSMENT_SIZE};
use crate::error::{Error, Result};
use crate::filters::{self, build_context, FilterId, ImageContext, ParamVector};
use crate::image::{resize, ImageBuffer};
use crate::metrics::perceived_brightness;
use crate::normalization::{abn, AbnAction, AbnConfig, AbnReport};
use crate::optimizer::{self, IterationRecord, Observer, OnIteration, OptimizerConfig, OptimizerState, ParamEdit, Problem, StopReason, Steering};

pub const SCHEMA_VERSION: u32 = 1;
const STATE_FILE: &str = "session.json";
const ORIGINAL_FILE: &str = "original.png";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub abn: bool,
    pub abn_config: AbnConfig,
    pub assessor: AssessorKind,
    pub optimizer: OptimizerConfig,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            abn: true,
            abn_config: AbnConfig::default(),
            assessor: AssessorKind::Proxy,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Optimizing,
    Done,
    Error(String),
}

pub struct Session {
    id: String,
    options: SessionOptions,
    original: ImageBuffer,
    render_source: RenderSource,
    working: ImageBuffer,
    working_ctx: ImageContext,
    assessor: Box<dyn QualityAssessor>,
    params: ParamVector,
    cfg: OptimizerConfig,
    state: OptimizerState,
    status: Status,
    history: Vec<IterationRecord>,
    abn_report: AbnReport,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("status", &self.status)
            .field("params", &self.params)
            .field("history", &self.history.len())
            .finish()
    }
}

/// The normalised full-resolution image and its filter context, shareable
/// with renderers that run outside the session lock.
#[derive(Clone, Debug)]
pub struct RenderSource {
    normalized: Arc<ImageBuffer>,
    ctx: Arc<ImageContext>,
}

impl RenderSource {
    pub fn image(&self) -> &ImageBuffer {
        &self.normalized
    }

    pub fn render_image(&self, params: &ParamVector) -> Result<ImageBuffer> {
        filters::apply(&self.normalized, params, &self.ctx)
    }

    pub fn render(&self, params: &ParamVector) -> Result<Vec<u8>> {
        self.render_image(params)?.encode_png()
    }
}

struct Prepared {
    render_source: RenderSource,
    working: ImageBuffer,
    working_ctx: ImageContext,
    abn_report: AbnReport,
    assessor: Box<dyn QualityAssessor>,
}

fn prepare(original: &ImageBuffer, options: &SessionOptions) -> Result<Prepared> {
    if original.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (normalized, abn_report) = if options.abn {
        abn(original, &options.abn_config)?
    } else {
        let p = perceived_brightness(original)?;
        (original.clone(), AbnReport::unchanged(p, AbnAction::None, options.abn_config.seed))
    };
    let working = resize(&normalized, ASSESSMENT_SIZE, ASSESSMENT_SIZE)?;
    Ok(Prepared {
        working_ctx: build_context(&working)?,
        render_source: RenderSource {
            ctx: Arc::new(build_context(&normalized)?),
            normalized: Arc::new(normalized),
        },
        working,
        abn_report,
        assessor: options.assessor.build()?,
    })
}

struct Recorder<'h, O> {
    history: &'h mut Vec<IterationRecord>,
    inner: O,
}

impl<O: Observer> Observer for Recorder<'_, O> {
    fn before_record(&mut self, steering: &mut Steering<'_>) {
        self.inner.before_record(steering)
    }

    fn on_iteration(&mut self, record: &IterationRecord, steering: &mut Steering<'_>) {
        self.history.push(record.clone());
        self.inner.on_iteration(record, steering)
    }
}

impl Session {
    /// Decode PNG or JPEG bytes and start a session.
    pub fn create(id: impl Into<String>, bytes: &[u8], options: SessionOptions) -> Result<Self> {
        Self::from_image(id, ImageBuffer::decode(bytes)?, options)
    }

    /// Start a session from decoded pixels. The image is quantised to 8 bits
    /// so that a persisted session reloads exactly.
    pub fn from_image(id: impl Into<String>, image: ImageBuffer, options: SessionOptions) -> Result<Self> {
        options.optimizer.validate()?;
        if image.is_empty() {
            return Err(Error::EmptyInput);
        }
        let original = ImageBuffer::from_rgb8(&image.to_rgb8());
        let prepared = prepare(&original, &options)?;
        let mut session = Session {
            id: id.into(),
            cfg: options.optimizer.clone(),
            options,
            original,
            render_source: prepared.render_source,
            working: prepared.working,
            working_ctx: prepared.working_ctx,
            assessor: prepared.assessor,
            params: ParamVector::zero(),
            state: OptimizerState::default(),
            status: Status::Idle,
            history: Vec::new(),
            abn_report: prepared.abn_report,
        };
        let initial = session.evaluate(&session.params)?;
        session.state.last_loss = Some(initial.loss);
        session.history.push(initial);
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn options(&self) -> &SessionOptions {
        &self.options
    }

    pub fn status(&self) -> &Status {
        &self.status
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn abn_report(&self) -> &AbnReport {
        &self.abn_report
    }

    pub fn original(&self) -> &ImageBuffer {
        &self.original
    }

    pub fn normalized(&self) -> &ImageBuffer {
        self.render_source.image()
    }

    pub fn render_source(&self) -> RenderSource {
        self.render_source.clone()
    }

    pub fn working(&self) -> &ImageBuffer {
        &self.working
    }

    pub fn working_context(&self) -> &ImageContext {
        &self.working_ctx
    }

    pub fn assessor(&self) -> &dyn QualityAssessor {
        self.assessor.as_ref()
    }

    fn problem(&self) -> Problem<'_> {
        Problem {
            assessor: self.assessor.as_ref(),
            image: &self.working,
            ctx: &self.working_ctx,
        }
    }

    /// Loss record for `params` at the current gamma, numbered as the latest
    /// iteration.
    pub fn evaluate(&self, params: &ParamVector) -> Result<IterationRecord> {
        let (breakdown, assessment) = optimizer::loss(&self.problem(), params, self.cfg.gamma, &self.cfg.target)?;
        Ok(IterationRecord::new(self.state.iteration, *params, self.cfg.gamma, breakdown, &assessment))
    }

    /// Apply a batch of edits atomically. Edited intensities restart with
    /// zero velocity. Returns the touched filters.
    pub fn set_params(&mut self, edit: &ParamEdit) -> Result<Vec<FilterId>> {
        let touched = edit.apply(&mut self.params, &mut self.cfg.gamma)?;
        for id in &touched {
            self.state.velocity[id.index()] = 0.0;
        }
        Ok(touched)
    }

    /// Run up to `steps` iterations (default: the configured budget). Every
    /// record is appended to the history before `on_iteration` sees it.
    pub fn optimize<F>(&mut self, steps: Option<usize>, on_iteration: F) -> Result<StopReason>
    where
        F: FnMut(&IterationRecord, &mut Steering<'_>),
    {
        self.optimize_observed(steps, OnIteration(on_iteration))
    }

    /// [`Self::optimize`] with an observer that can also edit before each
    /// record.
    pub fn optimize_observed<O: Observer>(&mut self, steps: Option<usize>, observer: O) -> Result<StopReason> {
        match &self.status {
            Status::Optimizing => return Err(Error::Busy),
            Status::Error(msg) => return Err(Error::InvalidState(format!("session failed: {msg}"))),
            Status::Idle | Status::Done => {}
        }
        let steps = steps.unwrap_or(self.cfg.max_steps);
        self.status = Status::Optimizing;
        let problem = Problem {
            assessor: self.assessor.as_ref(),
            image: &self.working,
            ctx: &self.working_ctx,
        };
        let recorder = Recorder {
            history: &mut self.history,
            inner: observer,
        };
        let outcome = optimizer::run_observed(&problem, &mut self.params, &mut self.state, &mut self.cfg, steps, recorder);
        self.status = match &outcome {
            Ok(StopReason::Stopped) => Status::Idle,
            Ok(_) => Status::Done,
            Err(e) => Status::Error(e.to_string()),
        };
        outcome
    }

    /// Full-resolution result for the current intensities.
    pub fn render_image(&self) -> Result<ImageBuffer> {
        if let Status::Error(msg) = &self.status {
            return Err(Error::InvalidState(format!("session failed: {msg}")));
        }
        self.render_source.render_image(&self.params)
    }

    pub fn render(&self) -> Result<Vec<u8>> {
        self.render_image()?.encode_png()
    }

    /// Working-resolution PNG for `params`.
    pub fn preview(&self, params: &ParamVector) -> Result<Vec<u8>> {
        filters::apply(&self.working, params, &self.working_ctx)?.encode_png()
    }

    /// Write `session.json` and `original.png` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        if self.status == Status::Optimizing {
            return Err(Error::Busy);
        }
        fs::create_dir_all(dir)?;
        let state = PersistedSession {
            schema_version: SCHEMA_VERSION,
            id: self.id.clone(),
            options: self.options.clone(),
            config: self.cfg.clone(),
            k: self.params,
            optimizer_state: self.state.clone(),
            status: self.status.clone(),
            history: self.history.clone(),
            abn_report: self.abn_report.clone(),
        };
        let json = serde_json::to_vec_pretty(&state).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(dir.join(ORIGINAL_FILE), self.original.encode_png()?)?;
        fs::write(dir.join(STATE_FILE), json)?;
        Ok(())
    }

    /// Read a session written by [`Session::persist`]. Derived images are
    /// recomputed from the stored original.
    pub fn load(dir: &Path) -> Result<Self> {
        let json = fs::read(dir.join(STATE_FILE))?;
        let raw: serde_json::Value = serde_json::from_slice(&json).map_err(|e| Error::Schema(e.to_string()))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::Schema(format!("unsupported schema version {v}"))),
            None => return Err(Error::Schema("missing schema_version".into())),
        }
        let state: PersistedSession = serde_json::from_value(raw).map_err(|e| Error::Schema(e.to_string()))?;
        state.config.validate()?;
        let original = ImageBuffer::decode(&fs::read(dir.join(ORIGINAL_FILE))?)?;
        let prepared = prepare(&original, &state.options)?;
        Ok(Session {
            id: state.id,
            options: state.options,
            original,
            render_source: prepared.render_source,
            working: prepared.working,
            working_ctx: prepared.working_ctx,
            assessor: prepared.assessor,
            params: state.k,
            cfg: state.config,
            state: state.optimizer_state,
            status: match state.status {
                Status::Optimizing => Status::Idle,
                s => s,
            },
            history: state.history,
            abn_report: state.abn_report,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersistedSession {
    schema_version: u32,
    id: String,
    options: SessionOptions,
    config: OptimizerConfig,
    k: ParamVector,
    optimizer_state: OptimizerState,
    status: Status,
    history: Vec<IterationRecord>,
    abn_report: AbnReport,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn photo() -> ImageBuffer {
        ImageBuffer::from_fn(96, 64, |x, y| {
            let t = (x as f64 / 95.0) * 0.4 + 0.1;
            [t + 0.05 * ((y / 8) % 2) as f64, t * 0.9, 0.3 - t * 0.2]
        })
    }

    fn session() -> Session {
        Session::from_image("s", photo(), SessionOptions::default()).unwrap()
    }

    #[test]
    fn create_initialises() {
        let s = session();
        assert!(s.params().is_zero());
        assert_eq!(s.status(), &Status::Idle);
        assert_eq!(s.history().len(), 1);
        assert_eq!(s.history()[0].iteration, 0);
        assert_eq!((s.working().width(), s.working().height()), (224, 224));
    }

    #[test]
    fn create_rejects_garbage() {
        let err = Session::create("x", b"definitely not an image", SessionOptions::default()).unwrap_err();
        assert!(err.to_string().starts_with("unsupported image"));
    }

    #[test]
    fn abn_can_be_disabled() {
        let options = SessionOptions { abn: false, ..SessionOptions::default() };
        let s = Session::from_image("s", photo(), options).unwrap();
        assert_eq!(s.normalized(), s.original());
        assert_eq!(s.abn_report().action, AbnAction::None);
    }

    #[test]
    fn set_params_is_atomic() {
        let mut s = session();
        s.set_params(&ParamEdit { set: vec![(FilterId::Sat, 0.2)], fix: vec![FilterId::Sat], ..Default::default() })
            .unwrap();
        let before = *s.params();
        let err = s
            .set_params(&ParamEdit { set: vec![(FilterId::Bri, 0.3), (FilterId::Nld, -0.5)], ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, Error::ParameterOutOfBounds { filter: FilterId::Nld, .. }));
        assert_eq!(*s.params(), before);
    }

    #[test]
    fn optimize_zero_steps_is_done() {
        let mut s = session();
        s.optimize(Some(0), |_, _| {}).unwrap();
        assert_eq!(s.status(), &Status::Done);
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn optimize_respects_fix_and_stop() {
        let mut s = session();
        s.set_params(&ParamEdit { set: vec![(FilterId::Sat, 0.2)], fix: vec![FilterId::Sat], ..Default::default() })
            .unwrap();
        let reason = s.optimize(Some(10), |r, st| if r.iteration == 4 { st.stop() }).unwrap();
        assert_eq!(reason, StopReason::Stopped);
        assert_eq!(s.status(), &Status::Idle);
        assert_eq!(s.history().len(), 5);
        assert!(s.history().iter().all(|r| r.k.get(FilterId::Sat) == 0.2 || r.iteration == 0));
        assert!(s.history().windows(2).all(|w| w[0].iteration < w[1].iteration));
    }

    #[test]
    fn render_matches_direct_apply_and_is_stable() {
        let mut s = session();
        s.set_params(&ParamEdit { set: vec![(FilterId::Bri, 0.5)], ..Default::default() }).unwrap();
        let direct = filters::apply(s.normalized(), s.params(), &build_context(s.normalized()).unwrap()).unwrap();
        assert_eq!(s.render_image().unwrap(), direct);
        assert_eq!(s.render().unwrap(), s.render().unwrap());
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = session();
        s.set_params(&ParamEdit { set: vec![(FilterId::Con, 0.1 + 0.2)], ..Default::default() }).unwrap();
        s.optimize(Some(3), |_, _| {}).unwrap();
        s.persist(dir.path()).unwrap();
        let back = Session::load(dir.path()).unwrap();
        assert_eq!(back.params(), s.params());
        assert_eq!(back.history(), s.history());
        assert_eq!(back.config(), s.config());
        assert_eq!(back.optimizer_state(), s.optimizer_state());
        assert_eq!(back.render().unwrap(), s.render().unwrap());
    }

    #[test]
    fn tampered_state_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        session().persist(dir.path()).unwrap();
        let path = dir.path().join(STATE_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("k");
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(Session::load(dir.path()), Err(Error::Schema(_))));
        v["schema_version"] = 7.into();
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(Session::load(dir.path()), Err(Error::Schema(_))));
    }
}

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, RwLock};

use photoloop_core::api::{EventKind, OptimizeAccepted, ParamSource, SessionState};
use photoloop_core::filters::{self, ImageContext};
use photoloop_core::optimizer::{IterationRecord, Observer, ParamEdit, Steering, StopReason};
use photoloop_core::session::{RenderSource, Session, Status};
use photoloop_core::{Error, ImageBuffer, ParamVector, Result};

use crate::events::EventQueue;

struct Control {
    running: bool,
    pending: ParamEdit,
    /// Tickets of edits queued during a run, and the last one the run took.
    submitted: u64,
    captured: u64,
    /// Session state as of the last capture.
    captured_view: Option<SessionState>,
}

struct Previews {
    next: u64,
    capacity: usize,
    images: VecDeque<(u64, Vec<u8>)>,
}

/// Shared state of one live session. The session itself is locked by an
/// optimisation run for its whole duration; readers use the published
/// snapshot and edits go through the pending queue.
pub struct SessionHandle {
    id: String,
    session: Mutex<Session>,
    view: RwLock<SessionState>,
    control: Mutex<Control>,
    captured: Condvar,
    stop: AtomicBool,
    previews: Mutex<Previews>,
    render_source: RenderSource,
    working: ImageBuffer,
    working_ctx: ImageContext,
    pub events: EventQueue,
}

impl SessionHandle {
    pub fn new(session: Session, preview_capacity: usize) -> Self {
        let id = session.id().to_string();
        SessionHandle {
            view: RwLock::new(SessionState::of(&session)),
            render_source: session.render_source(),
            working: session.working().clone(),
            working_ctx: session.working_context().clone(),
            events: EventQueue::new(id.clone(), preview_capacity),
            control: Mutex::new(Control {
                running: false,
                pending: ParamEdit::default(),
                submitted: 0,
                captured: 0,
                captured_view: None,
            }),
            captured: Condvar::new(),
            stop: AtomicBool::new(false),
            previews: Mutex::new(Previews {
                next: 0,
                capacity: preview_capacity.max(1),
                images: VecDeque::new(),
            }),
            session: Mutex::new(session),
            id,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> SessionState {
        self.view.read().unwrap().clone()
    }

    fn publish(&self, session: &Session) {
        *self.view.write().unwrap() = SessionState::of(session);
    }

    /// Render and store a working-resolution preview, then announce it.
    fn emit_preview(&self, iteration: usize, params: &ParamVector) {
        let png = match filters::apply(&self.working, params, &self.working_ctx).and_then(|img| img.encode_png()) {
            Ok(png) => png,
            Err(e) => {
                tracing::warn!(session = %self.id, "preview failed: {e}");
                return;
            }
        };
        let n = {
            let mut previews = self.previews.lock().unwrap();
            let n = previews.next;
            previews.next += 1;
            previews.images.push_back((n, png));
            while previews.images.len() > previews.capacity {
                previews.images.pop_front();
            }
            n
        };
        self.events.push(EventKind::PreviewReady {
            iteration,
            url: format!("/sessions/{}/previews/{n}", self.id),
        });
    }

    pub fn preview(&self, n: u64) -> Option<Vec<u8>> {
        let previews = self.previews.lock().unwrap();
        previews.images.iter().find(|(i, _)| *i == n).map(|(_, png)| png.clone())
    }

    /// Apply an edit now or, during an optimisation, hand it to the run and
    /// wait until the run has taken it. A taken edit is part of the next
    /// iteration record. Invalid edits are rejected without effect.
    pub fn set_params(&self, edit: ParamEdit) -> Result<SessionState> {
        let mut control = self.control.lock().unwrap();
        if control.running {
            let mut merged = control.pending.clone();
            merged.merge(edit);
            let mut view = self.state();
            merged.apply(&mut view.k, &mut view.gamma)?;
            control.pending = merged;
            control.submitted += 1;
            let ticket = control.submitted;
            let control = self.captured.wait_while(control, |c| c.captured < ticket).unwrap();
            return Ok(control.captured_view.clone().unwrap_or_else(|| self.state()));
        }
        let mut session = self.session.lock().unwrap();
        session.set_params(&edit)?;
        drop(control);
        self.publish(&session);
        let (k, gamma, iteration) = (*session.params(), session.gamma(), session.optimizer_state().iteration);
        drop(session);
        self.events.push(EventKind::ParamsChanged {
            source: ParamSource::User,
            k,
            gamma,
        });
        self.emit_preview(iteration, &k);
        Ok(self.state())
    }

    /// Reserve the session for a run. The caller then executes [`Self::run`]
    /// on a blocking thread.
    pub fn begin_optimize(&self, steps: Option<usize>) -> Result<OptimizeAccepted> {
        let mut control = self.control.lock().unwrap();
        if control.running {
            return Err(Error::Busy);
        }
        let view = self.state();
        if let Status::Error(msg) = &view.status {
            return Err(Error::InvalidState(format!("session failed: {msg}")));
        }
        control.running = true;
        self.stop.store(false, Ordering::SeqCst);
        {
            let mut v = self.view.write().unwrap();
            v.status = Status::Optimizing;
        }
        Ok(OptimizeAccepted {
            id: self.id.clone(),
            steps: steps.unwrap_or(view.config.max_steps),
            events_after: self.events.last_seq(),
        })
    }

    pub fn run(&self, steps: usize) -> Result<StopReason> {
        let mut session = self.session.lock().unwrap();
        self.events.push(EventKind::StatusChanged {
            status: Status::Optimizing,
            reason: None,
        });
        let outcome = session.optimize_observed(Some(steps), LiveRun { handle: self });

        // edits that arrived after the last step
        let mut control = self.control.lock().unwrap();
        let late = std::mem::take(&mut control.pending);
        let late_applied = !late.is_empty() && session.set_params(&late).is_ok();
        control.running = false;
        self.publish(&session);
        control.captured = control.submitted;
        control.captured_view = Some(self.state());
        self.captured.notify_all();
        drop(control);
        if late_applied {
            self.events.push(EventKind::ParamsChanged {
                source: ParamSource::User,
                k: *session.params(),
                gamma: session.gamma(),
            });
        }
        self.events.push(EventKind::StatusChanged {
            status: session.status().clone(),
            reason: outcome.as_ref().ok().copied(),
        });
        outcome
    }

    /// Ask a running optimisation to stop at the next iteration boundary.
    pub fn stop(&self) -> bool {
        let control = self.control.lock().unwrap();
        if control.running {
            self.stop.store(true, Ordering::SeqCst);
        }
        control.running
    }

    /// Full-resolution PNG for the current intensities. Works during a run,
    /// using the last published intensities.
    pub fn render(&self) -> Result<Vec<u8>> {
        let view = self.state();
        if let Status::Error(msg) = &view.status {
            return Err(Error::InvalidState(format!("session failed: {msg}")));
        }
        self.render_source.render(&view.k)
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        let control = self.control.lock().unwrap();
        if control.running {
            return Err(Error::Busy);
        }
        let session = self.session.lock().unwrap();
        drop(control);
        session.persist(dir)
    }
}

/// Connects a running optimisation to the handle: queued edits are taken
/// before each record, records are published after it.
struct LiveRun<'a> {
    handle: &'a SessionHandle,
}

impl Observer for LiveRun<'_> {
    fn before_record(&mut self, steering: &mut Steering<'_>) {
        let h = self.handle;
        let mut control = h.control.lock().unwrap();
        if control.captured == control.submitted {
            return;
        }
        let edit = std::mem::take(&mut control.pending);
        match steering.apply(&edit) {
            Ok(()) => {
                let (k, gamma) = (*steering.params(), steering.gamma());
                let mut view = h.state();
                view.k = k;
                view.gamma = gamma;
                control.captured_view = Some(view);
                h.events.push(EventKind::ParamsChanged {
                    source: ParamSource::User,
                    k,
                    gamma,
                });
            }
            Err(e) => {
                tracing::warn!(session = %h.id, "dropped edit: {e}");
                control.captured_view = Some(h.state());
            }
        }
        control.captured = control.submitted;
        h.captured.notify_all();
    }

    fn on_iteration(&mut self, record: &IterationRecord, steering: &mut Steering<'_>) {
        let h = self.handle;
        {
            let mut view = h.view.write().unwrap();
            view.history.push(record.clone());
            view.k = record.k;
            view.gamma = record.gamma;
        }
        h.events.push(EventKind::IterationDone { record: record.clone() });
        h.events.push(EventKind::ParamsChanged {
            source: ParamSource::Optimizer,
            k: record.k,
            gamma: record.gamma,
        });
        h.emit_preview(record.iteration, &record.k);
        if h.stop.load(Ordering::SeqCst) {
            steering.stop();
        }
    }
}

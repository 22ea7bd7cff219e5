use std::collections::VecDeque;
use std::sync::Mutex;

use photoloop_core::api::{EventKind, SessionEvent};
use tokio::sync::watch;

/// Per-session ordered event log. Iteration, status and parameter events are
/// kept for the session's lifetime; preview notices beyond `preview_capacity`
/// are dropped oldest first.
pub struct EventQueue {
    session_id: String,
    preview_capacity: usize,
    inner: Mutex<Inner>,
    notify: watch::Sender<u64>,
}

struct Inner {
    next_seq: u64,
    events: VecDeque<SessionEvent>,
    previews: usize,
}

impl EventQueue {
    pub fn new(session_id: String, preview_capacity: usize) -> Self {
        EventQueue {
            session_id,
            preview_capacity: preview_capacity.max(1),
            inner: Mutex::new(Inner {
                next_seq: 1,
                events: VecDeque::new(),
                previews: 0,
            }),
            notify: watch::channel(0).0,
        }
    }

    pub fn push(&self, kind: EventKind) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        if matches!(kind, EventKind::PreviewReady { .. }) {
            inner.previews += 1;
            if inner.previews > self.preview_capacity {
                if let Some(pos) = inner.events.iter().position(|e| matches!(e.kind, EventKind::PreviewReady { .. })) {
                    inner.events.remove(pos);
                    inner.previews -= 1;
                }
            }
        }
        inner.events.push_back(SessionEvent {
            seq,
            session_id: self.session_id.clone(),
            kind,
        });
        drop(inner);
        self.notify.send_replace(seq);
        seq
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().unwrap().next_seq - 1
    }

    /// Retained events with `seq > after`, in order.
    pub fn since(&self, after: u64) -> Vec<SessionEvent> {
        let inner = self.inner.lock().unwrap();
        let start = inner.events.partition_point(|e| e.seq <= after);
        inner.events.range(start..).cloned().collect()
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.notify.subscribe()
    }
}

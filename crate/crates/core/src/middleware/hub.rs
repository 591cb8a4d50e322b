//! Client registry: at most one live connection per role per session, with
//! per-connection sequence numbers and a bounded buffer for offline roles.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use tokio::sync::mpsc;

use super::protocol::{Body, WireMessage};
use crate::model::{Role, TurnId};

pub const DEFAULT_OFFLINE_BUFFER: usize = 64;

pub type ConnId = u64;

/// What a connection's writer receives.
#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Frame(WireMessage),
    /// The hub dropped this connection (e.g. replaced by a newer one).
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Receipt {
    Sent {
        seq: u64,
    },
    Queued,
    /// Queued after discarding the oldest buffered message.
    QueuedDroppedOldest,
}

#[derive(Debug)]
struct Conn {
    id: ConnId,
    tx: mpsc::UnboundedSender<Outbound>,
    next_seq: u64,
}

#[derive(Debug, Default)]
struct Slot {
    conn: Option<Conn>,
    offline: VecDeque<(Option<TurnId>, Body)>,
}

#[derive(Debug, Default)]
struct Slots([Slot; 2]);

impl Slots {
    fn slot(&mut self, role: Role) -> &mut Slot {
        &mut self.0[role_index(role)]
    }

    fn both_connected(&self) -> bool {
        self.0.iter().all(|s| s.conn.is_some())
    }
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Sme => 0,
        Role::Fle => 1,
    }
}

pub struct Registration {
    pub conn_id: ConnId,
    pub rx: mpsc::UnboundedReceiver<Outbound>,
    /// A previous connection for the same role was closed.
    pub replaced: bool,
    /// This registration completed the pair of roles.
    pub session_ready: bool,
}

#[derive(Debug)]
pub struct Hub {
    sessions: RwLock<HashMap<String, Arc<Mutex<Slots>>>>,
    capacity: usize,
    next_conn: AtomicU64,
}

impl Default for Hub {
    fn default() -> Self {
        Hub::new(DEFAULT_OFFLINE_BUFFER)
    }
}

impl Hub {
    pub fn new(offline_capacity: usize) -> Self {
        Hub {
            sessions: RwLock::new(HashMap::new()),
            capacity: offline_capacity.max(1),
            next_conn: AtomicU64::new(1),
        }
    }

    fn session(&self, id: &str) -> Arc<Mutex<Slots>> {
        if let Some(s) = self.sessions.read().get(id) {
            return s.clone();
        }
        self.sessions
            .write()
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    /// Registers a connection for `role`, closing any earlier one. Messages
    /// buffered while the role was offline are flushed to it in order unless
    /// `discard_offline` is set.
    pub fn register(&self, session_id: &str, role: Role, discard_offline: bool) -> Registration {
        let session = self.session(session_id);
        let mut slots = session.lock();
        let was_ready = slots.both_connected();
        let (tx, rx) = mpsc::unbounded_channel();
        let conn_id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let slot = slots.slot(role);
        let mut replaced = false;
        if let Some(mut old) = slot.conn.take() {
            replaced = true;
            let notice = frame(
                session_id,
                role,
                &mut old.next_seq,
                None,
                Body::Error {
                    message: "replaced by a newer connection for this role".into(),
                },
            );
            let _ = old.tx.send(Outbound::Frame(notice));
            let _ = old.tx.send(Outbound::Close);
            tracing::info!(session = session_id, %role, "connection taken over");
        }
        let mut conn = Conn {
            id: conn_id,
            tx,
            next_seq: 1,
        };
        let backlog = std::mem::take(&mut slot.offline);
        if !discard_offline {
            for (turn, body) in backlog {
                let msg = frame(session_id, role, &mut conn.next_seq, turn, body);
                let _ = conn.tx.send(Outbound::Frame(msg));
            }
        }
        slot.conn = Some(conn);
        Registration {
            conn_id,
            rx,
            replaced,
            session_ready: !was_ready && slots.both_connected(),
        }
    }

    /// Removes the connection if it is still the registered one.
    pub fn unregister(&self, session_id: &str, role: Role, conn_id: ConnId) {
        let Some(session) = self.sessions.read().get(session_id).cloned() else {
            return;
        };
        let mut slots = session.lock();
        let slot = slots.slot(role);
        if slot.conn.as_ref().is_some_and(|c| c.id == conn_id) {
            slot.conn = None;
        }
    }

    /// Closes every live connection; used on shutdown.
    pub fn close_all(&self) {
        for session in self.sessions.read().values() {
            for slot in session.lock().0.iter_mut() {
                if let Some(conn) = slot.conn.take() {
                    let _ = conn.tx.send(Outbound::Close);
                }
            }
        }
    }

    pub fn is_connected(&self, session_id: &str, role: Role) -> bool {
        self.sessions
            .read()
            .get(session_id)
            .is_some_and(|s| s.lock().slot(role).conn.is_some())
    }

    pub fn offline_len(&self, session_id: &str, role: Role) -> usize {
        self.sessions
            .read()
            .get(session_id)
            .map_or(0, |s| s.lock().slot(role).offline.len())
    }

    /// Sends to the role's live connection, or buffers while it is offline.
    pub fn send(
        &self,
        session_id: &str,
        role: Role,
        turn_id: Option<TurnId>,
        body: Body,
    ) -> Receipt {
        let session = self.session(session_id);
        let mut slots = session.lock();
        let slot = slots.slot(role);
        if let Some(conn) = slot.conn.as_mut() {
            let msg = frame(session_id, role, &mut conn.next_seq, turn_id, body.clone());
            let seq = msg.seq;
            if conn.tx.send(Outbound::Frame(msg)).is_ok() {
                return Receipt::Sent { seq };
            }
            slot.conn = None;
        }
        slot.offline.push_back((turn_id, body));
        if slot.offline.len() > self.capacity {
            let (turn, dropped) = slot.offline.pop_front().expect("non-empty");
            tracing::warn!(
                session = session_id,
                %role,
                turn = ?turn.map(|t| t.0),
                kind = dropped.kind(),
                capacity = self.capacity,
                "offline buffer full; dropped oldest message"
            );
            return Receipt::QueuedDroppedOldest;
        }
        Receipt::Queued
    }
}

fn frame(
    session_id: &str,
    role: Role,
    next_seq: &mut u64,
    turn_id: Option<TurnId>,
    body: Body,
) -> WireMessage {
    let seq = *next_seq;
    *next_seq += 1;
    WireMessage {
        session_id: session_id.to_string(),
        turn_id,
        identity: Some(role),
        seq,
        body,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(s: &str) -> Body {
        Body::Deliver {
            text: s.into(),
            notice: None,
        }
    }

    fn frames(rx: &mut mpsc::UnboundedReceiver<Outbound>) -> Vec<Outbound> {
        let mut out = Vec::new();
        while let Ok(m) = rx.try_recv() {
            out.push(m);
        }
        out
    }

    #[test]
    fn registration_and_readiness() {
        let hub = Hub::default();
        let a = hub.register("s", Role::Sme, false);
        assert!(!a.session_ready && !a.replaced);
        assert_eq!(hub.session_count(), 1);
        let b = hub.register("s", Role::Fle, false);
        assert!(b.session_ready);
    }

    #[test]
    fn takeover_closes_old_connection() {
        let hub = Hub::default();
        let mut first = hub.register("s", Role::Sme, false);
        let second = hub.register("s", Role::Sme, false);
        assert!(second.replaced);
        let got = frames(&mut first.rx);
        assert!(matches!(
            &got[0],
            Outbound::Frame(WireMessage {
                body: Body::Error { .. },
                ..
            })
        ));
        assert_eq!(got[1], Outbound::Close);
        // A stale unregister must not remove the new connection.
        hub.unregister("s", Role::Sme, first.conn_id);
        assert!(hub.is_connected("s", Role::Sme));
    }

    #[test]
    fn fifo_with_increasing_seq() {
        let hub = Hub::default();
        let mut fle = hub.register("s", Role::Fle, false);
        assert_eq!(
            hub.send("s", Role::Fle, None, text("a")),
            Receipt::Sent { seq: 1 }
        );
        assert_eq!(
            hub.send("s", Role::Fle, None, text("b")),
            Receipt::Sent { seq: 2 }
        );
        let got = frames(&mut fle.rx);
        let texts: Vec<_> = got
            .iter()
            .map(|o| match o {
                Outbound::Frame(m) => (m.seq, m.body.clone()),
                Outbound::Close => unreachable!(),
            })
            .collect();
        assert_eq!(texts, vec![(1, text("a")), (2, text("b"))]);
    }

    #[test]
    fn offline_buffer_drops_oldest_and_flushes_on_register() {
        let hub = Hub::new(64);
        for i in 0..64 {
            assert_eq!(
                hub.send("s", Role::Fle, None, text(&i.to_string())),
                Receipt::Queued
            );
        }
        assert_eq!(
            hub.send("s", Role::Fle, None, text("64")),
            Receipt::QueuedDroppedOldest
        );
        assert_eq!(hub.offline_len("s", Role::Fle), 64);
        let mut fle = hub.register("s", Role::Fle, false);
        let got = frames(&mut fle.rx);
        assert_eq!(got.len(), 64);
        assert_eq!(
            got[0],
            Outbound::Frame(WireMessage {
                session_id: "s".into(),
                turn_id: None,
                identity: Some(Role::Fle),
                seq: 1,
                body: text("1"),
            })
        );
    }

    #[test]
    fn dropped_receiver_falls_back_to_buffer() {
        let hub = Hub::default();
        let fle = hub.register("s", Role::Fle, false);
        drop(fle.rx);
        assert_eq!(hub.send("s", Role::Fle, None, text("x")), Receipt::Queued);
        assert!(!hub.is_connected("s", Role::Fle));
    }
}

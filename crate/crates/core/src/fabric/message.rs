use crate::cql::{LockId, Mode};

/// A mailbox on a compute node. Mailbox 0 is the node's lock agent; client
/// mailboxes start at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Port {
    pub cn: u16,
    pub mailbox: u32,
}

impl Port {
    pub const AGENT: u32 = 0;

    pub fn agent(cn: u16) -> Self {
        Self {
            cn,
            mailbox: Self::AGENT,
        }
    }
}

/// Ownership handover sent by a releasing CQL holder to a waiter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Notification {
    pub lock: LockId,
    pub grant_mode: Mode,
    /// Sender's reset counter for `lock` when the message was built.
    pub reset_count: u32,
    /// Earliest acquisition timestamp among waiters still queued behind the
    /// receiver on other CNs.
    pub earliest_remote_ts: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Notify(Notification),
    ResetSignal {
        lock: LockId,
        reset_count: u32,
        initiator: Port,
    },
    ResetAck {
        lock: LockId,
        reset_count: u32,
        cn: u16,
    },
    /// Intra-CN: local lock ownership handed to a waiting client.
    LocalGrant {
        lock: LockId,
        cql_held: bool,
    },
    /// Intra-CN: the node agent aborts a pending CQL wait because of a reset.
    Abort {
        lock: LockId,
        reset_count: u32,
    },
}

impl Message {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Message::Notify(_) => "notify",
            Message::ResetSignal { .. } => "reset_signal",
            Message::ResetAck { .. } => "reset_ack",
            Message::LocalGrant { .. } => "local_grant",
            Message::Abort { .. } => "abort",
        }
    }

    pub(crate) fn lock(&self) -> LockId {
        match self {
            Message::Notify(n) => n.lock,
            Message::ResetSignal { lock, .. }
            | Message::ResetAck { lock, .. }
            | Message::LocalGrant { lock, .. }
            | Message::Abort { lock, .. } => *lock,
        }
    }
}

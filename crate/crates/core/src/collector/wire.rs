//! Binary layouts shared with the kernel probe programs.
//!
//! All integers are host-endian and every struct is naturally aligned with
//! no implicit padding.
//!
//! Event record (ring buffer sample, 48 bytes):
//!
//! | offset | width | field       |
//! |--------|-------|-------------|
//! | 0      | 8     | ts_ns       |
//! | 8      | 4     | pid (tgid)  |
//! | 12     | 4     | tid         |
//! | 16     | 4     | probe_index |
//! | 20     | 1     | kind: 0 entry, 1 exit |
//! | 21     | 1     | space: 0 user, 1 kernel |
//! | 22     | 2     | flags: bit 0 = size valid |
//! | 24     | 8     | size        |
//! | 32     | 16    | comm, NUL padded |
//!
//! Entry map: key `{tid u32 @0, probe_index u32 @4}` (8 bytes), value
//! `{depth u32 @0, overflow u32 @4, ts_ns [u64; 16] @8}` (136 bytes).
//!
//! Accumulator map: key `probe_index u32`, value
//! `{count @0, total_ns @8, min_ns @16, max_ns @24}` all u64 (32 bytes).
//!
//! Counter map: array of u64 indexed by [`COUNTER_DROPPED`] and
//! [`COUNTER_ORPHAN`].

use thiserror::Error;

use crate::model::{EventKind, Space, TraceEvent};

use super::ProbeSpec;

pub const EVENT_RECORD_SIZE: usize = 48;
pub const ENTRY_KEY_SIZE: usize = 8;
pub const ENTRY_STACK_SIZE: usize = 8 + 8 * MAX_DEPTH;
pub const ACCUMULATOR_RECORD_SIZE: usize = 32;
pub const MAX_DEPTH: usize = 16;
pub const FLAG_HAS_SIZE: u16 = 1;
pub const COUNTER_DROPPED: u32 = 0;
pub const COUNTER_ORPHAN: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("record needs {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid event kind byte {0}")]
    BadKind(u8),
    #[error("invalid space byte {0}")]
    BadSpace(u8),
    #[error("no probe with index {0}")]
    UnknownProbe(u32),
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_ne_bytes(b[off..off + 2].try_into().unwrap())
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_ne_bytes(b[off..off + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_ne_bytes(b[off..off + 8].try_into().unwrap())
}

fn need(b: &[u8], expected: usize) -> Result<(), WireError> {
    if b.len() < expected {
        Err(WireError::Truncated {
            expected,
            got: b.len(),
        })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub ts_ns: u64,
    pub pid: u32,
    pub tid: u32,
    pub probe_index: u32,
    pub kind: EventKind,
    pub space: Space,
    pub size: Option<u64>,
    pub comm: [u8; 16],
}

impl EventRecord {
    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        need(b, EVENT_RECORD_SIZE)?;
        let kind = match b[20] {
            0 => EventKind::Entry,
            1 => EventKind::Exit,
            k => return Err(WireError::BadKind(k)),
        };
        let space = match b[21] {
            0 => Space::User,
            1 => Space::Kernel,
            s => return Err(WireError::BadSpace(s)),
        };
        let flags = u16_at(b, 22);
        Ok(EventRecord {
            ts_ns: u64_at(b, 0),
            pid: u32_at(b, 8),
            tid: u32_at(b, 12),
            probe_index: u32_at(b, 16),
            kind,
            space,
            size: (flags & FLAG_HAS_SIZE != 0).then(|| u64_at(b, 24)),
            comm: b[32..48].try_into().unwrap(),
        })
    }

    pub fn encode(&self) -> [u8; EVENT_RECORD_SIZE] {
        let mut b = [0u8; EVENT_RECORD_SIZE];
        b[0..8].copy_from_slice(&self.ts_ns.to_ne_bytes());
        b[8..12].copy_from_slice(&self.pid.to_ne_bytes());
        b[12..16].copy_from_slice(&self.tid.to_ne_bytes());
        b[16..20].copy_from_slice(&self.probe_index.to_ne_bytes());
        b[20] = match self.kind {
            EventKind::Entry => 0,
            EventKind::Exit => 1,
        };
        b[21] = match self.space {
            Space::User => 0,
            Space::Kernel => 1,
        };
        let flags = if self.size.is_some() { FLAG_HAS_SIZE } else { 0 };
        b[22..24].copy_from_slice(&flags.to_ne_bytes());
        b[24..32].copy_from_slice(&self.size.unwrap_or(0).to_ne_bytes());
        b[32..48].copy_from_slice(&self.comm);
        b
    }

    pub fn comm_str(&self) -> String {
        let end = self.comm.iter().position(|&c| c == 0).unwrap_or(self.comm.len());
        String::from_utf8_lossy(&self.comm[..end]).into_owned()
    }

    pub fn to_event(&self, probes: &[ProbeSpec]) -> Result<TraceEvent, WireError> {
        let probe = probes
            .iter()
            .find(|p| p.index == self.probe_index)
            .ok_or(WireError::UnknownProbe(self.probe_index))?;
        Ok(TraceEvent {
            ts_ns: self.ts_ns,
            pid: self.pid,
            tid: self.tid,
            comm: self.comm_str(),
            probe_id: probe.probe_id.clone(),
            class: probe.class,
            kind: self.kind,
            space: self.space,
            size_bytes: self.size,
        })
    }
}

/// Packs a command name the way the kernel stores it: at most 15 bytes
/// and a terminating NUL.
pub fn pack_comm(comm: &str) -> [u8; 16] {
    let mut out = [0u8; 16];
    let bytes = comm.as_bytes();
    let n = bytes.len().min(15);
    out[..n].copy_from_slice(&bytes[..n]);
    out
}

/// Splits a buffer of back-to-back event records.
pub fn decode_events(b: &[u8]) -> Result<Vec<EventRecord>, WireError> {
    if b.len() % EVENT_RECORD_SIZE != 0 {
        return Err(WireError::Truncated {
            expected: b.len().next_multiple_of(EVENT_RECORD_SIZE),
            got: b.len(),
        });
    }
    b.chunks_exact(EVENT_RECORD_SIZE).map(EventRecord::decode).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EntryKey {
    pub tid: u32,
    pub probe_index: u32,
}

impl EntryKey {
    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        need(b, ENTRY_KEY_SIZE)?;
        Ok(EntryKey {
            tid: u32_at(b, 0),
            probe_index: u32_at(b, 4),
        })
    }

    pub fn encode(&self) -> [u8; ENTRY_KEY_SIZE] {
        let mut b = [0u8; ENTRY_KEY_SIZE];
        b[0..4].copy_from_slice(&self.tid.to_ne_bytes());
        b[4..8].copy_from_slice(&self.probe_index.to_ne_bytes());
        b
    }
}

/// Per-key stack of open entry timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EntryStack {
    pub depth: u32,
    /// Entries refused at full depth whose exits are still outstanding.
    pub overflow: u32,
    pub ts_ns: [u64; MAX_DEPTH],
}

impl EntryStack {
    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        need(b, ENTRY_STACK_SIZE)?;
        let mut ts_ns = [0u64; MAX_DEPTH];
        for (i, ts) in ts_ns.iter_mut().enumerate() {
            *ts = u64_at(b, 8 + 8 * i);
        }
        Ok(EntryStack {
            depth: u32_at(b, 0),
            overflow: u32_at(b, 4),
            ts_ns,
        })
    }

    pub fn encode(&self) -> [u8; ENTRY_STACK_SIZE] {
        let mut b = [0u8; ENTRY_STACK_SIZE];
        b[0..4].copy_from_slice(&self.depth.to_ne_bytes());
        b[4..8].copy_from_slice(&self.overflow.to_ne_bytes());
        for (i, ts) in self.ts_ns.iter().enumerate() {
            b[8 + 8 * i..16 + 8 * i].copy_from_slice(&ts.to_ne_bytes());
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccumulatorRecord {
    pub count: u64,
    pub total_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl AccumulatorRecord {
    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        need(b, ACCUMULATOR_RECORD_SIZE)?;
        Ok(AccumulatorRecord {
            count: u64_at(b, 0),
            total_ns: u64_at(b, 8),
            min_ns: u64_at(b, 16),
            max_ns: u64_at(b, 24),
        })
    }

    pub fn encode(&self) -> [u8; ACCUMULATOR_RECORD_SIZE] {
        let mut b = [0u8; ACCUMULATOR_RECORD_SIZE];
        for (i, v) in [self.count, self.total_ns, self.min_ns, self.max_ns].iter().enumerate() {
            b[8 * i..8 * i + 8].copy_from_slice(&v.to_ne_bytes());
        }
        b
    }

    pub fn record(&mut self, delta: u64) {
        if self.count == 0 || delta < self.min_ns {
            self.min_ns = delta;
        }
        self.max_ns = self.max_ns.max(delta);
        self.count += 1;
        self.total_ns += delta;
    }
}

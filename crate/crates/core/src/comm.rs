//! Exchange of assumed trajectories between vehicles.
//!
//! Wire format of one message (all integers and floats little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `"DMPC"`                 |
//! | 4      | 1    | version `0x01`                 |
//! | 5      | 2    | sender (u16)                   |
//! | 7      | 8    | timestep (u64)                 |
//! | 15     | 2    | horizon `H` (u16)              |
//! | 17     | 16   | `H + 1` × (position, velocity) |
//!
//! On a byte stream every message is preceded by its length as a u32.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::model::Output;
use crate::topology::TopologyGraph;

pub const MAGIC: [u8; 4] = *b"DMPC";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 17;
/// Upper bound on a framed message, enforced before allocating.
pub const MAX_FRAME_LEN: usize = HEADER_LEN + 16 * (u16::MAX as usize + 1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found:#04x} at byte {offset}")]
    BadVersion { offset: usize, found: u8 },
    #[error("buffer truncated: byte {offset} missing")]
    Truncated { offset: usize },
    #[error("{extra} trailing bytes starting at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("non-finite sample at byte {offset}")]
    NonFinite { offset: usize },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::BadMagic { offset }
            | DecodeError::BadVersion { offset, .. }
            | DecodeError::Truncated { offset }
            | DecodeError::TrailingBytes { offset, .. }
            | DecodeError::NonFinite { offset } => offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum CommError {
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("frame of {0} bytes exceeds the maximum message size")]
    FrameTooLarge(usize),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: no message from vehicle {sender} for timestep {timestep}")]
    MissingMessage { sender: usize, timestep: u64 },
    #[error("protocol error: vehicle {sender} posted twice for timestep {timestep}")]
    DuplicateMessage { sender: usize, timestep: u64 },
    #[error("protocol error: vehicle {sender} posted for timestep {got} during timestep {expected}")]
    WrongTimestep { sender: usize, expected: u64, got: u64 },
    #[error("protocol error: unknown sender {0}")]
    UnknownSender(usize),
}

/// Assumed output trajectory announced by one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMessage {
    pub sender: u16,
    pub timestep: u64,
    /// `H + 1` samples.
    pub samples: Vec<Output>,
}

impl TrajectoryMessage {
    pub fn new(sender: usize, timestep: u64, samples: Vec<Output>) -> Result<Self, CommError> {
        let sender = u16::try_from(sender)
            .map_err(|_| CommError::InvalidMessage(format!("sender {sender} does not fit in 16 bits")))?;
        if samples.is_empty() || samples.len() > u16::MAX as usize + 1 {
            return Err(CommError::InvalidMessage(format!(
                "{} samples; expected 1..=65536",
                samples.len()
            )));
        }
        if let Some(k) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CommError::InvalidMessage(format!("sample {k} is not finite")));
        }
        Ok(Self {
            sender,
            timestep,
            samples,
        })
    }

    pub fn horizon(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 16 * self.samples.len()
    }
}

pub fn encode(msg: &TrajectoryMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&msg.timestep.to_le_bytes());
    out.extend_from_slice(&(msg.horizon() as u16).to_le_bytes());
    for s in &msg.samples {
        out.extend_from_slice(&s.position.to_le_bytes());
        out.extend_from_slice(&s.velocity.to_le_bytes());
    }
    out
}

fn take<const N: usize>(buf: &[u8], offset: usize) -> Result<[u8; N], DecodeError> {
    if buf.len() < offset + N {
        return Err(DecodeError::Truncated {
            offset: buf.len().max(offset),
        });
    }
    Ok(buf[offset..offset + N].try_into().expect("length checked"))
}

pub fn decode(buf: &[u8]) -> Result<TrajectoryMessage, DecodeError> {
    // compare the magic byte by byte so a short buffer reports truncation
    for (k, &m) in MAGIC.iter().enumerate() {
        match buf.get(k) {
            None => return Err(DecodeError::Truncated { offset: k }),
            Some(&b) if b != m => return Err(DecodeError::BadMagic { offset: k }),
            _ => {}
        }
    }
    let [version] = take::<1>(buf, 4)?;
    if version != VERSION {
        return Err(DecodeError::BadVersion {
            offset: 4,
            found: version,
        });
    }
    let sender = u16::from_le_bytes(take(buf, 5)?);
    let timestep = u64::from_le_bytes(take(buf, 7)?);
    let horizon = u16::from_le_bytes(take(buf, 15)?) as usize;
    let mut samples = Vec::with_capacity(horizon + 1);
    let mut offset = HEADER_LEN;
    for _ in 0..=horizon {
        let position = f64::from_le_bytes(take(buf, offset)?);
        let velocity = f64::from_le_bytes(take(buf, offset + 8)?);
        if !position.is_finite() {
            return Err(DecodeError::NonFinite { offset });
        }
        if !velocity.is_finite() {
            return Err(DecodeError::NonFinite { offset: offset + 8 });
        }
        samples.push(Output::new(position, velocity));
        offset += 16;
    }
    if buf.len() > offset {
        return Err(DecodeError::TrailingBytes {
            offset,
            extra: buf.len() - offset,
        });
    }
    Ok(TrajectoryMessage {
        sender,
        timestep,
        samples,
    })
}

/// Writes one length-prefixed message.
pub fn write_frame<W: Write>(writer: &mut W, msg: &TrajectoryMessage) -> Result<(), CommError> {
    let body = encode(msg);
    writer.write_all(&(body.len() as u32).to_le_bytes())?;
    writer.write_all(&body)?;
    Ok(())
}

/// Reads one length-prefixed message; `None` on a clean end of stream.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<TrajectoryMessage>, CommError> {
    let mut len = [0u8; 4];
    match reader.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(CommError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(Some(decode(&body)?))
}

/// Messages delivered to one vehicle, keyed by sender.
pub type Inbox = BTreeMap<usize, TrajectoryMessage>;

/// Lockstep message bus routing each vehicle's announcement to the vehicles
/// that receive from it.
#[derive(Debug)]
pub struct MessageBus {
    n_followers: usize,
    /// `receivers[j]`: vehicles `i` with an edge `(j, i)`.
    receivers: Vec<BTreeSet<usize>>,
    posted: Mutex<BTreeMap<usize, TrajectoryMessage>>,
    arrived: Condvar,
}

impl MessageBus {
    pub fn new(graph: &TopologyGraph) -> Self {
        let n = graph.n_followers();
        let mut receivers = vec![BTreeSet::new(); n + 1];
        for (from, to) in graph.edges() {
            receivers[from].insert(to);
        }
        Self {
            n_followers: n,
            receivers,
            posted: Mutex::new(BTreeMap::new()),
            arrived: Condvar::new(),
        }
    }

    /// Vehicles that receive messages from `sender`.
    pub fn receivers(&self, sender: usize) -> &BTreeSet<usize> {
        &self.receivers[sender]
    }

    /// Posts one message; safe to call from several threads.
    pub fn post(&self, msg: TrajectoryMessage) -> Result<(), CommError> {
        let sender = msg.sender as usize;
        if sender > self.n_followers {
            return Err(CommError::UnknownSender(sender));
        }
        let mut posted = self.posted.lock().expect("bus lock poisoned");
        if let Some(first) = posted.values().next() {
            if first.timestep != msg.timestep {
                return Err(CommError::WrongTimestep {
                    sender,
                    expected: first.timestep,
                    got: msg.timestep,
                });
            }
        }
        if posted.contains_key(&sender) {
            return Err(CommError::DuplicateMessage {
                sender,
                timestep: msg.timestep,
            });
        }
        posted.insert(sender, msg);
        self.arrived.notify_all();
        Ok(())
    }

    /// Barrier for `timestep`: requires a message from every vehicle
    /// `0..=N`, then returns the inbox of every vehicle (index 0 is the
    /// leader's, normally empty) and clears the bus.
    pub fn exchange(&self, timestep: u64) -> Result<Vec<Inbox>, CommError> {
        self.exchange_timeout(timestep, Duration::ZERO)
    }

    /// Like [`exchange`](Self::exchange), waiting up to `timeout` for late
    /// messages.
    pub fn exchange_timeout(&self, timestep: u64, timeout: Duration) -> Result<Vec<Inbox>, CommError> {
        // The clock is only read when a wait is needed; targets such as
        // wasm32 have no `Instant` and always exchange with a zero timeout.
        let mut deadline = None;
        let mut posted = self.posted.lock().expect("bus lock poisoned");
        loop {
            let missing = (0..=self.n_followers).find(|v| !posted.contains_key(v));
            let Some(sender) = missing else { break };
            if timeout.is_zero() {
                posted.clear();
                return Err(CommError::MissingMessage { sender, timestep });
            }
            let now = Instant::now();
            let deadline = *deadline.get_or_insert(now + timeout);
            if now >= deadline {
                posted.clear();
                return Err(CommError::MissingMessage { sender, timestep });
            }
            posted = self
                .arrived
                .wait_timeout(posted, deadline - now)
                .expect("bus lock poisoned")
                .0;
        }
        if let Some(msg) = posted.values().find(|m| m.timestep != timestep) {
            let err = CommError::WrongTimestep {
                sender: msg.sender as usize,
                expected: timestep,
                got: msg.timestep,
            };
            posted.clear();
            return Err(err);
        }
        let mut inboxes = vec![Inbox::new(); self.n_followers + 1];
        for (sender, msg) in std::mem::take(&mut *posted) {
            for &to in &self.receivers[sender] {
                inboxes[to].insert(sender, msg.clone());
            }
        }
        Ok(inboxes)
    }
}

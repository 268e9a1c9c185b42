//! In-process rank transport with non-blocking send/receive and a test-some
//! completion primitive.
//!
//! Every rank holds an [`Endpoint`]; all endpoints share one mailbox. Messages
//! are matched per `(source, destination, tag)` channel in post order. An
//! optional seeded perturbation delays each message by a random amount so
//! that tests can exercise arbitrary arrival orders.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankId(pub usize);

impl std::fmt::Display for RankId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rank {}", self.0)
    }
}

pub type Tag = u64;

/// Tag kinds occupy the top byte so different traffic never cross-matches.
pub mod tag_kind {
    pub const HALO: u64 = 1;
    pub const REVERSE: u64 = 2;
    pub const PARTICLES: u64 = 3;
    pub const REDISTRIBUTE: u64 = 4;
    pub const COLLECTIVE: u64 = 5;
    pub const USER: u64 = 6;
}

/// Pack `(kind, quantity, epoch)` into a tag.
pub fn make_tag(kind: u64, quantity: u64, epoch: u64) -> Tag {
    (kind << 56) | ((quantity & 0xff) << 48) | (epoch & 0xffff_ffff_ffff)
}

/// Randomised delivery delay, for testing overlap under reordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Perturbation {
    pub seed: u64,
    pub max_delay_us: u64,
}

struct Envelope {
    payload: Vec<u8>,
    visible_at: Instant,
}

type ChannelKey = (usize, usize, Tag, u64);

struct Shared {
    size: usize,
    closed: AtomicBool,
    mailbox: Mutex<HashMap<ChannelKey, Envelope>>,
    arrived: Condvar,
    barrier: Barrier,
    perturbation: Option<Perturbation>,
}

/// Owner of the shared mailbox; hands out one endpoint per rank.
pub struct Transport {
    shared: Arc<Shared>,
}

impl Transport {
    pub fn new(size: usize, perturbation: Option<Perturbation>) -> Result<(Self, Vec<Endpoint>)> {
        if size == 0 {
            return Err(Error::InvalidRank { rank: 0, size: 0 });
        }
        let shared = Arc::new(Shared {
            size,
            closed: AtomicBool::new(false),
            mailbox: Mutex::new(HashMap::new()),
            arrived: Condvar::new(),
            barrier: Barrier::new(size),
            perturbation,
        });
        let endpoints = (0..size)
            .map(|r| Endpoint {
                rank: RankId(r),
                shared: Arc::clone(&shared),
                send_seq: Mutex::new(HashMap::new()),
                recv_seq: Mutex::new(HashMap::new()),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(
                    perturbation.map_or(0, |p| p.seed)
                        ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                )),
                collective_epoch: AtomicU64::new(0),
            })
            .collect();
        Ok((Self { shared }, endpoints))
    }

    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        self.shared.arrived.notify_all();
    }

    /// Messages posted but not yet received.
    pub fn pending_messages(&self) -> usize {
        self.shared.mailbox.lock().unwrap().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HandleKind {
    Send,
    Recv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HandleState {
    Pending,
    Complete,
}

/// A posted non-blocking operation.
#[derive(Debug)]
pub struct MessageHandle {
    pub kind: HandleKind,
    pub peer: RankId,
    pub channel_tag: Tag,
    seq: u64,
    state: HandleState,
    payload: Option<Vec<u8>>,
}

impl MessageHandle {
    pub fn state(&self) -> HandleState {
        self.state
    }

    pub fn is_complete(&self) -> bool {
        self.state == HandleState::Complete
    }

    /// Received bytes; `None` for sends or while pending.
    pub fn payload(&self) -> Option<&[u8]> {
        self.payload.as_deref()
    }

    pub fn take_payload(&mut self) -> Option<Vec<u8>> {
        self.payload.take()
    }
}

/// One rank's view of the transport. Shareable between the rank's workers.
pub struct Endpoint {
    rank: RankId,
    shared: Arc<Shared>,
    send_seq: Mutex<HashMap<(usize, Tag), u64>>,
    recv_seq: Mutex<HashMap<(usize, Tag), u64>>,
    rng: Mutex<ChaCha8Rng>,
    collective_epoch: AtomicU64,
}

impl Endpoint {
    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    fn check_peer(&self, peer: RankId) -> Result<()> {
        if peer.0 >= self.shared.size {
            return Err(Error::InvalidRank {
                rank: peer.0,
                size: self.shared.size,
            });
        }
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(Error::TransportClosed);
        }
        Ok(())
    }

    /// Post a send. Returns immediately; the payload is delivered to the
    /// matching receive exactly once.
    pub fn post_send(&self, peer: RankId, tag: Tag, payload: Vec<u8>) -> Result<MessageHandle> {
        self.check_peer(peer)?;
        let seq = {
            let mut s = self.send_seq.lock().unwrap();
            let e = s.entry((peer.0, tag)).or_insert(0);
            let v = *e;
            *e += 1;
            v
        };
        let delay = match self.shared.perturbation {
            Some(p) if p.max_delay_us > 0 => {
                Duration::from_micros(self.rng.lock().unwrap().gen_range(0..=p.max_delay_us))
            }
            _ => Duration::ZERO,
        };
        let env = Envelope {
            payload,
            visible_at: Instant::now() + delay,
        };
        self.shared
            .mailbox
            .lock()
            .unwrap()
            .insert((self.rank.0, peer.0, tag, seq), env);
        self.shared.arrived.notify_all();
        Ok(MessageHandle {
            kind: HandleKind::Send,
            peer,
            channel_tag: tag,
            seq,
            state: HandleState::Pending,
            payload: None,
        })
    }

    /// Post a receive for the next message on channel `(peer, tag)`.
    pub fn post_recv(&self, peer: RankId, tag: Tag) -> Result<MessageHandle> {
        self.check_peer(peer)?;
        let seq = {
            let mut s = self.recv_seq.lock().unwrap();
            let e = s.entry((peer.0, tag)).or_insert(0);
            let v = *e;
            *e += 1;
            v
        };
        Ok(MessageHandle {
            kind: HandleKind::Recv,
            peer,
            channel_tag: tag,
            seq,
            state: HandleState::Pending,
            payload: None,
        })
    }

    /// Non-blocking completion check. Returns the indices of handles that
    /// completed during this call; a handle is reported at most once.
    pub fn test_some(&self, handles: &mut [MessageHandle]) -> Vec<usize> {
        let now = Instant::now();
        let mut done = Vec::new();
        let mut mailbox = None;
        for (i, h) in handles.iter_mut().enumerate() {
            if h.state == HandleState::Complete {
                continue;
            }
            match h.kind {
                HandleKind::Send => {
                    h.state = HandleState::Complete;
                    done.push(i);
                }
                HandleKind::Recv => {
                    let mb = mailbox.get_or_insert_with(|| self.shared.mailbox.lock().unwrap());
                    let key = (h.peer.0, self.rank.0, h.channel_tag, h.seq);
                    let visible = mb.get(&key).is_some_and(|e| e.visible_at <= now);
                    if visible {
                        let env = mb.remove(&key).unwrap();
                        h.payload = Some(env.payload);
                        h.state = HandleState::Complete;
                        done.push(i);
                    }
                }
            }
        }
        done
    }

    /// Block until every handle has completed.
    pub fn wait_all(&self, handles: &mut [MessageHandle]) -> Result<()> {
        loop {
            self.test_some(handles);
            if handles.iter().all(MessageHandle::is_complete) {
                return Ok(());
            }
            self.wait_for_traffic()?;
        }
    }

    /// Park briefly until new traffic may be available.
    pub fn wait_for_traffic(&self) -> Result<()> {
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(Error::TransportClosed);
        }
        let guard = self.shared.mailbox.lock().unwrap();
        let _ = self
            .shared
            .arrived
            .wait_timeout(guard, Duration::from_micros(200))
            .unwrap();
        Ok(())
    }

    /// Returns once every rank has entered the barrier.
    pub fn barrier(&self) {
        self.shared.barrier.wait();
    }

    fn next_collective_tag(&self) -> Tag {
        let e = self.collective_epoch.fetch_add(1, Ordering::SeqCst);
        make_tag(tag_kind::COLLECTIVE, 0, e)
    }

    /// Every rank contributes `bytes`; every rank receives all contributions
    /// in rank order. Must be called collectively in the same order.
    pub fn allgather(&self, bytes: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let tag = self.next_collective_tag();
        let p = self.size();
        let me = self.rank.0;
        let mut sends = Vec::with_capacity(p - 1);
        for r in (0..p).filter(|&r| r != me) {
            sends.push(self.post_send(RankId(r), tag, bytes.clone())?);
        }
        let mut recvs = Vec::with_capacity(p - 1);
        for r in (0..p).filter(|&r| r != me) {
            recvs.push(self.post_recv(RankId(r), tag)?);
        }
        self.wait_all(&mut recvs)?;
        self.wait_all(&mut sends)?;
        let mut out = Vec::with_capacity(p);
        let mut it = recvs.into_iter();
        for r in 0..p {
            if r == me {
                out.push(bytes.clone());
            } else {
                out.push(it.next().unwrap().take_payload().unwrap());
            }
        }
        Ok(out)
    }

    /// Rank `root`'s bytes delivered to every rank.
    pub fn broadcast(&self, root: RankId, bytes: Vec<u8>) -> Result<Vec<u8>> {
        let tag = self.next_collective_tag();
        if self.rank == root {
            let mut sends = Vec::new();
            for r in (0..self.size()).filter(|&r| r != root.0) {
                sends.push(self.post_send(RankId(r), tag, bytes.clone())?);
            }
            self.wait_all(&mut sends)?;
            Ok(bytes)
        } else {
            let mut h = [self.post_recv(root, tag)?];
            self.wait_all(&mut h)?;
            Ok(h[0].take_payload().unwrap())
        }
    }

    /// Allgather of `f64` slices, concatenated in rank order.
    pub fn allgather_f64(&self, values: &[f64]) -> Result<Vec<Vec<f64>>> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(self
            .allgather(bytes)?
            .into_iter()
            .map(|b| {
                b.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect())
    }

    /// Allgather of `u64` slices.
    pub fn allgather_u64(&self, values: &[u64]) -> Result<Vec<Vec<u64>>> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(self
            .allgather(bytes)?
            .into_iter()
            .map(|b| {
                b.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect())
    }
}

//! In-process network: every stream is a pair of delayed byte pipes.
//!
//! Establishing a stream costs one full RTT on the caller; each written chunk
//! becomes readable RTT/2 later on the other side, so a request/response pair
//! costs one RTT. Delays are served by the injected [`Clock`].

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::Duration;

use super::{Duplex, LinkProfile, Listener, NodeAddr, Transport, TransportError};
use crate::clock::SharedClock;

#[derive(Default)]
struct PipeState {
    chunks: VecDeque<(Duration, Vec<u8>)>,
    /// Writer went away; readers drain then see EOF.
    finished: bool,
    /// Aborted; pending data is discarded.
    aborted: bool,
}

struct Pipe {
    state: Mutex<PipeState>,
    cv: Condvar,
    delay: Duration,
    clock: SharedClock,
}

impl Pipe {
    fn new(delay: Duration, clock: SharedClock) -> Arc<Self> {
        Arc::new(Self { state: Mutex::default(), cv: Condvar::new(), delay, clock })
    }

    fn abort(&self) {
        let mut st = self.state.lock().unwrap();
        st.aborted = true;
        st.chunks.clear();
        self.cv.notify_all();
    }
}

struct PipeReader {
    pipe: Arc<Pipe>,
    buf: Vec<u8>,
    pos: usize,
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.pos >= self.buf.len() {
            let (deliver_at, chunk) = {
                let mut st = self.pipe.state.lock().unwrap();
                loop {
                    if st.aborted {
                        return Err(io::ErrorKind::ConnectionReset.into());
                    }
                    if let Some(c) = st.chunks.pop_front() {
                        break c;
                    }
                    if st.finished {
                        return Ok(0);
                    }
                    st = self.pipe.cv.wait(st).unwrap();
                }
            };
            self.pipe.clock.sleep_until(deliver_at);
            if self.pipe.state.lock().unwrap().aborted {
                return Err(io::ErrorKind::ConnectionReset.into());
            }
            self.buf = chunk;
            self.pos = 0;
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

struct PipeWriter {
    pipe: Arc<Pipe>,
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        let mut st = self.pipe.state.lock().unwrap();
        if st.aborted {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        let at = self.pipe.clock.now() + self.pipe.delay;
        st.chunks.push_back((at, data.to_vec()));
        self.pipe.cv.notify_all();
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        let mut st = self.pipe.state.lock().unwrap();
        st.finished = true;
        self.pipe.cv.notify_all();
    }
}

type Inbound = (Duplex, NodeAddr);

struct MemListener {
    rx: Receiver<Inbound>,
}

impl Listener for MemListener {
    fn accept(&mut self) -> Result<Inbound, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Io(io::ErrorKind::NotConnected.into()))
    }
}

/// The in-memory backend. Cheap to clone behind an `Arc`; all nodes of an
/// in-process cluster share one instance.
pub struct MemTransport {
    clock: SharedClock,
    profile: Mutex<LinkProfile>,
    listeners: Mutex<HashMap<NodeAddr, Sender<Inbound>>>,
    pipes: Mutex<HashMap<NodeAddr, Vec<Weak<Pipe>>>>,
    established: AtomicUsize,
}

impl MemTransport {
    pub fn new(clock: SharedClock, profile: LinkProfile) -> Arc<Self> {
        Arc::new(Self {
            clock,
            profile: Mutex::new(profile),
            listeners: Mutex::default(),
            pipes: Mutex::default(),
            established: AtomicUsize::new(0),
        })
    }

    pub fn profile(&self) -> LinkProfile {
        self.profile.lock().unwrap().clone()
    }

    pub fn set_profile(&self, profile: LinkProfile) {
        *self.profile.lock().unwrap() = profile;
    }

    pub fn is_listening(&self, addr: &NodeAddr) -> bool {
        self.listeners.lock().unwrap().contains_key(addr)
    }

    fn track(&self, addr: &NodeAddr, pipes: &[&Arc<Pipe>]) {
        let mut map = self.pipes.lock().unwrap();
        let list = map.entry(addr.clone()).or_default();
        list.retain(|w| w.strong_count() > 0);
        list.extend(pipes.iter().map(|p| Arc::downgrade(p)));
    }
}

impl Transport for MemTransport {
    fn connect(&self, local: &NodeAddr, peer: &NodeAddr) -> Result<Duplex, TransportError> {
        let tx = self
            .listeners
            .lock()
            .unwrap()
            .get(peer)
            .cloned()
            .ok_or_else(|| TransportError::Refused(peer.clone()))?;
        let rtt = self.profile.lock().unwrap().rtt(local, peer);
        self.clock.sleep(rtt);

        let one_way = rtt / 2;
        let up = Pipe::new(one_way, self.clock.clone());
        let down = Pipe::new(rtt - one_way, self.clock.clone());
        let closer = {
            let (u, d) = (up.clone(), down.clone());
            Arc::new(move || {
                u.abort();
                d.abort();
            }) as Arc<dyn Fn() + Send + Sync>
        };
        let server_side = Duplex {
            reader: Box::new(PipeReader { pipe: up.clone(), buf: vec![], pos: 0 }),
            writer: Box::new(PipeWriter { pipe: down.clone() }),
            closer: closer.clone(),
        };
        tx.send((server_side, local.clone())).map_err(|_| TransportError::Refused(peer.clone()))?;
        self.track(local, &[&up, &down]);
        self.track(peer, &[&up, &down]);
        self.established.fetch_add(1, Ordering::SeqCst);
        Ok(Duplex {
            reader: Box::new(PipeReader { pipe: down, buf: vec![], pos: 0 }),
            writer: Box::new(PipeWriter { pipe: up }),
            closer,
        })
    }

    fn bind(&self, addr: &NodeAddr) -> Result<Box<dyn Listener>, TransportError> {
        let mut listeners = self.listeners.lock().unwrap();
        if listeners.contains_key(addr) {
            return Err(TransportError::Io(io::Error::new(
                io::ErrorKind::AddrInUse,
                format!("{addr} already bound"),
            )));
        }
        let (tx, rx) = mpsc::channel();
        listeners.insert(addr.clone(), tx);
        Ok(Box::new(MemListener { rx }))
    }

    fn shutdown(&self, addr: &NodeAddr) {
        self.listeners.lock().unwrap().remove(addr);
        let pipes = self.pipes.lock().unwrap().remove(addr).unwrap_or_default();
        for p in pipes.iter().filter_map(Weak::upgrade) {
            p.abort();
        }
    }

    fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    fn connections_established(&self) -> usize {
        self.established.load(Ordering::SeqCst)
    }
}

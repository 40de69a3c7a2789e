use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::debug;

use super::{
    encode_message_with_limit, read_frame, Duplex, Message, MessageKind, NodeAddr, SharedTransport, TransportError,
    DEFAULT_MAX_PAYLOAD, DEFAULT_RPC_TIMEOUT,
};

type Pending = Arc<Mutex<HashMap<u64, Sender<Message>>>>;

/// A shareable request/response channel to one peer.
///
/// Responses are matched to callers by request id, so any number of threads
/// may have calls in flight at once. Progress frames for a request are handed
/// to that request's caller; the timeout is an inactivity timeout and restarts
/// on every progress frame.
pub struct Channel {
    local: NodeAddr,
    peer: NodeAddr,
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    open: Arc<AtomicBool>,
    next_id: AtomicU64,
    closer: Arc<dyn Fn() + Send + Sync>,
    timeout: Duration,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("local", &self.local)
            .field("peer", &self.peer)
            .field("open", &self.is_open())
            .finish()
    }
}

impl Channel {
    pub fn establish(
        transport: &SharedTransport,
        local: &NodeAddr,
        peer: &NodeAddr,
        timeout: Duration,
    ) -> Result<Arc<Self>, TransportError> {
        let Duplex { mut reader, writer, closer } = transport.connect(local, peer)?;
        let pending: Pending = Arc::default();
        let open = Arc::new(AtomicBool::new(true));
        {
            let pending = pending.clone();
            let open = open.clone();
            let peer = peer.clone();
            thread::Builder::new()
                .name(format!("chan-{peer}"))
                .spawn(move || {
                    loop {
                        match read_frame(&mut *reader, DEFAULT_MAX_PAYLOAD) {
                            Ok(Some(msg)) => {
                                let mut p = pending.lock().unwrap();
                                let terminal = msg.kind.is_terminal_reply();
                                let rid = msg.request_id;
                                if let Some(tx) = p.get(&rid) {
                                    let _ = tx.send(msg);
                                    if terminal {
                                        p.remove(&rid);
                                    }
                                } else {
                                    debug!("unsolicited frame {rid} from {peer}");
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                debug!("channel to {peer} closed: {e}");
                                break;
                            }
                        }
                    }
                    open.store(false, Ordering::SeqCst);
                    pending.lock().unwrap().clear();
                })
                .map_err(TransportError::Io)?;
        }
        Ok(Arc::new(Self {
            local: local.clone(),
            peer: peer.clone(),
            writer: Mutex::new(writer),
            pending,
            open,
            next_id: AtomicU64::new(1),
            closer,
            timeout,
        }))
    }

    pub fn peer(&self) -> &NodeAddr {
        &self.peer
    }

    pub fn local(&self) -> &NodeAddr {
        &self.local
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::SeqCst)
    }

    pub fn close(&self) {
        self.open.store(false, Ordering::SeqCst);
        (self.closer)();
    }

    /// Send `request` using its own request id and wait for the matching reply.
    pub fn rpc(&self, request: Message) -> Result<Message, TransportError> {
        self.rpc_with_progress(request, &mut |_| {})
    }

    pub fn rpc_with_progress(
        &self,
        request: Message,
        on_progress: &mut dyn FnMut(&[u8]),
    ) -> Result<Message, TransportError> {
        let rid = request.request_id;
        let (tx, rx) = mpsc::channel();
        {
            let mut p = self.pending.lock().unwrap();
            if !self.is_open() {
                return Err(TransportError::Closed(self.peer.clone()));
            }
            if p.contains_key(&rid) {
                return Err(TransportError::DuplicateRequestId(rid));
            }
            p.insert(rid, tx);
        }
        let sent = encode_message_with_limit(&request, DEFAULT_MAX_PAYLOAD).and_then(|bytes| {
            let mut w = self.writer.lock().unwrap();
            w.write_all(&bytes)?;
            w.flush()?;
            Ok(())
        });
        if let Err(e) = sent {
            self.pending.lock().unwrap().remove(&rid);
            if matches!(e, TransportError::Io(_)) {
                self.close();
            }
            return Err(e);
        }
        loop {
            match rx.recv_timeout(self.timeout) {
                Ok(msg) if msg.kind == MessageKind::Progress => on_progress(&msg.payload),
                Ok(msg) => return Ok(msg),
                Err(RecvTimeoutError::Timeout) => {
                    self.pending.lock().unwrap().remove(&rid);
                    return Err(TransportError::Timeout { peer: self.peer.clone(), request_id: rid, after: self.timeout });
                }
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed(self.peer.clone())),
            }
        }
    }

    fn fresh_id(&self) -> u64 {
        // Auto-assigned ids live in the upper half so they never meet small
        // caller-chosen ids.
        (1 << 63) | self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Send a request with a fresh id.
    pub fn call(&self, kind: MessageKind, payload: Vec<u8>) -> Result<Message, TransportError> {
        self.rpc(Message::new(kind, self.fresh_id(), payload))
    }

    pub fn call_with_progress(
        &self,
        kind: MessageKind,
        payload: Vec<u8>,
        on_progress: &mut dyn FnMut(&[u8]),
    ) -> Result<Message, TransportError> {
        self.rpc_with_progress(Message::new(kind, self.fresh_id(), payload), on_progress)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        (self.closer)();
    }
}

type Slot = Arc<Mutex<Option<Arc<Channel>>>>;

/// Per-node cache of open channels: at most one per peer, reused while open.
pub struct ChannelPool {
    transport: SharedTransport,
    local: NodeAddr,
    slots: Mutex<HashMap<NodeAddr, Slot>>,
    timeout: Duration,
    connects: AtomicUsize,
}

impl ChannelPool {
    pub fn new(transport: SharedTransport, local: NodeAddr) -> Self {
        Self::with_timeout(transport, local, DEFAULT_RPC_TIMEOUT)
    }

    pub fn with_timeout(transport: SharedTransport, local: NodeAddr, timeout: Duration) -> Self {
        Self { transport, local, slots: Mutex::default(), timeout, connects: AtomicUsize::new(0) }
    }

    pub fn local(&self) -> &NodeAddr {
        &self.local
    }

    pub fn transport(&self) -> &SharedTransport {
        &self.transport
    }

    /// Return the cached open channel to `peer`, establishing one if needed.
    pub fn open_channel(&self, peer: &NodeAddr) -> Result<Arc<Channel>, TransportError> {
        let slot = self.slots.lock().unwrap().entry(peer.clone()).or_default().clone();
        let mut guard = slot.lock().unwrap();
        if let Some(ch) = guard.as_ref() {
            if ch.is_open() {
                return Ok(ch.clone());
            }
        }
        let ch = Channel::establish(&self.transport, &self.local, peer, self.timeout)?;
        self.connects.fetch_add(1, Ordering::SeqCst);
        *guard = Some(ch.clone());
        Ok(ch)
    }

    /// Convenience: open (or reuse) and call.
    pub fn call(&self, peer: &NodeAddr, kind: MessageKind, payload: Vec<u8>) -> Result<Message, TransportError> {
        self.open_channel(peer)?.call(kind, payload)
    }

    pub fn evict(&self, peer: &NodeAddr) {
        if let Some(slot) = self.slots.lock().unwrap().remove(peer) {
            if let Some(ch) = slot.lock().unwrap().take() {
                ch.close();
            }
        }
    }

    pub fn close_all(&self) {
        let slots: Vec<Slot> = self.slots.lock().unwrap().drain().map(|(_, s)| s).collect();
        for s in slots {
            if let Some(ch) = s.lock().unwrap().take() {
                ch.close();
            }
        }
    }

    /// Channels this pool has established over its lifetime.
    pub fn connections_made(&self) -> usize {
        self.connects.load(Ordering::SeqCst)
    }
}

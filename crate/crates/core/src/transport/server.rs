use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use log::{debug, warn};

use super::{encode_message_with_limit, read_frame, Duplex, Message, MessageKind, NodeAddr, SharedTransport, TransportError, DEFAULT_MAX_PAYLOAD};
use crate::wire::WireWriter;

/// Error code carried by replies for handler panics.
pub(crate) const INTERNAL_ERROR_CODE: u8 = 255;

type SharedWriter = Arc<Mutex<Box<dyn Write + Send>>>;

/// Request handler. One call per inbound request, possibly concurrently.
pub trait Service: Send + Sync + 'static {
    /// Produce the terminal response. The server stamps the request id.
    fn handle(&self, ctx: &RequestContext, request: Message) -> Message;
}

#[derive(Clone)]
pub struct RequestContext {
    from: NodeAddr,
    request_id: u64,
    writer: SharedWriter,
}

impl RequestContext {
    /// Address of the connecting party, as observed by the transport.
    pub fn from(&self) -> &NodeAddr {
        &self.from
    }

    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    /// Send an intermediate progress frame for this request.
    pub fn progress(&self, payload: Vec<u8>) -> Result<(), TransportError> {
        write_frame(&self.writer, &Message::new(MessageKind::Progress, self.request_id, payload))
    }
}

fn write_frame(writer: &SharedWriter, msg: &Message) -> Result<(), TransportError> {
    let bytes = encode_message_with_limit(msg, DEFAULT_MAX_PAYLOAD)?;
    let mut w = writer.lock().unwrap();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// An accept loop bound to one address, dispatching to a [`Service`].
pub struct Server {
    addr: NodeAddr,
    transport: SharedTransport,
    stopped: Arc<AtomicBool>,
    closers: Arc<Mutex<Vec<Arc<dyn Fn() + Send + Sync>>>>,
}

impl Server {
    pub fn start(transport: SharedTransport, addr: NodeAddr, service: Arc<dyn Service>) -> Result<Self, TransportError> {
        let mut listener = transport.bind(&addr)?;
        let stopped = Arc::new(AtomicBool::new(false));
        let closers: Arc<Mutex<Vec<Arc<dyn Fn() + Send + Sync>>>> = Arc::default();
        {
            let stopped = stopped.clone();
            let closers = closers.clone();
            let addr = addr.clone();
            thread::Builder::new()
                .name(format!("accept-{addr}"))
                .spawn(move || loop {
                    let (duplex, from) = match listener.accept() {
                        Ok(x) => x,
                        Err(e) => {
                            debug!("{addr}: accept loop ends: {e}");
                            return;
                        }
                    };
                    if stopped.load(Ordering::SeqCst) {
                        (duplex.closer)();
                        return;
                    }
                    closers.lock().unwrap().push(duplex.closer.clone());
                    let svc = service.clone();
                    thread::spawn(move || serve_connection(duplex, from, svc));
                })
                .map_err(TransportError::Io)?;
        }
        Ok(Self { addr, transport, stopped, closers })
    }

    pub fn addr(&self) -> &NodeAddr {
        &self.addr
    }

    /// Stop accepting and abort every open connection.
    pub fn stop(&self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.transport.shutdown(&self.addr);
        for c in self.closers.lock().unwrap().drain(..) {
            c();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(duplex: Duplex, from: NodeAddr, service: Arc<dyn Service>) {
    let Duplex { mut reader, writer, closer } = duplex;
    let writer: SharedWriter = Arc::new(Mutex::new(writer));
    loop {
        let request = match read_frame(&mut *reader, DEFAULT_MAX_PAYLOAD) {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                debug!("connection from {from} ends: {e}");
                break;
            }
        };
        let ctx = RequestContext { from: from.clone(), request_id: request.request_id, writer: writer.clone() };
        let svc = service.clone();
        thread::spawn(move || {
            let rid = request.request_id;
            let mut reply = match catch_unwind(AssertUnwindSafe(|| svc.handle(&ctx, request))) {
                Ok(r) => r,
                Err(panic) => {
                    let text = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "handler panicked".into());
                    warn!("handler panic serving {}: {text}", ctx.from);
                    let mut w = WireWriter::new();
                    w.u8(INTERNAL_ERROR_CODE).str(&text);
                    Message::new(MessageKind::Error, 0, w.finish())
                }
            };
            reply.request_id = rid;
            if let Err(e) = write_frame(&ctx.writer, &reply) {
                debug!("reply to {} lost: {e}", ctx.from);
            }
        });
    }
    closer();
}

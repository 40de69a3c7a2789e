use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Duplex, Listener, NodeAddr, Transport, TransportError};
use crate::clock::{SharedClock, SystemClock};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

/// Stream sockets. The caller address reported to services is the socket's
/// peer address, so access control sees the real client IP.
pub struct TcpTransport {
    clock: SharedClock,
    stopping: Mutex<HashMap<NodeAddr, (Arc<AtomicBool>, SocketAddr)>>,
    established: AtomicUsize,
}

impl TcpTransport {
    pub fn new() -> Arc<Self> {
        Arc::new(Self { clock: SystemClock::shared(), stopping: Mutex::default(), established: AtomicUsize::new(0) })
    }
}

fn resolve(addr: &NodeAddr) -> Result<SocketAddr, TransportError> {
    addr.as_str()
        .to_socket_addrs()
        .map_err(|_| TransportError::BadAddress(addr.to_string()))?
        .next()
        .ok_or_else(|| TransportError::BadAddress(addr.to_string()))
}

fn duplex(stream: TcpStream) -> io::Result<Duplex> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let closer_handle = stream.try_clone()?;
    Ok(Duplex {
        reader: Box::new(reader),
        writer: Box::new(stream),
        closer: Arc::new(move || {
            let _ = closer_handle.shutdown(Shutdown::Both);
        }),
    })
}

struct TcpListenerHandle {
    inner: TcpListener,
    stop: Arc<AtomicBool>,
}

impl Listener for TcpListenerHandle {
    fn accept(&mut self) -> Result<(Duplex, NodeAddr), TransportError> {
        let (stream, peer) = self.inner.accept()?;
        if self.stop.load(Ordering::SeqCst) {
            return Err(TransportError::Io(io::ErrorKind::NotConnected.into()));
        }
        Ok((duplex(stream)?, NodeAddr::new(peer.to_string())))
    }
}

impl Transport for TcpTransport {
    fn connect(&self, _local: &NodeAddr, peer: &NodeAddr) -> Result<Duplex, TransportError> {
        let sa = resolve(peer)?;
        let stream = TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT).map_err(|e| match e.kind() {
            io::ErrorKind::ConnectionRefused => TransportError::Refused(peer.clone()),
            _ => TransportError::Io(e),
        })?;
        self.established.fetch_add(1, Ordering::SeqCst);
        Ok(duplex(stream)?)
    }

    fn bind(&self, addr: &NodeAddr) -> Result<Box<dyn Listener>, TransportError> {
        let inner = TcpListener::bind(resolve(addr)?)?;
        let stop = Arc::new(AtomicBool::new(false));
        self.stopping.lock().unwrap().insert(addr.clone(), (stop.clone(), inner.local_addr()?));
        Ok(Box::new(TcpListenerHandle { inner, stop }))
    }

    fn shutdown(&self, addr: &NodeAddr) {
        if let Some((stop, sa)) = self.stopping.lock().unwrap().remove(addr) {
            stop.store(true, Ordering::SeqCst);
            // unblock accept()
            let _ = TcpStream::connect_timeout(&sa, Duration::from_millis(200));
        }
    }

    fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    fn connections_established(&self) -> usize {
        self.established.load(Ordering::SeqCst)
    }
}

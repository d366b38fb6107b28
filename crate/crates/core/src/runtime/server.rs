use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};

use crate::evaluation::Evaluator;
use crate::protocol::{parse_inbound, write_message, ControlMessage, HealthReply, Inbound, ResultMessage, MAX_LINE_BYTES};

const POLL: Duration = Duration::from_millis(25);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub jobs: u64,
    pub evaluations: u64,
    pub protocol_errors: u64,
}

struct Shared {
    evaluator: Arc<dyn Evaluator>,
    shutdown: Arc<AtomicBool>,
    cache: Mutex<HashMap<u64, Arc<OnceLock<ResultMessage>>>>,
    in_flight: AtomicUsize,
    jobs: AtomicU64,
    evaluations: AtomicU64,
    protocol_errors: AtomicU64,
}

impl Shared {
    fn run_job(&self, job: crate::evaluation::EvalRequest) -> ResultMessage {
        self.jobs.fetch_add(1, Ordering::SeqCst);
        let cell = self.cache.lock().expect("cache lock").entry(job.id).or_default().clone();
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let reply = cell
            .get_or_init(|| {
                self.evaluations.fetch_add(1, Ordering::SeqCst);
                match self.evaluator.evaluate(&job).and_then(|r| r.check_epochs(job.epochs).map(|_| r)) {
                    Ok(r) => ResultMessage::ok(job.id, &r),
                    Err(e) => ResultMessage::failed(job.id, &e),
                }
            })
            .clone();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        if reply.retriable {
            // transient failures are not memoized so a retry re-runs the job
            self.cache.lock().expect("cache lock").remove(&job.id);
        }
        reply
    }

    fn handle(&self, stream: TcpStream) -> io::Result<()> {
        stream.set_read_timeout(Some(POLL))?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let mut pending = Vec::new();
        loop {
            let limit = (MAX_LINE_BYTES + 1).saturating_sub(pending.len()) as u64;
            match reader.by_ref().take(limit).read_until(b'\n', &mut pending) {
                Ok(n) => {
                    if pending.ends_with(b"\n") {
                        let line = std::mem::take(&mut pending);
                        if self.answer(&line, &mut writer)? {
                            return Ok(());
                        }
                    } else if pending.len() > MAX_LINE_BYTES {
                        self.protocol_errors.fetch_add(1, Ordering::SeqCst);
                        write_message(&mut writer, &ResultMessage::protocol_error(None, "message line too long"))?;
                        return Ok(());
                    } else if n == 0 {
                        // end of stream; answer a final unterminated line if any
                        if !pending.is_empty() {
                            self.answer(&pending, &mut writer)?;
                        }
                        return Ok(());
                    }
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    if self.shutdown.load(Ordering::SeqCst) {
                        return Ok(());
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Answers one line; returns true when the connection should close.
    fn answer<W: Write>(&self, raw: &[u8], out: &mut W) -> io::Result<bool> {
        let text = String::from_utf8_lossy(raw);
        let line = text.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            return Ok(false);
        }
        match parse_inbound(line) {
            Err(reply) => {
                self.protocol_errors.fetch_add(1, Ordering::SeqCst);
                write_message(out, &reply)?;
                Ok(false)
            }
            Ok(Inbound::Job(job)) => {
                let reply = self.run_job(job);
                write_message(out, &reply)?;
                Ok(false)
            }
            Ok(Inbound::Control(ControlMessage::Health)) => {
                write_message(out, &self.health("health"))?;
                Ok(false)
            }
            Ok(Inbound::Control(ControlMessage::Shutdown)) => {
                info!("shutdown requested");
                self.shutdown.store(true, Ordering::SeqCst);
                write_message(out, &self.health("shutdown"))?;
                Ok(true)
            }
        }
    }

    fn health(&self, kind: &str) -> HealthReply {
        HealthReply {
            kind: kind.to_string(),
            status: "ok".to_string(),
            in_flight: self.in_flight.load(Ordering::SeqCst),
            served: self.jobs.load(Ordering::SeqCst),
        }
    }

    fn stats(&self) -> ServeStats {
        ServeStats {
            jobs: self.jobs.load(Ordering::SeqCst),
            evaluations: self.evaluations.load(Ordering::SeqCst),
            protocol_errors: self.protocol_errors.load(Ordering::SeqCst),
        }
    }
}

fn serve(listener: TcpListener, shared: Arc<Shared>) -> io::Result<ServeStats> {
    listener.set_nonblocking(true)?;
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                stream.set_nonblocking(false)?;
                let s = shared.clone();
                workers.push(thread::spawn(move || {
                    if let Err(e) = s.handle(stream) {
                        warn!("connection from {peer} ended: {e}");
                    }
                }));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => return Err(e),
        }
    }
    drop(listener);
    for w in workers {
        let _ = w.join();
    }
    Ok(shared.stats())
}

/// Serves jobs on `listener` until a shutdown message arrives or `shutdown` is
/// set; in-flight jobs finish and are answered before the call returns.
pub fn compute_node_serve(
    listener: TcpListener,
    evaluator: Arc<dyn Evaluator>,
    shutdown: Arc<AtomicBool>,
) -> io::Result<ServeStats> {
    let shared = Arc::new(Shared {
        evaluator,
        shutdown,
        cache: Mutex::new(HashMap::new()),
        in_flight: AtomicUsize::new(0),
        jobs: AtomicU64::new(0),
        evaluations: AtomicU64::new(0),
        protocol_errors: AtomicU64::new(0),
    });
    serve(listener, shared)
}

/// A compute node running on a background thread.
pub struct NodeServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<io::Result<ServeStats>>>,
}

impl NodeServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets in-flight jobs finish, and returns the counters.
    pub fn shutdown(mut self) -> io::Result<ServeStats> {
        self.shutdown.store(true, Ordering::SeqCst);
        self.join_inner()
    }

    /// Waits for the node to stop on its own (after a shutdown message).
    pub fn join(mut self) -> io::Result<ServeStats> {
        self.join_inner()
    }

    fn join_inner(&mut self) -> io::Result<ServeStats> {
        match self.handle.take() {
            Some(h) => h.join().map_err(|_| io::Error::other("compute node thread panicked"))?,
            None => Ok(ServeStats::default()),
        }
    }
}

impl Drop for NodeServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = self.join_inner();
    }
}

/// Binds `addr` (port 0 for any) and serves on a background thread.
pub fn spawn_compute_node<A: ToSocketAddrs>(addr: A, evaluator: Arc<dyn Evaluator>) -> io::Result<NodeServer> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let handle = thread::spawn(move || compute_node_serve(listener, evaluator, flag));
    Ok(NodeServer { addr: local, shutdown, handle: Some(handle) })
}

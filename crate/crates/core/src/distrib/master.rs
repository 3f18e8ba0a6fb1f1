//! Master side: owns the connections and drives the [`Scheduler`].

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::protocol::{decode, pipe, EvalJob, FrameSink, FrameSource, Message, StreamSource};
use super::scheduler::{Scheduler, SchedulerConfig, WorkerId};
use super::worker::{serve, WorkerOptions};
use super::DistribError;
use crate::assembly::{AssembledNetwork, LayerOp};
use crate::evaluator::{BatchEvaluator, EvaluationBudget, EvaluatorError, EvaluatorSpec, FitnessReport};
use crate::hyperparams::LayerKind;

enum Event {
    Connected(WorkerId, Box<dyn FrameSink>),
    Frame(WorkerId, Vec<u8>),
    Closed(WorkerId),
}

const POLL: Duration = Duration::from_millis(20);

/// Dispatches generations of networks to workers and waits for all of them.
pub struct Master {
    spec: EvaluatorSpec,
    scheduler: Scheduler,
    sinks: BTreeMap<WorkerId, Box<dyn FrameSink>>,
    events: mpsc::Receiver<Event>,
    events_tx: mpsc::Sender<Event>,
    next_worker: Arc<AtomicU64>,
    local_threads: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
    listen_addr: Option<SocketAddr>,
    /// How long a remote master waits with no worker connected.
    pub worker_wait: Duration,
    start: Instant,
}

impl Master {
    fn bare(spec: EvaluatorSpec, config: SchedulerConfig) -> Self {
        let (events_tx, events) = mpsc::channel();
        Self {
            spec,
            scheduler: Scheduler::new(config),
            sinks: BTreeMap::new(),
            events,
            events_tx,
            next_worker: Arc::new(AtomicU64::new(0)),
            local_threads: Vec::new(),
            stop: Arc::new(AtomicBool::new(false)),
            listen_addr: None,
            worker_wait: Duration::from_secs(300),
            start: Instant::now(),
        }
    }

    /// In-process worker threads talking the wire protocol over pipes, one
    /// per entry of `workers`.
    pub fn local(
        spec: EvaluatorSpec,
        config: SchedulerConfig,
        workers: Vec<WorkerOptions>,
    ) -> Result<Self, DistribError> {
        if workers.is_empty() {
            return Err(DistribError::NoWorkers);
        }
        let mut master = Self::bare(spec, config);
        master.worker_wait = Duration::ZERO;
        for options in workers {
            let ((master_sink, master_source), (worker_sink, worker_source)) = pipe();
            let id = master.attach(Box::new(master_sink), Box::new(master_source));
            let handle = thread::Builder::new()
                .name(format!("worker-{}", id.0))
                .spawn(move || match serve(Box::new(worker_source), Box::new(worker_sink), &options) {
                    Ok(exit) => log::debug!("local worker {id} exited: {exit:?}"),
                    Err(e) => log::debug!("local worker {id} failed: {e}"),
                })
                .map_err(DistribError::Io)?;
            master.local_threads.push(handle);
        }
        Ok(master)
    }

    pub fn local_pool(spec: EvaluatorSpec, workers: usize) -> Result<Self, DistribError> {
        Self::local(spec, SchedulerConfig::default(), vec![WorkerOptions::default(); workers])
    }

    /// Accepts remote workers on `addr`.
    pub fn listen(addr: &str, spec: EvaluatorSpec, config: SchedulerConfig) -> Result<Self, DistribError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let mut master = Self::bare(spec, config);
        master.listen_addr = Some(listener.local_addr()?);
        let tx = master.events_tx.clone();
        let next = Arc::clone(&master.next_worker);
        let stop = Arc::clone(&master.stop);
        thread::Builder::new().name("accept".into()).spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let setup = stream
                            .set_nonblocking(false)
                            .and_then(|_| stream.set_nodelay(true))
                            .and_then(|_| stream.try_clone());
                        let reader = match setup {
                            Ok(r) => r,
                            Err(e) => {
                                log::warn!("dropping connection from {peer}: {e}");
                                continue;
                            }
                        };
                        let id = WorkerId(next.fetch_add(1, Ordering::Relaxed));
                        log::info!("worker {id} connected from {peer}");
                        if tx.send(Event::Connected(id, Box::new(stream))).is_err() {
                            return;
                        }
                        spawn_reader(id, Box::new(StreamSource(io::BufReader::new(reader))), tx.clone());
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })?;
        Ok(master)
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.listen_addr
    }

    pub fn spec(&self) -> &EvaluatorSpec {
        &self.spec
    }

    fn attach(&mut self, sink: Box<dyn FrameSink>, source: Box<dyn FrameSource>) -> WorkerId {
        let id = WorkerId(self.next_worker.fetch_add(1, Ordering::Relaxed));
        self.sinks.insert(id, sink);
        spawn_reader(id, source, self.events_tx.clone());
        id
    }

    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn drop_worker(&mut self, w: WorkerId, notify: bool) {
        if let Some(mut sink) = self.sinks.remove(&w) {
            if notify {
                let _ = sink.send(&Message::Shutdown);
            }
        }
        self.scheduler.lose(w);
    }

    fn handle(&mut self, event: Event) {
        let now = self.now();
        match event {
            Event::Connected(w, sink) => {
                self.sinks.insert(w, sink);
            }
            Event::Closed(w) => {
                log::debug!("worker {w} disconnected");
                self.drop_worker(w, false);
            }
            Event::Frame(w, body) => {
                if !self.sinks.contains_key(&w) {
                    return;
                }
                match decode(&body) {
                    Ok(Message::Register { capabilities }) => self.scheduler.register(w, capabilities, now),
                    Ok(Message::Heartbeat) => self.scheduler.heartbeat(w, now),
                    Ok(Message::Report { job_id, report, error }) => {
                        let job_id = job_id.or_else(|| {
                            self.scheduler
                                .workers()
                                .find(|s| s.worker_id == w)
                                .and_then(|s| s.inflight)
                        });
                        let Some(job_id) = job_id else {
                            log::warn!("unattributable report from {w}: {error:?}");
                            return;
                        };
                        let result = match (report, error) {
                            (Some(r), _) => Ok(r),
                            (None, e) => Err(e.unwrap_or_else(|| "empty report".into())),
                        };
                        self.scheduler.report(w, job_id, result, now);
                    }
                    Ok(other) => log::debug!("ignoring {other:?} from {w}"),
                    Err(e) => log::warn!("undecodable frame from {w}: {e}"),
                }
            }
        }
    }

    /// Runs one generation to completion.
    pub fn dispatch(&mut self, jobs: Vec<EvalJob>) -> Result<BTreeMap<u64, FitnessReport>, DistribError> {
        let ids: BTreeSet<u64> = jobs.iter().map(|j| j.job_id).collect();
        if ids.len() != jobs.len() {
            return Err(DistribError::DuplicateJob);
        }
        self.scheduler.submit(jobs);
        let mut alone_since = None;
        loop {
            while let Ok(e) = self.events.try_recv() {
                self.handle(e);
            }
            let now = self.now();
            for w in self.scheduler.tick(now) {
                self.drop_worker(w, true);
            }
            for (w, job) in self.scheduler.assign(now) {
                let sent = match self.sinks.get_mut(&w) {
                    Some(sink) => sink.send(&Message::Job(job)).is_ok(),
                    None => false,
                };
                if !sent {
                    self.drop_worker(w, false);
                }
            }
            if self.scheduler.is_done() {
                break;
            }
            if self.sinks.is_empty() {
                let since = *alone_since.get_or_insert(now);
                if now.saturating_sub(since) >= self.worker_wait {
                    self.scheduler.abandon();
                    return Err(DistribError::NoWorkers);
                }
            } else {
                alone_since = None;
            }
            match self.events.recv_timeout(POLL) {
                Ok(e) => self.handle(e),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("master holds a sender"),
            }
        }
        Ok(self.scheduler.take_results())
    }
}

impl Drop for Master {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for sink in self.sinks.values_mut() {
            let _ = sink.send(&Message::Shutdown);
        }
        self.sinks.clear();
        for h in self.local_threads.drain(..) {
            let _ = h.join();
        }
    }
}

fn spawn_reader(id: WorkerId, mut source: Box<dyn FrameSource>, tx: mpsc::Sender<Event>) {
    thread::spawn(move || loop {
        match source.recv() {
            Ok(Some(body)) => {
                if tx.send(Event::Frame(id, body)).is_err() {
                    return;
                }
            }
            Ok(None) | Err(_) => {
                let _ = tx.send(Event::Closed(id));
                return;
            }
        }
    });
}

/// Compute layer kinds a worker must support to run `net`.
pub fn required_kinds(net: &AssembledNetwork) -> Vec<LayerKind> {
    let mut kinds = BTreeSet::new();
    for l in &net.layers {
        match l.op {
            LayerOp::Dense { .. } => kinds.insert(LayerKind::Dense),
            LayerOp::Conv { .. } => kinds.insert(LayerKind::Conv),
            LayerOp::Lstm { .. } => kinds.insert(LayerKind::Lstm),
            _ => false,
        };
    }
    kinds.into_iter().collect()
}

pub fn make_jobs(
    networks: &[(u64, AssembledNetwork)],
    budget: &EvaluationBudget,
    spec: &EvaluatorSpec,
) -> Vec<EvalJob> {
    networks
        .iter()
        .map(|(id, net)| EvalJob {
            job_id: *id,
            network: serde_json::to_value(net).expect("networks always serialize"),
            budget: *budget,
            evaluator: spec.clone(),
            attempt: 0,
            requires: required_kinds(net),
        })
        .collect()
}

impl BatchEvaluator for Master {
    fn evaluate_batch(
        &mut self,
        networks: &[(u64, AssembledNetwork)],
        budget: &EvaluationBudget,
    ) -> Result<Vec<FitnessReport>, EvaluatorError> {
        let jobs = make_jobs(networks, budget, &self.spec);
        let mut results = self.dispatch(jobs).map_err(|e| EvaluatorError::Failed(e.to_string()))?;
        networks
            .iter()
            .map(|(id, _)| {
                results
                    .remove(id)
                    .ok_or_else(|| EvaluatorError::Failed(format!("job {id} unresolved")))
            })
            .collect()
    }
}

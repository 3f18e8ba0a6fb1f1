//! Worker side: register, heartbeat, evaluate jobs until told to stop.

use std::collections::HashMap;
use std::io;
use std::net::TcpStream;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::protocol::{decode, EvalJob, FrameSink, FrameSource, Message, StreamSource};
use crate::assembly::AssembledNetwork;
use crate::evaluator::{evaluate_or_floor, Evaluator};
use crate::hyperparams::LayerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOptions {
    pub capabilities: Vec<LayerKind>,
    pub heartbeat_interval: Duration,
    /// Fault injection: drop the connection without replying on receipt of
    /// the n-th job (1-based).
    pub fail_on_job: Option<usize>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        Self {
            capabilities: vec![LayerKind::Dense, LayerKind::Conv, LayerKind::Lstm],
            heartbeat_interval: Duration::from_secs(1),
            fail_on_job: None,
        }
    }
}

/// Why [`serve`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerExit {
    Shutdown,
    Disconnected,
    Killed,
}

/// Builds evaluators on first use and keeps them for later jobs with the
/// same specification.
#[derive(Default)]
struct EvaluatorCache {
    built: HashMap<String, Arc<dyn Evaluator>>,
}

impl EvaluatorCache {
    fn run(&mut self, job: &EvalJob) -> Result<crate::evaluator::FitnessReport, String> {
        let net: AssembledNetwork =
            serde_json::from_value(job.network.clone()).map_err(|e| format!("bad network payload: {e}"))?;
        net.validate().map_err(|e| format!("invalid network: {e}"))?;
        job.budget.validate().map_err(|e| e.to_string())?;
        let key = serde_json::to_string(&job.evaluator).map_err(|e| e.to_string())?;
        let evaluator = self.built.entry(key).or_insert_with(|| job.evaluator.build());
        Ok(evaluate_or_floor(&**evaluator, job.job_id, &net, &job.budget))
    }
}

/// Serves one connection until shutdown, disconnect, or injected failure.
pub fn serve(
    mut source: Box<dyn FrameSource>,
    sink: Box<dyn FrameSink>,
    options: &WorkerOptions,
) -> io::Result<WorkerExit> {
    let sink = Arc::new(Mutex::new(sink));
    send(&sink, &Message::Register {
        capabilities: options.capabilities.clone(),
    })?;
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let beat_sink = Arc::clone(&sink);
    let interval = options.heartbeat_interval;
    let beats = thread::spawn(move || loop {
        match stop_rx.recv_timeout(interval) {
            Err(RecvTimeoutError::Timeout) => {
                if send(&beat_sink, &Message::Heartbeat).is_err() {
                    return;
                }
            }
            _ => return,
        }
    });
    let result = job_loop(&mut *source, &sink, options);
    drop(stop_tx);
    let _ = beats.join();
    result
}

fn send(sink: &Mutex<Box<dyn FrameSink>>, msg: &Message) -> io::Result<()> {
    sink.lock().unwrap_or_else(|e| e.into_inner()).send(msg)
}

fn job_loop(
    source: &mut dyn FrameSource,
    sink: &Mutex<Box<dyn FrameSink>>,
    options: &WorkerOptions,
) -> io::Result<WorkerExit> {
    let mut cache = EvaluatorCache::default();
    let mut jobs_seen = 0usize;
    loop {
        let Some(body) = source.recv()? else {
            return Ok(WorkerExit::Disconnected);
        };
        let reply = match decode(&body) {
            Ok(Message::Job(job)) => {
                jobs_seen += 1;
                if options.fail_on_job == Some(jobs_seen) {
                    log::warn!("injected failure on job {}", job.job_id);
                    return Ok(WorkerExit::Killed);
                }
                match cache.run(&job) {
                    Ok(report) => Message::Report {
                        job_id: Some(job.job_id),
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => Message::Report {
                        job_id: Some(job.job_id),
                        report: None,
                        error: Some(e),
                    },
                }
            }
            Ok(Message::Shutdown) => return Ok(WorkerExit::Shutdown),
            Ok(other) => {
                log::debug!("ignoring {other:?}");
                continue;
            }
            Err(e) => Message::Report {
                job_id: None,
                report: None,
                error: Some(format!("malformed message: {e}")),
            },
        };
        send(sink, &reply)?;
    }
}

/// Exponential reconnect delays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
    /// Consecutive failed connection attempts tolerated before giving up.
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(100),
            max: Duration::from_secs(5),
            max_attempts: 10,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.initial.saturating_mul(1u32 << attempt.min(16)).min(self.max)
    }
}

/// Connects to a master, serving until it sends SHUTDOWN. Lost or refused
/// connections are retried with `backoff`.
pub fn run_tcp_worker(addr: &str, options: &WorkerOptions, backoff: &Backoff) -> io::Result<()> {
    let mut failures = 0u32;
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                failures = 0;
                stream.set_nodelay(true)?;
                let reader = StreamSource(io::BufReader::new(stream.try_clone()?));
                match serve(Box::new(reader), Box::new(stream), options) {
                    Ok(WorkerExit::Shutdown) => return Ok(()),
                    Ok(exit) => log::warn!("connection to {addr} ended: {exit:?}"),
                    Err(e) => log::warn!("connection to {addr} failed: {e}"),
                }
            }
            Err(e) => {
                if failures >= backoff.max_attempts {
                    return Err(e);
                }
                log::warn!("cannot reach {addr}: {e}");
            }
        }
        thread::sleep(backoff.delay(failures));
        failures += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distrib::protocol::pipe;
    use crate::evaluator::{EvaluationBudget, EvaluatorSpec, StructuralTarget};

    fn spawn_worker(options: WorkerOptions) -> (super::super::protocol::PipeSink, super::super::protocol::PipeSource, thread::JoinHandle<io::Result<WorkerExit>>) {
        let ((master_sink, master_source), (worker_sink, worker_source)) = pipe();
        let handle = thread::spawn(move || serve(Box::new(worker_source), Box::new(worker_sink), &options));
        (master_sink, master_source, handle)
    }

    fn next(source: &mut super::super::protocol::PipeSource) -> Message {
        loop {
            let m = decode(&source.recv().unwrap().unwrap()).unwrap();
            if m != Message::Heartbeat {
                return m;
            }
        }
    }

    #[test]
    fn malformed_payload_gets_error_reply_and_worker_survives() {
        let (mut to_worker, mut from_worker, handle) = spawn_worker(WorkerOptions::default());
        assert!(matches!(next(&mut from_worker), Message::Register { .. }));
        to_worker.send_raw(b"{not json").unwrap();
        match next(&mut from_worker) {
            Message::Report { job_id: None, error: Some(_), report: None } => {}
            other => panic!("{other:?}"),
        }
        let job = EvalJob {
            job_id: 9,
            network: serde_json::json!({"layers": "nope"}),
            budget: EvaluationBudget::default(),
            evaluator: EvaluatorSpec::Surrogate(StructuralTarget {
                depth: 1,
                depth_weight: 1.0,
                param_weight: 0.0,
                params: vec![],
            }),
            attempt: 0,
            requires: vec![],
        };
        to_worker.send(&Message::Job(job)).unwrap();
        match next(&mut from_worker) {
            Message::Report { job_id: Some(9), error: Some(_), report: None } => {}
            other => panic!("{other:?}"),
        }
        to_worker.send(&Message::Shutdown).unwrap();
        assert_eq!(handle.join().unwrap().unwrap(), WorkerExit::Shutdown);
    }

    #[test]
    fn heartbeats_flow_while_idle() {
        let (mut to_worker, mut from_worker, handle) = spawn_worker(WorkerOptions {
            heartbeat_interval: Duration::from_millis(5),
            ..Default::default()
        });
        decode(&from_worker.recv().unwrap().unwrap()).unwrap();
        assert_eq!(decode(&from_worker.recv().unwrap().unwrap()).unwrap(), Message::Heartbeat);
        to_worker.send(&Message::Shutdown).unwrap();
        assert_eq!(handle.join().unwrap().unwrap(), WorkerExit::Shutdown);
    }

    #[test]
    fn backoff_doubles_then_caps() {
        let b = Backoff::default();
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(3), Duration::from_millis(800));
        assert_eq!(b.delay(30), Duration::from_secs(5));
    }
}

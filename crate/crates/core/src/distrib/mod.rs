//! Parallel evaluation over a small wire protocol.
//!
//! A [`Master`] hands each assembled network to a worker as a JOB and blocks
//! until every job of the generation has a REPORT. Workers are either local
//! threads connected through in-memory pipes or remote processes connected
//! over TCP; both speak the same framed JSON messages (see [`protocol`]).
//! Failed or lost jobs are retried up to `max_retries` times and then scored
//! with the fitness floor.

mod master;
pub mod protocol;
mod scheduler;
mod worker;

use thiserror::Error;

pub use master::{make_jobs, required_kinds, Master};
pub use protocol::{EvalJob, Message};
pub use scheduler::{ReportOutcome, Scheduler, SchedulerConfig, WorkerId, WorkerSession};
pub use worker::{run_tcp_worker, serve, Backoff, WorkerExit, WorkerOptions};

#[derive(Debug, Error)]
pub enum DistribError {
    #[error("no workers available")]
    NoWorkers,
    #[error("job ids must be unique within a generation")]
    DuplicateJob,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Scheduling state for one master. Pure: time is passed in by the caller, so
//! timeouts can be exercised without sleeping.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::EvalJob;
use crate::evaluator::FitnessReport;
use crate::hyperparams::LayerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub u64);

impl std::fmt::Display for WorkerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "w{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub max_retries: u32,
    /// Job timeout as a multiple of the median observed job duration.
    pub timeout_factor: f64,
    #[serde(with = "secs")]
    pub min_timeout: Duration,
    /// A worker silent for longer than this is declared dead.
    #[serde(with = "secs")]
    pub heartbeat_timeout: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            max_retries: 2,
            timeout_factor: 10.0,
            min_timeout: Duration::from_secs(30),
            heartbeat_timeout: Duration::from_secs(30),
        }
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSession {
    pub worker_id: WorkerId,
    pub capabilities: Vec<LayerKind>,
    pub inflight: Option<u64>,
    pub last_heartbeat: Duration,
}

#[derive(Debug, Clone, PartialEq)]
struct Inflight {
    job: EvalJob,
    worker: WorkerId,
    started: Duration,
}

/// What happened to an incoming report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportOutcome {
    Accepted,
    Retried,
    GaveUp,
    Discarded,
}

#[derive(Debug, Default)]
pub struct Scheduler {
    config: SchedulerConfig,
    workers: BTreeMap<WorkerId, WorkerSession>,
    pending: VecDeque<EvalJob>,
    inflight: BTreeMap<u64, Inflight>,
    results: BTreeMap<u64, FitnessReport>,
    expected: usize,
    durations: Vec<Duration>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerSession> {
        self.workers.values()
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    /// Starts a new generation. Any results of the previous one must have
    /// been taken.
    pub fn submit(&mut self, jobs: Vec<EvalJob>) {
        debug_assert!(self.is_done(), "previous generation unfinished");
        self.results.clear();
        self.expected = jobs.len();
        self.pending = jobs.into();
    }

    pub fn register(&mut self, worker: WorkerId, capabilities: Vec<LayerKind>, now: Duration) {
        if let Some(old) = self.workers.get(&worker) {
            if old.inflight.is_some() {
                self.lose(worker);
            }
        }
        self.workers.insert(
            worker,
            WorkerSession {
                worker_id: worker,
                capabilities,
                inflight: None,
                last_heartbeat: now,
            },
        );
    }

    pub fn heartbeat(&mut self, worker: WorkerId, now: Duration) {
        if let Some(w) = self.workers.get_mut(&worker) {
            w.last_heartbeat = now;
        }
    }

    /// Forgets a worker and re-queues its inflight job.
    pub fn lose(&mut self, worker: WorkerId) {
        let Some(session) = self.workers.remove(&worker) else {
            return;
        };
        if let Some(job_id) = session.inflight {
            if let Some(inflight) = self.inflight.remove(&job_id) {
                log::warn!("worker {worker} lost with job {job_id} in flight");
                self.retry(inflight.job, format!("worker {worker} lost"));
            }
        }
    }

    pub fn report(
        &mut self,
        worker: WorkerId,
        job_id: u64,
        result: Result<FitnessReport, String>,
        now: Duration,
    ) -> ReportOutcome {
        if let Some(w) = self.workers.get_mut(&worker) {
            w.last_heartbeat = now;
            if w.inflight == Some(job_id) {
                w.inflight = None;
            }
        }
        let owned = self
            .inflight
            .get(&job_id)
            .is_some_and(|i| i.worker == worker);
        if !owned {
            log::warn!("discarding duplicate or stale report for job {job_id} from {worker}");
            return ReportOutcome::Discarded;
        }
        let inflight = self.inflight.remove(&job_id).expect("checked above");
        match result {
            Ok(mut report) => {
                self.durations.push(now.saturating_sub(inflight.started));
                report.network_id = job_id;
                self.results.insert(job_id, report);
                ReportOutcome::Accepted
            }
            Err(e) => self.retry(inflight.job, e),
        }
    }

    fn retry(&mut self, mut job: EvalJob, reason: String) -> ReportOutcome {
        if job.attempt >= self.config.max_retries {
            log::warn!("job {} failed {} times, last: {reason}", job.job_id, job.attempt + 1);
            self.results.insert(job.job_id, FitnessReport::floor(job.job_id, reason));
            ReportOutcome::GaveUp
        } else {
            job.attempt += 1;
            self.pending.push_front(job);
            ReportOutcome::Retried
        }
    }

    pub fn job_timeout(&self) -> Duration {
        if self.durations.is_empty() {
            return self.config.min_timeout;
        }
        let mut d = self.durations.clone();
        d.sort();
        let median = d[d.len() / 2];
        median.mul_f64(self.config.timeout_factor).max(self.config.min_timeout)
    }

    /// Applies timeouts; returns the workers declared dead.
    pub fn tick(&mut self, now: Duration) -> Vec<WorkerId> {
        let timeout = self.job_timeout();
        let mut dead = Vec::new();
        for w in self.workers.values() {
            let silent = now.saturating_sub(w.last_heartbeat) > self.config.heartbeat_timeout;
            let overdue = w
                .inflight
                .and_then(|j| self.inflight.get(&j))
                .is_some_and(|i| now.saturating_sub(i.started) > timeout);
            if silent || overdue {
                dead.push(w.worker_id);
            }
        }
        for &w in &dead {
            log::warn!("declaring worker {w} dead");
            self.lose(w);
        }
        dead
    }

    /// Pairs idle workers with pending jobs they can run. Jobs no live worker
    /// can run are resolved with the floor.
    pub fn assign(&mut self, now: Duration) -> Vec<(WorkerId, EvalJob)> {
        if !self.workers.is_empty() {
            let workers = &self.workers;
            let (runnable, orphaned): (Vec<_>, Vec<_>) = self
                .pending
                .drain(..)
                .partition(|j| workers.values().any(|w| capable(w, j)));
            self.pending = runnable.into();
            for job in orphaned {
                log::warn!("no worker can run job {}", job.job_id);
                self.results
                    .insert(job.job_id, FitnessReport::floor(job.job_id, "no capable worker"));
            }
        }
        let mut out = Vec::new();
        for w in self.workers.values_mut() {
            if w.inflight.is_some() {
                continue;
            }
            let Some(pos) = self.pending.iter().position(|j| capable(w, j)) else {
                continue;
            };
            let job = self.pending.remove(pos).expect("position is valid");
            w.inflight = Some(job.job_id);
            self.inflight.insert(
                job.job_id,
                Inflight {
                    job: job.clone(),
                    worker: w.worker_id,
                    started: now,
                },
            );
            out.push((w.worker_id, job));
        }
        out
    }

    pub fn is_done(&self) -> bool {
        self.results.len() == self.expected && self.pending.is_empty() && self.inflight.is_empty()
    }

    /// Drops all outstanding work of the current generation.
    pub fn abandon(&mut self) {
        self.pending.clear();
        self.inflight.clear();
        self.results.clear();
        self.expected = 0;
        for w in self.workers.values_mut() {
            w.inflight = None;
        }
    }

    pub fn resolved(&self) -> usize {
        self.results.len()
    }

    pub fn take_results(&mut self) -> BTreeMap<u64, FitnessReport> {
        self.expected = 0;
        std::mem::take(&mut self.results)
    }
}

fn capable(w: &WorkerSession, job: &EvalJob) -> bool {
    job.requires.iter().all(|k| w.capabilities.contains(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{EvaluationBudget, EvaluatorSpec, StructuralTarget};

    fn job(id: u64) -> EvalJob {
        EvalJob {
            job_id: id,
            network: serde_json::Value::Null,
            budget: EvaluationBudget::default(),
            evaluator: EvaluatorSpec::Surrogate(StructuralTarget {
                depth: 1,
                depth_weight: 1.0,
                param_weight: 0.0,
                params: vec![],
            }),
            attempt: 0,
            requires: vec![LayerKind::Dense],
        }
    }

    fn secs(s: u64) -> Duration {
        Duration::from_secs(s)
    }

    const ALL: [LayerKind; 3] = [LayerKind::Dense, LayerKind::Conv, LayerKind::Lstm];

    #[test]
    fn single_worker_resolves_all_jobs() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.submit((0..10).map(job).collect());
        s.register(WorkerId(0), ALL.to_vec(), secs(0));
        let mut t = 0;
        while !s.is_done() {
            let assigned = s.assign(secs(t));
            assert_eq!(assigned.len(), 1);
            let (w, j) = &assigned[0];
            let out = s.report(*w, j.job_id, Ok(FitnessReport::new(j.job_id, j.job_id as f64)), secs(t + 1));
            assert_eq!(out, ReportOutcome::Accepted);
            t += 1;
        }
        let r = s.take_results();
        assert_eq!(r.len(), 10);
        assert!(r.iter().all(|(id, rep)| rep.fitness == *id as f64));
    }

    #[test]
    fn heartbeat_gap_kills_worker_and_requeues_job() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.submit(vec![job(0)]);
        s.register(WorkerId(1), ALL.to_vec(), secs(0));
        s.register(WorkerId(2), ALL.to_vec(), secs(0));
        let a = s.assign(secs(0));
        assert_eq!(a[0].0, WorkerId(1));
        s.heartbeat(WorkerId(2), secs(20));
        assert!(s.tick(secs(25)).is_empty());
        s.heartbeat(WorkerId(2), secs(40));
        assert_eq!(s.tick(secs(31)), vec![WorkerId(1)]);
        assert_eq!(s.worker_count(), 1);
        let a = s.assign(secs(41));
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].0, WorkerId(2));
        assert_eq!(a[0].1.attempt, 1);
        s.report(WorkerId(2), 0, Ok(FitnessReport::new(0, 0.5)), secs(42));
        assert!(s.is_done());
    }

    #[test]
    fn late_report_from_dead_worker_is_discarded() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.submit(vec![job(7)]);
        s.register(WorkerId(1), ALL.to_vec(), secs(0));
        s.assign(secs(0));
        s.lose(WorkerId(1));
        s.register(WorkerId(2), ALL.to_vec(), secs(1));
        s.assign(secs(1));
        assert_eq!(
            s.report(WorkerId(1), 7, Ok(FitnessReport::new(7, 0.1)), secs(2)),
            ReportOutcome::Discarded
        );
        assert_eq!(
            s.report(WorkerId(2), 7, Ok(FitnessReport::new(7, 0.9)), secs(3)),
            ReportOutcome::Accepted
        );
        assert_eq!(
            s.report(WorkerId(2), 7, Ok(FitnessReport::new(7, 0.2)), secs(4)),
            ReportOutcome::Discarded
        );
        assert_eq!(s.take_results()[&7].fitness, 0.9);
    }

    #[test]
    fn retries_exhaust_to_floor() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.submit(vec![job(3)]);
        s.register(WorkerId(0), ALL.to_vec(), secs(0));
        let mut outcomes = Vec::new();
        while !s.is_done() {
            let a = s.assign(secs(0));
            assert!(a[0].1.attempt <= 2);
            outcomes.push(s.report(WorkerId(0), 3, Err("boom".into()), secs(0)));
        }
        assert_eq!(
            outcomes,
            vec![ReportOutcome::Retried, ReportOutcome::Retried, ReportOutcome::GaveUp]
        );
        assert_eq!(s.take_results()[&3].fitness, crate::evaluator::FITNESS_FLOOR);
    }

    #[test]
    fn timeout_tracks_median_with_floor() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        assert_eq!(s.job_timeout(), secs(30));
        s.submit((0..3).map(job).collect());
        s.register(WorkerId(0), ALL.to_vec(), secs(0));
        for (i, d) in [2u64, 5, 9].iter().enumerate() {
            s.assign(secs(100));
            s.report(WorkerId(0), i as u64, Ok(FitnessReport::new(i as u64, 0.0)), secs(100 + d));
        }
        assert_eq!(s.job_timeout(), secs(50));
    }

    #[test]
    fn overdue_job_requeued() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        s.submit(vec![job(0)]);
        s.register(WorkerId(0), ALL.to_vec(), secs(0));
        s.assign(secs(0));
        for t in (5..=30).step_by(5) {
            s.heartbeat(WorkerId(0), secs(t));
            assert!(s.tick(secs(t)).is_empty());
        }
        s.heartbeat(WorkerId(0), secs(31));
        assert_eq!(s.tick(secs(31)), vec![WorkerId(0)]);
        assert!(!s.is_done());
    }

    #[test]
    fn capability_matching() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut lstm = job(1);
        lstm.requires = vec![LayerKind::Lstm];
        s.submit(vec![lstm, job(2)]);
        s.register(WorkerId(0), vec![LayerKind::Dense], secs(0));
        s.register(WorkerId(1), ALL.to_vec(), secs(0));
        let a = s.assign(secs(0));
        assert_eq!(a.len(), 2);
        assert!(a.contains(&(WorkerId(0), job(2))));
        assert_eq!(a.iter().find(|(w, _)| *w == WorkerId(1)).unwrap().1.job_id, 1);
    }

    #[test]
    fn jobs_nobody_can_run_are_floored() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut conv = job(1);
        conv.requires = vec![LayerKind::Conv];
        s.submit(vec![conv]);
        s.register(WorkerId(0), vec![LayerKind::Dense], secs(0));
        assert!(s.assign(secs(0)).is_empty());
        assert!(s.is_done());
    }
}

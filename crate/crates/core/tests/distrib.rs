mod common;

use std::time::Duration;

use codeepneat::distrib::{make_jobs, run_tcp_worker, Backoff, Master, SchedulerConfig, WorkerOptions};
use codeepneat::evaluator::{BatchEvaluator, EvaluationBudget, InProcess};

fn fitness_bits(reports: &[codeepneat::evaluator::FitnessReport]) -> Vec<(u64, u64)> {
    let mut v: Vec<_> = reports.iter().map(|r| (r.network_id, r.fitness.to_bits())).collect();
    v.sort();
    v
}

#[test]
fn ten_jobs_one_worker() {
    let nets = common::random_networks(10, 1);
    let mut master = Master::local_pool(common::surrogate_spec(), 1).unwrap();
    let reports = master.evaluate_batch(&nets, &EvaluationBudget::default()).unwrap();
    assert_eq!(reports.len(), 10);
    for ((id, _), r) in nets.iter().zip(&reports) {
        assert_eq!(*id, r.network_id);
    }
}

#[test]
fn local_pool_matches_in_process() {
    let nets = common::random_networks(100, 2);
    let budget = EvaluationBudget::default();
    let mut direct = InProcess::new(common::surrogate_spec().build());
    let expected = direct.evaluate_batch(&nets, &budget).unwrap();
    let mut master = Master::local_pool(common::surrogate_spec(), 4).unwrap();
    for _ in 0..2 {
        let got = master.evaluate_batch(&nets, &budget).unwrap();
        assert_eq!(fitness_bits(&got), fitness_bits(&expected));
    }
}

#[test]
fn killed_worker_job_is_redispatched() {
    let nets = common::random_networks(40, 3);
    let budget = EvaluationBudget::default();
    let mut workers = vec![WorkerOptions::default(); 4];
    workers[1].fail_on_job = Some(2);
    let mut master = Master::local(common::surrogate_spec(), SchedulerConfig::default(), workers).unwrap();
    let got = master.evaluate_batch(&nets, &budget).unwrap();
    let expected = InProcess::new(common::surrogate_spec().build())
        .evaluate_batch(&nets, &budget)
        .unwrap();
    assert_eq!(fitness_bits(&got), fitness_bits(&expected));
}

#[test]
fn all_workers_dead_is_an_error() {
    let nets = common::random_networks(5, 4);
    let workers = vec![
        WorkerOptions {
            fail_on_job: Some(1),
            ..Default::default()
        };
        2
    ];
    let mut master = Master::local(common::surrogate_spec(), SchedulerConfig::default(), workers).unwrap();
    assert!(master.evaluate_batch(&nets, &EvaluationBudget::default()).is_err());
}

#[test]
fn duplicate_job_ids_rejected() {
    let mut nets = common::random_networks(2, 5);
    nets[1].0 = nets[0].0;
    let mut master = Master::local_pool(common::surrogate_spec(), 1).unwrap();
    let jobs = make_jobs(&nets, &EvaluationBudget::default(), master.spec());
    assert!(master.dispatch(jobs).is_err());
}

#[test]
fn tcp_workers_serve_until_shutdown() {
    let nets = common::random_networks(30, 6);
    let budget = EvaluationBudget::default();
    let mut master = Master::listen("127.0.0.1:0", common::surrogate_spec(), SchedulerConfig::default()).unwrap();
    master.worker_wait = Duration::from_secs(20);
    let addr = master.local_addr().unwrap().to_string();
    let handles: Vec<_> = (0..2)
        .map(|_| {
            let addr = addr.clone();
            std::thread::spawn(move || run_tcp_worker(&addr, &WorkerOptions::default(), &Backoff::default()))
        })
        .collect();
    let got = master.evaluate_batch(&nets, &budget).unwrap();
    let expected = InProcess::new(common::surrogate_spec().build())
        .evaluate_batch(&nets, &budget)
        .unwrap();
    assert_eq!(fitness_bits(&got), fitness_bits(&expected));
    drop(master);
    for h in handles {
        h.join().unwrap().unwrap();
    }
}

#[test]
fn worker_gives_up_without_master() {
    let backoff = Backoff {
        initial: Duration::from_millis(1),
        max: Duration::from_millis(2),
        max_attempts: 2,
    };
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(run_tcp_worker(&addr, &WorkerOptions::default(), &backoff).is_err());
}

//! Deterministic discrete-event simulation of a backend cluster.
//!
//! Each server runs its tasks under processor sharing: with `k` tasks on `c`
//! cores every task progresses at `speed_ratio * min(1, c / k)`. Rates are
//! constant between events on that server, so a per-server virtual clock of
//! attained service is enough: a task finishes when the clock reaches its
//! start value plus its cost.

mod environment;
mod service;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::algorithms::{AlgorithmConfig, SelectError};
use crate::dispatch::Dispatcher;
use crate::pool::BackendPool;
use crate::request::{Method, Request};
use crate::server::{HardwareProfile, ServerId};

pub use environment::EnvironmentProfile;
pub use service::{cpu_utilization, ps_completion_times, service_rate, ServiceModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Algorithm(#[from] SelectError),
    #[error("invalid service model: {0}")]
    ServiceModel(String),
}

/// Per-request outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub request_id: u64,
    pub task_type: Method,
    pub arrival_time: f64,
    pub server: Option<ServerId>,
    /// `None` for rejected requests and for requests still running at the
    /// horizon.
    pub response_time: Option<f64>,
    pub deadline_met: bool,
    pub rejected: bool,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    /// One record per input request, in input order.
    pub records: Vec<MetricsRecord>,
    pub completions: u64,
    pub rejections: u64,
    pub in_flight: u64,
    /// Dispatch count per server, in pool id order.
    pub per_server_dispatched: Vec<u64>,
    /// Sum of base costs over completed requests.
    pub work_demanded: f64,
    /// Work delivered by all servers, integrated over time.
    pub work_delivered: f64,
    /// Largest CPU utilization observed at any event boundary.
    pub peak_utilization: f64,
}

/// Event ordering key for completions: time, then request id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Finish {
    at: f64,
    request_id: u64,
    slot: usize,
}

impl Eq for Finish {}

impl Ord for Finish {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.total_cmp(&other.at).then(self.request_id.cmp(&other.request_id))
    }
}

impl PartialOrd for Finish {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Node {
    id: ServerId,
    profile: HardwareProfile,
    /// Attained service per task since the start of the run.
    clock: f64,
    last: f64,
    /// Keyed by the clock value at which each task completes.
    tasks: BinaryHeap<Reverse<Finish>>,
}

impl Node {
    fn rate(&self, reference: f64) -> f64 {
        service_rate(&self.profile, self.tasks.len(), reference)
    }

    /// Moves the node to `now`; returns the work delivered meanwhile.
    fn advance(&mut self, now: f64, reference: f64) -> f64 {
        let k = self.tasks.len();
        let dt = now - self.last;
        self.last = now;
        if k == 0 || dt <= 0.0 {
            return 0.0;
        }
        let rate = self.rate(reference);
        self.clock += rate * dt;
        rate * dt * k as f64
    }

    fn next_completion(&self, reference: f64) -> Option<Finish> {
        let Reverse(top) = self.tasks.peek()?;
        let left = (top.at - self.clock).max(0.0);
        Some(Finish {
            at: self.last + left / self.rate(reference),
            ..*top
        })
    }
}

pub struct Simulator {
    dispatcher: Dispatcher,
    model: ServiceModel,
    horizon: Option<f64>,
}

impl Simulator {
    pub fn new(pool: BackendPool, config: AlgorithmConfig, model: ServiceModel) -> Result<Self, SimError> {
        model.validate().map_err(SimError::ServiceModel)?;
        Ok(Simulator {
            dispatcher: Dispatcher::new(pool, config)?,
            model,
            horizon: None,
        })
    }

    /// Stop processing events after `t` seconds; later work stays in flight.
    pub fn with_horizon(mut self, t: f64) -> Self {
        self.horizon = Some(t);
        self
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    pub fn run(&mut self, requests: &[Request]) -> SimReport {
        let reference = self.model.reference_speed_ghz;
        let mut order: Vec<usize> = (0..requests.len()).collect();
        order.sort_by(|&a, &b| {
            requests[a]
                .arrival_time
                .total_cmp(&requests[b].arrival_time)
                .then(requests[a].request_id.cmp(&requests[b].request_id))
        });

        let mut nodes: Vec<Node> = self
            .dispatcher
            .pool()
            .servers()
            .iter()
            .map(|s| Node {
                id: s.id(),
                profile: s.spec.profile.clone(),
                clock: 0.0,
                last: 0.0,
                tasks: BinaryHeap::new(),
            })
            .collect();

        let mut records: Vec<Option<MetricsRecord>> = vec![None; requests.len()];
        let mut report = SimReport {
            records: Vec::new(),
            completions: 0,
            rejections: 0,
            in_flight: 0,
            per_server_dispatched: vec![0; nodes.len()],
            work_demanded: 0.0,
            work_delivered: 0.0,
            peak_utilization: 0.0,
        };
        let mut next_arrival = 0;

        loop {
            let completion = nodes
                .iter()
                .enumerate()
                .filter_map(|(n, node)| node.next_completion(reference).map(|f| (f, n)))
                .min_by(|a, b| a.0.cmp(&b.0));
            let arrival = order.get(next_arrival).map(|&i| requests[i].arrival_time);

            let take_completion = match (completion, arrival) {
                (None, None) => break,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                // Completions go first on a time tie.
                (Some((f, _)), Some(t)) => f.at <= t,
            };
            let now = if take_completion { completion.unwrap().0.at } else { arrival.unwrap() };
            if self.horizon.is_some_and(|h| now > h) {
                break;
            }

            let touched = if take_completion {
                let (finish, n) = completion.unwrap();
                let node = &mut nodes[n];
                report.work_delivered += node.advance(now, reference);
                node.tasks.pop();
                let req = &requests[finish.slot];
                let response = now - req.arrival_time + self.model.network_latency_s;
                self.dispatcher.release(node.id).expect("completion follows a dispatch");
                report.completions += 1;
                report.work_demanded += self.model.cost(req.method);
                if let Some(rec) = records[finish.slot].as_mut() {
                    rec.response_time = Some(response);
                    rec.deadline_met = response <= req.deadline();
                }
                n
            } else {
                let slot = order[next_arrival];
                next_arrival += 1;
                let req = &requests[slot];
                let decision = self.dispatcher.dispatch(req);
                let mut rec = MetricsRecord {
                    request_id: req.request_id,
                    task_type: req.method,
                    arrival_time: req.arrival_time,
                    server: decision.chosen(),
                    response_time: None,
                    deadline_met: false,
                    rejected: decision.is_rejected(),
                    fallback_used: decision.fallback_used,
                };
                let Some(id) = decision.chosen() else {
                    report.rejections += 1;
                    rec.rejected = true;
                    records[slot] = Some(rec);
                    continue;
                };
                records[slot] = Some(rec);
                let n = self.dispatcher.pool().index_of(id).expect("pool member");
                report.per_server_dispatched[n] += 1;
                let node = &mut nodes[n];
                report.work_delivered += node.advance(now, reference);
                let finish_at = node.clock + self.model.cost(req.method);
                node.tasks.push(Reverse(Finish {
                    at: finish_at,
                    request_id: req.request_id,
                    slot,
                }));
                n
            };

            let node = &nodes[touched];
            let util = cpu_utilization(&node.profile, node.tasks.len());
            report.peak_utilization = report.peak_utilization.max(util);
            self.dispatcher
                .pool_mut()
                .set_cpu_utilization(node.id, util)
                .expect("utilization within [0, 1]");
        }

        report.in_flight = nodes.iter().map(|n| n.tasks.len() as u64).sum();
        report.records = records
            .into_iter()
            .zip(requests)
            .map(|(rec, req)| {
                // Requests whose arrival lies past the horizon never reach
                // the balancer.
                rec.unwrap_or(MetricsRecord {
                    request_id: req.request_id,
                    task_type: req.method,
                    arrival_time: req.arrival_time,
                    server: None,
                    response_time: None,
                    deadline_met: false,
                    rejected: false,
                    fallback_used: false,
                })
            })
            .collect();
        report
    }
}

/// Runs `requests` through a fresh simulator.
pub fn run_simulation(
    requests: &[Request],
    pool: BackendPool,
    config: &AlgorithmConfig,
    model: &ServiceModel,
) -> Result<SimReport, SimError> {
    Ok(Simulator::new(pool, config.clone(), model.clone())?.run(requests))
}

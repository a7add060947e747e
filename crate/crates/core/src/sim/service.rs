//! Processor-sharing service model.

use crate::request::Method;
use crate::server::HardwareProfile;

/// Work per task type, in single-core seconds at `reference_speed_ghz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceModel {
    pub base_cost_get: f64,
    pub base_cost_post: f64,
    pub reference_speed_ghz: f64,
    /// Constant round-trip latency added to every response, seconds.
    pub network_latency_s: f64,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel {
            base_cost_get: 0.05,
            base_cost_post: 0.15,
            reference_speed_ghz: 1.80,
            network_latency_s: 0.0,
        }
    }
}

impl ServiceModel {
    pub fn cost(&self, method: Method) -> f64 {
        match method {
            Method::Get => self.base_cost_get,
            Method::Post => self.base_cost_post,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_cost_get > 0.0 && self.base_cost_post > 0.0) {
            return Err("base costs must be positive".into());
        }
        if !(self.reference_speed_ghz > 0.0) {
            return Err("reference_speed_ghz must be positive".into());
        }
        if !(self.network_latency_s >= 0.0) {
            return Err("network_latency_s must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-task progress rate with `concurrent` tasks in flight:
/// `(speed / reference) * min(1, cores / concurrent)`.
pub fn service_rate(profile: &HardwareProfile, concurrent: usize, reference_speed_ghz: f64) -> f64 {
    let share = (profile.cores as f64 / concurrent.max(1) as f64).min(1.0);
    profile.core_speed_ghz / reference_speed_ghz * share
}

/// `min(1, concurrent / cores)`.
pub fn cpu_utilization(profile: &HardwareProfile, concurrent: usize) -> f64 {
    (concurrent as f64 / profile.cores as f64).min(1.0)
}

/// Completion offsets for tasks with the given remaining work on one server,
/// assuming no further arrivals. Closed-form piecewise solution: between
/// completions every task runs at the same rate.
pub fn ps_completion_times(profile: &HardwareProfile, reference_speed_ghz: f64, remaining: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    order.sort_by(|&a, &b| remaining[a].total_cmp(&remaining[b]));
    let mut out = vec![0.0; remaining.len()];
    let (mut now, mut done_work) = (0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        let in_flight = remaining.len() - rank;
        let rate = service_rate(profile, in_flight, reference_speed_ghz);
        now += (remaining[i] - done_work) / rate;
        done_work = remaining[i];
        out[i] = now;
    }
    out
}

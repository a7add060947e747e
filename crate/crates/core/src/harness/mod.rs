//! Sweeps algorithm × scenario × environment through the simulator and
//! condenses the records into per-task summary rows.

mod emit;

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::algorithms::{AlgorithmConfig, AlgorithmKind};
use crate::request::Method;
use crate::server::{HardwareProfile, MaxConn};
use crate::sim::{EnvironmentProfile, MetricsRecord, ServiceModel, SimError, Simulator};
use crate::workload::{self, Scenario, WorkloadError};

pub use emit::{emit, render_svg, EmitOptions, EmittedFiles, CSV_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run matrix: {0}")]
    InvalidMatrix(String),
    #[error("worker counts must be at least 1")]
    InvalidWorkerCount,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const DEFAULT_REPETITIONS: u32 = 3;
pub const DEFAULT_WORKER_COUNTS: [u32; 7] = [1, 2, 4, 8, 16, 32, 64];

/// The algorithms compared by the default matrix.
pub const COMPARED_ALGORITHMS: [AlgorithmKind; 7] = [
    AlgorithmKind::First,
    AlgorithmKind::Source,
    AlgorithmKind::Random,
    AlgorithmKind::LeastConn,
    AlgorithmKind::StaticRr,
    AlgorithmKind::RoundRobin,
    AlgorithmKind::Uri,
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunMatrix {
    pub algorithms: Vec<AlgorithmConfig>,
    pub scenarios: Vec<Scenario>,
    pub environments: Vec<EnvironmentProfile>,
    pub repetitions: u32,
    /// Repetition `r` seeds both the workload and the selector with
    /// `base_seed + r`.
    pub base_seed: u64,
    pub service: ServiceModel,
    /// Per-server maxconn for `first`, as a multiple of the server's cores.
    /// Other algorithms run with unlimited servers.
    pub first_maxconn_per_core: u32,
}

impl Default for RunMatrix {
    /// Seven algorithms, 1k..80k requests, both environments, 3 repetitions.
    fn default() -> Self {
        RunMatrix {
            algorithms: COMPARED_ALGORITHMS.into_iter().map(AlgorithmConfig::new).collect(),
            scenarios: workload::scenario_suite(workload::EXTENDED_MAX_TOTAL, workload::DEFAULT_STEP)
                .expect("non-zero step"),
            environments: vec![EnvironmentProfile::homogeneous(), EnvironmentProfile::heterogeneous()],
            repetitions: DEFAULT_REPETITIONS,
            base_seed: 0,
            service: ServiceModel::default(),
            first_maxconn_per_core: 4,
        }
    }
}

impl RunMatrix {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidMatrix(m.into()));
        if self.algorithms.is_empty() {
            return bad("no algorithms");
        }
        if self.scenarios.is_empty() {
            return bad("no scenarios");
        }
        if self.environments.is_empty() || self.environments.iter().any(|e| e.servers.is_empty()) {
            return bad("no environments, or an environment without servers");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive");
        }
        if self.first_maxconn_per_core == 0 {
            return bad("first_maxconn_per_core must be positive");
        }
        self.service.validate().map_err(HarnessError::InvalidMatrix)
    }

    pub fn cell_count(&self) -> usize {
        self.algorithms.len() * self.scenarios.len() * self.environments.len()
    }

    fn maxconn_for(&self, kind: AlgorithmKind, hw: &HardwareProfile) -> MaxConn {
        match kind {
            AlgorithmKind::First => MaxConn::Limit(self.first_maxconn_per_core * hw.cores),
            _ => MaxConn::Unlimited,
        }
    }
}

/// Name used for an algorithm in rows and plot columns.
pub fn algorithm_label(config: &AlgorithmConfig) -> String {
    match config.kind {
        AlgorithmKind::Random | AlgorithmKind::CpuRandom if config.power_n != 2 => {
            format!("{}({})", config.kind, config.power_n)
        }
        _ => config.kind.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub environment: String,
    pub total_requests: u64,
    pub task_type: Method,
    /// Set on rows produced by a worker sweep.
    pub workers: Option<u32>,
    pub repetitions: u32,
    /// Over completed requests of all repetitions; `None` when none completed.
    pub mean_response_s: Option<f64>,
    pub p95_response_s: Option<f64>,
    /// Rejected requests count as misses.
    pub deadline_miss_fraction: f64,
    pub rejected_count: u64,
    /// Dispatches of this task type per server, summed over repetitions.
    pub per_server_dispatch_counts: Vec<u64>,
}

impl SummaryRow {
    fn sort_key(&self) -> (&str, &str, u64, Method, Option<u32>) {
        (&self.environment, &self.algorithm, self.total_requests, self.task_type, self.workers)
    }
}

/// A matrix cell that could not run.
#[derive(Debug)]
pub struct CellError {
    pub algorithm: String,
    pub environment: String,
    pub total_requests: u64,
    pub error: HarnessError,
}

#[derive(Debug, Default)]
pub struct MatrixOutput {
    pub rows: Vec<SummaryRow>,
    pub errors: Vec<CellError>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn summarize(
    records: &[MetricsRecord],
    servers: usize,
    index_of: impl Fn(u32) -> usize,
    base: &SummaryRow,
    method: Method,
) -> SummaryRow {
    let mut times = Vec::new();
    let (mut total, mut missed, mut rejected) = (0u64, 0u64, 0u64);
    let mut counts = vec![0u64; servers];
    for rec in records.iter().filter(|r| r.task_type == method) {
        total += 1;
        if !rec.deadline_met {
            missed += 1;
        }
        if rec.rejected {
            rejected += 1;
        }
        if let Some(s) = rec.server {
            counts[index_of(s.0)] += 1;
        }
        if let Some(t) = rec.response_time {
            times.push(t);
        }
    }
    times.sort_by(f64::total_cmp);
    SummaryRow {
        task_type: method,
        mean_response_s: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        p95_response_s: percentile_nearest_rank(&times, 95.0),
        deadline_miss_fraction: if total == 0 { 0.0 } else { missed as f64 / total as f64 },
        rejected_count: rejected,
        per_server_dispatch_counts: counts,
        ..base.clone()
    }
}

fn run_cell(
    matrix: &RunMatrix,
    algorithm: &AlgorithmConfig,
    scenario: &Scenario,
    env: &EnvironmentProfile,
) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut records = Vec::with_capacity(scenario.total_requests as usize * matrix.repetitions as usize);
    let mut ids = Vec::new();
    for r in 0..matrix.repetitions {
        let seed = matrix.base_seed.wrapping_add(r as u64);
        let requests = workload::generate(&scenario.clone().with_seed(seed))?;
        let pool = env.pool(|hw| matrix.maxconn_for(algorithm.kind, hw));
        ids = pool.ids().into_iter().map(|id| id.0).collect();
        let config = algorithm.clone().with_seed(seed);
        let mut sim = Simulator::new(pool, config, matrix.service.clone())?;
        records.extend(sim.run(&requests).records);
    }
    let base = SummaryRow {
        algorithm: algorithm_label(algorithm),
        environment: env.name.clone(),
        total_requests: scenario.total_requests,
        task_type: Method::Get,
        workers: None,
        repetitions: matrix.repetitions,
        mean_response_s: None,
        p95_response_s: None,
        deadline_miss_fraction: 0.0,
        rejected_count: 0,
        per_server_dispatch_counts: Vec::new(),
    };
    let index_of = |id: u32| ids.binary_search(&id).expect("record names a pool member");
    Ok([Method::Get, Method::Post]
        .into_iter()
        .map(|m| summarize(&records, ids.len(), index_of, &base, m))
        .collect())
}

fn sort_rows(rows: &mut [SummaryRow]) {
    rows.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).unwrap_or(Ordering::Equal));
}

/// Runs every cell, in parallel. A failing cell is reported in
/// [`MatrixOutput::errors`] and the rest still run.
pub fn run_matrix(matrix: &RunMatrix) -> Result<MatrixOutput, HarnessError> {
    matrix.validate()?;
    let mut cells = Vec::with_capacity(matrix.cell_count());
    for env in &matrix.environments {
        for algorithm in &matrix.algorithms {
            for scenario in &matrix.scenarios {
                cells.push((algorithm, scenario, env));
            }
        }
    }
    // Largest scenarios first keeps the tail of the parallel run short.
    cells.sort_by_key(|(_, s, _)| std::cmp::Reverse(s.total_requests));
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(a, s, e)| (a, s, e, run_cell(matrix, a, s, e)))
        .collect();

    let mut out = MatrixOutput::default();
    for (a, s, e, result) in results {
        match result {
            Ok(rows) => out.rows.extend(rows),
            Err(error) => out.errors.push(CellError {
                algorithm: algorithm_label(a),
                environment: e.name.clone(),
                total_requests: s.total_requests,
                error,
            }),
        }
    }
    sort_rows(&mut out.rows);
    out.errors.sort_by(|a, b| {
        (&a.environment, &a.algorithm, a.total_requests).cmp(&(&b.environment, &b.algorithm, b.total_requests))
    });
    Ok(out)
}

/// Simulator side of the worker sweep. The simulator has no worker threads,
/// so every count yields the same metrics; rows carry the count as a label.
pub fn worker_sweep(
    worker_counts: &[u32],
    scenario: &Scenario,
    environment: &EnvironmentProfile,
    algorithm: &AlgorithmConfig,
    matrix: &RunMatrix,
) -> Result<Vec<SummaryRow>, HarnessError> {
    if worker_counts.is_empty() || worker_counts.contains(&0) {
        return Err(HarnessError::InvalidWorkerCount);
    }
    let mut rows = Vec::new();
    for &w in worker_counts {
        for mut row in run_cell(matrix, algorithm, scenario, environment)? {
            row.workers = Some(w);
            rows.push(row);
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algos: &[AlgorithmKind], totals: &[u64]) -> RunMatrix {
        RunMatrix {
            algorithms: algos.iter().map(|&k| AlgorithmConfig::new(k)).collect(),
            scenarios: totals.iter().map(|&t| Scenario::new(t)).collect(),
            environments: vec![EnvironmentProfile::homogeneous()],
            repetitions: 2,
            ..RunMatrix::default()
        }
    }

    #[test]
    fn one_cell_gives_two_rows() {
        let out = run_matrix(&tiny(&[AlgorithmKind::RoundRobin], &[1000])).unwrap();
        assert!(out.errors.is_empty());
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].task_type, Method::Get);
        assert_eq!(out.rows[1].task_type, Method::Post);
        let get = &out.rows[0];
        assert!((get.mean_response_s.unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(get.deadline_miss_fraction, 0.0);
    }

    #[test]
    fn roundrobin_counts_are_even_and_accounted() {
        let out = run_matrix(&tiny(&[AlgorithmKind::RoundRobin], &[1000, 5000])).unwrap();
        for total in [1000u64, 5000] {
            let rows: Vec<_> = out.rows.iter().filter(|r| r.total_requests == total).collect();
            let mut combined = vec![0u64; 5];
            for r in &rows {
                for (c, n) in combined.iter_mut().zip(&r.per_server_dispatch_counts) {
                    *c += n;
                }
            }
            // Two repetitions, each even to within one.
            let (lo, hi) = (combined.iter().min().unwrap(), combined.iter().max().unwrap());
            assert!(hi - lo <= 2, "{combined:?}");
            assert_eq!(combined.iter().sum::<u64>(), total * 2);
        }
    }

    #[test]
    fn first_rejections_feed_misses() {
        let mut m = tiny(&[AlgorithmKind::First], &[80000]);
        m.repetitions = 1;
        m.first_maxconn_per_core = 1;
        let out = run_matrix(&m).unwrap();
        for row in &out.rows {
            let dispatched: u64 = row.per_server_dispatch_counts.iter().sum();
            assert_eq!(dispatched + row.rejected_count, 40000);
            assert!(row.rejected_count > 0);
            assert!(row.deadline_miss_fraction >= row.rejected_count as f64 / 40000.0);
            assert!((0.0..=1.0).contains(&row.deadline_miss_fraction));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = tiny(&[AlgorithmKind::Random, AlgorithmKind::Source], &[5000]);
        assert_eq!(run_matrix(&m).unwrap().rows, run_matrix(&m).unwrap().rows);
        let other = RunMatrix { base_seed: 99, ..m.clone() };
        assert_ne!(run_matrix(&m).unwrap().rows, run_matrix(&other).unwrap().rows);
    }

    #[test]
    fn rows_are_sorted() {
        let mut m = tiny(&[AlgorithmKind::Uri, AlgorithmKind::First], &[5000, 1000]);
        m.environments.push(EnvironmentProfile::heterogeneous());
        m.repetitions = 1;
        let rows = run_matrix(&m).unwrap().rows;
        assert_eq!(rows.len(), 16);
        assert!(rows.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));
        assert_eq!(rows[0].environment, "heterogeneous");
        assert_eq!(rows[0].algorithm, "first");
    }

    #[test]
    fn bad_cells_do_not_abort() {
        let mut m = tiny(&[AlgorithmKind::RoundRobin], &[1000]);
        m.algorithms.push(AlgorithmConfig::new(AlgorithmKind::Header));
        let out = run_matrix(&m).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].algorithm, "header");
    }

    #[test]
    fn matrix_validation() {
        let mut m = tiny(&[AlgorithmKind::RoundRobin], &[1000]);
        m.repetitions = 0;
        assert!(matches!(run_matrix(&m), Err(HarnessError::InvalidMatrix(_))));
        let empty = RunMatrix { scenarios: vec![], ..RunMatrix::default() };
        assert!(matches!(run_matrix(&empty), Err(HarnessError::InvalidMatrix(_))));
    }

    #[test]
    fn default_matrix_shape() {
        let m = RunMatrix::default();
        assert_eq!(m.cell_count(), 238);
        assert_eq!(m.repetitions, 3);
    }

    #[test]
    fn worker_sweep_in_sim_is_flat() {
        let m = RunMatrix { repetitions: 1, ..RunMatrix::default() };
        let rows = worker_sweep(
            &[1, 4, 64],
            &Scenario::new(5000),
            &EnvironmentProfile::homogeneous(),
            &AlgorithmConfig::new(AlgorithmKind::RoundRobin),
            &m,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let strip = |r: &SummaryRow| SummaryRow { workers: None, ..r.clone() };
        let gets: Vec<_> = rows.iter().filter(|r| r.task_type == Method::Get).collect();
        assert!(gets.iter().all(|r| strip(r) == strip(gets[0])));
        let single = worker_sweep(&[1], &Scenario::new(1000), &EnvironmentProfile::homogeneous(), &AlgorithmConfig::default(), &m);
        assert_eq!(single.unwrap().len(), 2);
        assert!(matches!(
            worker_sweep(&[0, 1], &Scenario::new(1000), &EnvironmentProfile::homogeneous(), &AlgorithmConfig::default(), &m),
            Err(HarnessError::InvalidWorkerCount)
        ));
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 95.0), Some(19.0));
        assert_eq!(percentile_nearest_rank(&v, 100.0), Some(20.0));
        assert_eq!(percentile_nearest_rank(&[3.0], 95.0), Some(3.0));
        assert_eq!(percentile_nearest_rank(&[], 95.0), None);
        assert_eq!(percentile_nearest_rank(&v, 0.0), Some(1.0));
    }

    #[test]
    fn labels() {
        assert_eq!(algorithm_label(&AlgorithmConfig::new(AlgorithmKind::StaticRr)), "static_rr");
        assert_eq!(algorithm_label(&AlgorithmConfig::new(AlgorithmKind::Random).with_power_n(3)), "random(3)");
    }
}

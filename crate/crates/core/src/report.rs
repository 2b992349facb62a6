//! Experiment commands and their reports.
//!
//! Every report serializes to JSON matching `docs/report.schema.json` and
//! flattens to CSV rows for plotting.

use std::collections::BTreeMap;
use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::alloc::{seeded_entropy, AllocationOrder, MemoryPool, PoolAllocator};
use crate::attack::{evaluate, monte_carlo, AttackError, Verdict};
use crate::protection::{OverheadBreakdown, SchemeKind};
use crate::scenario::{Scenario, ScenarioError};
use crate::scheduler::{expected_frequency, measured_frequency, CycleTrace, SimError};

/// Relative improvement of descending over ascending allocation order
/// reported for the reference hardware, printed next to measured values.
pub const REFERENCE_ORDER_IMPROVEMENT: f64 = 0.265;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("{0}")]
    Usage(String),
}

impl CommandError {
    /// Process exit code: 2 for bad input, 3 for failures during simulation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Scenario(_) | CommandError::Usage(_) => 2,
            CommandError::Attack(AttackError::InvalidScript(_)) => 2,
            CommandError::Simulation(_) | CommandError::Attack(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub task: String,
    pub priority: i32,
    pub aci: u32,
    pub expected_hz: f64,
    pub measured_hz: Option<f64>,
    pub ratio: Option<f64>,
    pub executions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadSummary {
    /// Closed-form overhead of a cycle in which every task runs.
    pub model_full_cycle: OverheadBreakdown,
    pub mean_per_cycle_us: f64,
    pub max_per_cycle_us: u64,
    pub total_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleSummary {
    pub cycles: u64,
    pub skipped_dispatches: u64,
    pub degraded_cycles: u64,
    pub faults: u64,
    pub alloc_retries: u64,
    pub max_used_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub report: &'static str,
    pub scenario: String,
    pub scheme: SchemeKind,
    pub seed: u64,
    pub horizon: u64,
    pub f_m: u32,
    pub budget_us: u64,
    pub frequencies: Vec<FrequencyRow>,
    pub overhead: OverheadSummary,
    pub summary: CycleSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub report: &'static str,
    pub scenario: String,
    pub seed: u64,
    pub horizon: u64,
    pub runs: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseRow {
    pub case: String,
    pub name: String,
    pub verdicts: BTreeMap<SchemeKind, Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloRow {
    pub case: String,
    pub scheme: SchemeKind,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub half_width: f64,
    pub closed_form: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackMatrixReport {
    pub report: &'static str,
    pub scenario: String,
    pub seed: u64,
    pub schemes: Vec<SchemeKind>,
    pub cases: Vec<CaseRow>,
    pub succeeded: BTreeMap<SchemeKind, usize>,
    pub monte_carlo: Vec<MonteCarloRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderStats {
    pub order: AllocationOrder,
    pub mean_retries: f64,
    pub failure_rate: f64,
    pub mean_draws: f64,
    pub retry_histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AllocBenchReport {
    pub report: &'static str,
    pub pool_size: u32,
    pub sizes: Vec<u32>,
    pub trials: u64,
    pub seed: u64,
    pub retry_budget: u32,
    pub alignment: u32,
    pub orders: Vec<OrderStats>,
    /// `(ascending - descending) / ascending` on mean retries.
    pub measured_improvement: Option<f64>,
    pub reference_improvement: f64,
}

/// Simulates `horizon` cycles under `scheme` and tabulates frequencies and
/// overhead. The trace is returned for CSV export.
pub fn cmd_run(
    scenario: &Scenario,
    scheme: SchemeKind,
    seed: u64,
    horizon: u64,
) -> Result<(RunReport, CycleTrace), CommandError> {
    let mut sim = scenario.simulation_for(scheme, seed)?;
    let trace = sim.run(horizon)?;
    let frequencies = scenario
        .tasks
        .iter()
        .map(|t| {
            let expected_hz = expected_frequency(t, &scenario.config);
            let measured_hz = measured_frequency(&trace, &t.name);
            FrequencyRow {
                task: t.name.clone(),
                priority: t.priority,
                aci: t.aci,
                expected_hz,
                measured_hz,
                ratio: measured_hz.map(|m| m / expected_hz),
                executions: trace.executions(&t.name),
            }
        })
        .collect();
    let all: Vec<_> = scenario.tasks.iter().collect();
    let total_us: u64 = trace.records.iter().map(|r| r.overhead_us).sum();
    let overhead = OverheadSummary {
        model_full_cycle: sim.engine.scheme().model_overhead(&all, &scenario.time),
        mean_per_cycle_us: if horizon == 0 { 0.0 } else { total_us as f64 / horizon as f64 },
        max_per_cycle_us: trace.records.iter().map(|r| r.overhead_us).max().unwrap_or(0),
        total_us,
    };
    let summary = CycleSummary {
        cycles: trace.horizon(),
        skipped_dispatches: trace.records.iter().map(|r| r.skipped.len() as u64).sum(),
        degraded_cycles: trace.records.iter().filter(|r| r.degraded).count() as u64,
        faults: trace.records.iter().map(|r| r.faults.len() as u64).sum(),
        alloc_retries: trace.records.iter().map(|r| r.alloc_retries).sum(),
        max_used_us: trace.records.iter().map(|r| r.used_us).max().unwrap_or(0),
    };
    let report = RunReport {
        report: "run",
        scenario: scenario.name.clone(),
        scheme,
        seed,
        horizon,
        f_m: scenario.config.f_m,
        budget_us: scenario.config.budget_us(),
        frequencies,
        overhead,
        summary,
    };
    Ok((report, trace))
}

/// Runs each scheme from the same seed over the same task set.
pub fn cmd_compare(
    scenario: &Scenario,
    schemes: &[SchemeKind],
    seed: u64,
    horizon: u64,
) -> Result<CompareReport, CommandError> {
    if schemes.len() < 2 {
        return Err(CommandError::Usage("compare needs at least two schemes".into()));
    }
    let runs =
        schemes.iter().map(|&kind| cmd_run(scenario, kind, seed, horizon).map(|(r, _)| r)).collect::<Result<_, _>>()?;
    Ok(CompareReport { report: "compare", scenario: scenario.name.clone(), seed, horizon, runs })
}

/// Verdict of every attack under every available scheme. Cases whose
/// outcome hinges on guessing an entry address are also estimated by
/// Monte Carlo over `trials` fresh cycles.
pub fn cmd_attack_matrix(scenario: &Scenario, seed: u64, trials: u64) -> Result<AttackMatrixReport, CommandError> {
    if scenario.attacks.is_empty() {
        return Err(CommandError::Usage(format!("scenario {} has no attack scripts", scenario.name)));
    }
    let schemes = scenario.available_schemes();
    let mut cases: Vec<CaseRow> = scenario
        .attacks
        .iter()
        .map(|a| CaseRow { case: a.case.to_string(), name: a.name.clone(), verdicts: BTreeMap::new() })
        .collect();
    let mut succeeded = BTreeMap::new();
    let mut rows = Vec::new();
    for &kind in &schemes {
        let mut sim = scenario.simulation_for(kind, seed)?;
        let mut attacker = seeded_entropy(seed.wrapping_add(1));
        let mut wins = 0;
        for (row, script) in cases.iter_mut().zip(&scenario.attacks) {
            let outcome = evaluate(&mut sim, script, &mut attacker)?;
            if outcome.verdict == Verdict::Succeeded {
                wins += 1;
            }
            row.verdicts.insert(kind, outcome.verdict);
            if outcome.success_probability.is_some() && trials > 0 {
                let est = monte_carlo(&mut sim, script, trials, &mut attacker)?;
                rows.push(MonteCarloRow {
                    case: script.case.to_string(),
                    scheme: kind,
                    trials: est.trials,
                    successes: est.successes,
                    rate: est.rate,
                    half_width: est.half_width,
                    closed_form: est.closed_form,
                });
            }
        }
        succeeded.insert(kind, wins);
    }
    Ok(AttackMatrixReport {
        report: "attack_matrix",
        scenario: scenario.name.clone(),
        seed,
        schemes,
        cases,
        succeeded,
        monte_carlo: rows,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocBenchParams {
    pub pool: MemoryPool,
    pub sizes: Vec<u32>,
    pub trials: u64,
    pub seed: u64,
    pub max_regions: usize,
    pub retry_budget: u32,
    pub alignment: u32,
}

impl AllocBenchParams {
    /// Pool, buffer sizes and allocator policy taken from a scenario's
    /// cycle-oriented configuration.
    pub fn from_scenario(scenario: &Scenario, trials: u64, seed: u64) -> Result<Self, CommandError> {
        let cfg = scenario
            .cycle_oriented
            .as_ref()
            .ok_or_else(|| CommandError::Usage(format!("scenario {} has no cycle-oriented buffers", scenario.name)))?;
        let mut sizes: Vec<u32> = cfg.buffers.iter().map(|b| b.size).collect();
        if let crate::protection::StackMode::PerTask(stacks) = &cfg.stacks {
            sizes.extend(stacks.values());
        }
        Ok(AllocBenchParams {
            pool: scenario.pool(),
            sizes,
            trials,
            seed,
            max_regions: scenario.max_regions,
            retry_budget: scenario.retry_budget,
            alignment: scenario.alignment,
        })
    }
}

/// Ascending against descending placement of one cycle's buffer set.
pub fn cmd_alloc_bench(params: &AllocBenchParams) -> Result<AllocBenchReport, CommandError> {
    if params.trials == 0 {
        return Err(CommandError::Usage("alloc-bench needs at least one trial".into()));
    }
    if params.sizes.is_empty() || params.sizes.contains(&0) {
        return Err(CommandError::Usage("alloc-bench needs non-zero sizes".into()));
    }
    if params.alignment == 0 || !params.alignment.is_power_of_two() {
        return Err(CommandError::Usage(format!("alignment {} is not a power of two", params.alignment)));
    }
    let orders: Vec<OrderStats> = [AllocationOrder::Ascending, AllocationOrder::Descending]
        .into_iter()
        .map(|order| {
            let mut sizes = params.sizes.clone();
            order.arrange(&mut sizes, |s| *s);
            let mut rng = seeded_entropy(params.seed);
            let mut alloc =
                PoolAllocator::with_policy(params.pool, params.max_regions, params.retry_budget, params.alignment);
            let mut failed = 0u64;
            for _ in 0..params.trials {
                // Failed sets roll back; successful ones are released like a cycle end.
                if alloc.alloc_cycle_set(&mut rng, &sizes).is_err() {
                    failed += 1;
                }
                alloc.free_all();
            }
            let s = alloc.stats();
            let n = params.trials as f64;
            OrderStats {
                order,
                mean_retries: s.realloc_retries as f64 / n,
                failure_rate: failed as f64 / n,
                mean_draws: s.attempts as f64 / n,
                retry_histogram: s.retry_histogram.clone(),
            }
        })
        .collect();
    let (asc, desc) = (orders[0].mean_retries, orders[1].mean_retries);
    Ok(AllocBenchReport {
        report: "alloc_bench",
        pool_size: params.pool.size,
        sizes: params.sizes.clone(),
        trials: params.trials,
        seed: params.seed,
        retry_budget: params.retry_budget,
        alignment: params.alignment,
        orders,
        measured_improvement: (asc > 0.0).then(|| (asc - desc) / asc),
        reference_improvement: REFERENCE_ORDER_IMPROVEMENT,
    })
}

fn csv_rows<W: io::Write, R: Serialize>(out: W, rows: impl IntoIterator<Item = R>) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

#[derive(Serialize)]
struct FrequencyCsv<'a> {
    scheme: SchemeKind,
    task: &'a str,
    priority: i32,
    aci: u32,
    expected_hz: f64,
    measured_hz: Option<f64>,
    ratio: Option<f64>,
    executions: u64,
    overhead_mean_us: f64,
}

fn frequency_rows(run: &RunReport) -> impl Iterator<Item = FrequencyCsv<'_>> {
    run.frequencies.iter().map(move |f| FrequencyCsv {
        scheme: run.scheme,
        task: &f.task,
        priority: f.priority,
        aci: f.aci,
        expected_hz: f.expected_hz,
        measured_hz: f.measured_hz,
        ratio: f.ratio,
        executions: f.executions,
        overhead_mean_us: run.overhead.mean_per_cycle_us,
    })
}

/// A report of any command.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Report {
    Run(RunReport),
    Compare(CompareReport),
    AttackMatrix(AttackMatrixReport),
    AllocBench(AllocBenchReport),
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn write<W: io::Write>(&self, format: Format, mut out: W) -> io::Result<()> {
        match format {
            Format::Json => out.write_all(self.to_json().as_bytes()),
            Format::Csv => self.write_csv(out),
        }
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        match self {
            Report::Run(r) => csv_rows(out, frequency_rows(r)),
            Report::Compare(c) => csv_rows(out, c.runs.iter().flat_map(frequency_rows)),
            Report::AttackMatrix(m) => {
                #[derive(Serialize)]
                struct Row<'a> {
                    case: &'a str,
                    name: &'a str,
                    scheme: SchemeKind,
                    verdict: Verdict,
                    mc_trials: Option<u64>,
                    mc_rate: Option<f64>,
                    mc_half_width: Option<f64>,
                    closed_form: Option<f64>,
                }
                let rows = m.cases.iter().flat_map(|c| {
                    c.verdicts.iter().map(move |(&scheme, &verdict)| {
                        let mc = m.monte_carlo.iter().find(|r| r.case == c.case && r.scheme == scheme);
                        Row {
                            case: &c.case,
                            name: &c.name,
                            scheme,
                            verdict,
                            mc_trials: mc.map(|r| r.trials),
                            mc_rate: mc.map(|r| r.rate),
                            mc_half_width: mc.map(|r| r.half_width),
                            closed_form: mc.and_then(|r| r.closed_form),
                        }
                    })
                });
                csv_rows(out, rows)
            }
            Report::AllocBench(b) => {
                #[derive(Serialize)]
                struct Row {
                    order: AllocationOrder,
                    trials: u64,
                    mean_retries: f64,
                    failure_rate: f64,
                    mean_draws: f64,
                    measured_improvement: Option<f64>,
                    reference_improvement: f64,
                }
                let rows = b.orders.iter().map(|o| Row {
                    order: o.order,
                    trials: b.trials,
                    mean_retries: o.mean_retries,
                    failure_rate: o.failure_rate,
                    mean_draws: o.mean_draws,
                    measured_improvement: b.measured_improvement,
                    reference_improvement: b.reference_improvement,
                });
                csv_rows(out, rows)
            }
        }
    }
}

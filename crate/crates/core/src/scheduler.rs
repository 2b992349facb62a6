//! Cycle-based task model: a fixed master cycle frequency, priority-ordered
//! dispatch inside each cycle's time budget, and the soft timer that tracks
//! when each task last ran.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::EntropySource;
use crate::memory::{Access, Address, FaultEvent, Machine, MachineError};
use crate::protection::{Engine, EngineError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleConfig {
    /// Master cycle frequency in Hz.
    pub f_m: u32,
}

impl CycleConfig {
    /// Microseconds available per cycle.
    pub fn budget_us(&self) -> u64 {
        1_000_000 / u64::from(self.f_m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TouchTarget {
    Fixed(Address),
    /// The word just below the current process stack pointer.
    Stack,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Touch {
    pub target: TouchTarget,
    pub access: Access,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub name: String,
    /// Lower value runs first.
    pub priority: i32,
    /// Average cycle interval: the task is due every `aci` cycles.
    pub aci: u32,
    pub exec_time_us: u32,
    pub touches: Vec<Touch>,
    pub vulnerable: bool,
}

impl Task {
    pub fn new(name: impl Into<String>, priority: i32, aci: u32, exec_time_us: u32) -> Self {
        Task { name: name.into(), priority, aci, exec_time_us, touches: Vec::new(), vulnerable: false }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.aci == 0 {
            return Err(format!("task {} has aci 0", self.name));
        }
        if self.exec_time_us == 0 {
            return Err(format!("task {} has zero execution time", self.name));
        }
        Ok(())
    }
}

/// `f_m / aci`.
pub fn expected_frequency(task: &Task, config: &CycleConfig) -> f64 {
    f64::from(config.f_m) / f64::from(task.aci)
}

/// Scheduler bookkeeping: elapsed cycles and the cycle each task last ran.
///
/// When addresses are given, every update is also stored to simulated
/// memory through the MPU, so the update faults unless the current mode
/// may write there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoftTimer {
    ticks: u64,
    last_run: BTreeMap<String, i64>,
    slots: BTreeMap<String, usize>,
    ticks_addr: Option<Address>,
    last_run_addr: Option<Address>,
}

impl SoftTimer {
    /// Boot state: every task looks like it last ran `aci` cycles ago, so
    /// all are due at tick 0.
    pub fn new(tasks: &[Task]) -> Self {
        SoftTimer {
            ticks: 0,
            last_run: tasks.iter().map(|t| (t.name.clone(), -i64::from(t.aci))).collect(),
            slots: tasks.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect(),
            ticks_addr: None,
            last_run_addr: None,
        }
    }

    pub fn with_addresses(mut self, ticks: Address, last_run: Address) -> Self {
        self.ticks_addr = Some(ticks);
        self.last_run_addr = Some(last_run);
        self
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn last_run(&self, task: &str) -> Option<i64> {
        self.last_run.get(task).copied()
    }

    pub fn set_last_run(&mut self, task: &str, tick: i64) {
        self.last_run.insert(task.to_string(), tick);
    }

    pub fn set_ticks(&mut self, ticks: u64) {
        self.ticks = ticks;
    }

    pub fn is_due(&self, task: &Task) -> bool {
        let last = self.last_run.get(&task.name).copied().unwrap_or(-i64::from(task.aci));
        self.ticks as i64 - last >= i64::from(task.aci)
    }

    /// Records this cycle's executions and advances `ticks` by one. Memory
    /// stores happen first, so a faulting update leaves the timer unchanged.
    pub fn commit(&mut self, machine: &mut Machine, executed: &[&Task]) -> Result<(), MachineError> {
        let now = self.ticks;
        if let Some(addr) = self.ticks_addr {
            machine.store_timer(addr, &((now + 1) as u32).to_le_bytes())?;
        }
        if let Some(base) = self.last_run_addr {
            for task in executed {
                let slot = self.slots.get(&task.name).copied().unwrap_or(0) as u32;
                machine.store_timer(Address(base.0 + 4 * slot), &(now as i32).to_le_bytes())?;
            }
        }
        for task in executed {
            self.last_run.insert(task.name.clone(), now as i64);
        }
        self.ticks = now + 1;
        Ok(())
    }
}

/// Tasks due this cycle, highest priority first, ties broken by name.
pub fn due_tasks<'a>(timer: &SoftTimer, tasks: &'a [Task]) -> Vec<&'a Task> {
    let mut due: Vec<&Task> = tasks.iter().filter(|t| timer.is_due(t)).collect();
    due.sort_by(|a, b| a.priority.cmp(&b.priority).then_with(|| a.name.cmp(&b.name)));
    due
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub overhead_us: u64,
    pub exec_us: u64,
    pub used_us: u64,
    pub alloc_retries: u64,
    pub degraded: bool,
    pub faults: Vec<FaultEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleTrace {
    pub f_m: u32,
    pub budget_us: u64,
    pub records: Vec<CycleRecord>,
}

impl CycleTrace {
    pub fn new(config: &CycleConfig) -> Self {
        CycleTrace { f_m: config.f_m, budget_us: config.budget_us(), records: Vec::new() }
    }

    pub fn horizon(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn executions(&self, task: &str) -> u64 {
        self.records.iter().filter(|r| r.executed.iter().any(|t| t == task)).count() as u64
    }

    /// One row per due task per cycle: `cycle,task,status,overhead_us,used_us`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cycle", "task", "status", "overhead_us", "used_us"])?;
        for r in &self.records {
            let rows = r.executed.iter().map(|t| (t, "executed")).chain(r.skipped.iter().map(|t| (t, "skipped")));
            for (task, status) in rows {
                w.write_record([
                    r.cycle.to_string(),
                    task.clone(),
                    status.to_string(),
                    r.overhead_us.to_string(),
                    r.used_us.to_string(),
                ])?;
            }
        }
        w.flush()
    }
}

/// `executions * f_m / horizon`, or `None` for an empty trace.
pub fn measured_frequency(trace: &CycleTrace, task: &str) -> Option<f64> {
    let horizon = trace.horizon();
    (horizon > 0).then(|| trace.executions(task) as f64 * f64::from(trace.f_m) / horizon as f64)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("scheme overhead of {overhead_us} us alone exceeds the {budget_us} us cycle budget")]
    BudgetUnderflow { overhead_us: u64, budget_us: u64 },
}

impl From<MachineError> for SimError {
    fn from(e: MachineError) -> Self {
        SimError::Engine(EngineError::Machine(e))
    }
}

/// Runs one cycle: begin-cycle protection, due tasks in priority order
/// while they fit the budget, end-cycle protection and soft-timer update.
///
/// Dispatch stops at the first due task that does not fit; it and every
/// task after it are recorded as skipped and stay due next cycle.
pub fn run_cycle(
    machine: &mut Machine,
    engine: &mut Engine,
    tasks: &[Task],
    timer: &mut SoftTimer,
    config: &CycleConfig,
    rng: &mut dyn EntropySource,
) -> Result<CycleRecord, SimError> {
    let tm = *machine.time_model();
    let budget_us = config.budget_us();
    let fixed = engine.fixed_overhead_bound(&tm, machine.pool().retry_budget());
    if fixed > budget_us {
        return Err(SimError::BudgetUnderflow { overhead_us: fixed, budget_us });
    }

    let cycle = timer.ticks();
    let due = due_tasks(timer, tasks);
    let begin = engine.begin_cycle(machine, rng)?;
    let end_reserve = engine.end_overhead_bound(&tm);

    let mut record =
        CycleRecord { cycle, alloc_retries: begin.alloc_retries, degraded: begin.degraded, ..Default::default() };
    let mut used = begin.overhead_us + end_reserve;
    let mut overhead = begin.overhead_us;
    let mut executed: Vec<&Task> = Vec::new();
    let mut blocked = false;
    for task in due {
        if !blocked {
            let cost = engine.task_overhead_bound(task, &tm) + u64::from(task.exec_time_us);
            if used + cost <= budget_us {
                let run = engine.run_task(machine, task)?;
                used += run.overhead_us + u64::from(task.exec_time_us);
                overhead += run.overhead_us;
                record.exec_us += u64::from(task.exec_time_us);
                record.faults.extend(run.faults);
                executed.push(task);
                continue;
            }
            blocked = true;
        }
        record.skipped.push(task.name.clone());
    }
    let end = engine.end_cycle(machine, timer, &executed)?;
    record.overhead_us = overhead + end;
    record.used_us = used - end_reserve + end;
    record.executed = executed.iter().map(|t| t.name.clone()).collect();
    Ok(record)
}

/// A machine, a bound protection engine, a task set and its soft timer.
pub struct Simulation {
    pub machine: Machine,
    pub engine: Engine,
    pub tasks: Vec<Task>,
    pub timer: SoftTimer,
    pub config: CycleConfig,
    pub entropy: Box<dyn EntropySource + Send>,
}

impl Simulation {
    pub fn run_cycle(&mut self) -> Result<CycleRecord, SimError> {
        run_cycle(
            &mut self.machine,
            &mut self.engine,
            &self.tasks,
            &mut self.timer,
            &self.config,
            self.entropy.as_mut(),
        )
    }

    pub fn run(&mut self, horizon: u64) -> Result<CycleTrace, SimError> {
        let mut trace = CycleTrace::new(&self.config);
        for _ in 0..horizon {
            trace.records.push(self.run_cycle()?);
        }
        Ok(trace)
    }
}

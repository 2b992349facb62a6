//! The two protection schemes and their cost models.
//!
//! *Task-oriented* protection gives each task its own MPU view and pays a
//! full view switch (MPU program, stack switch, two level changes, one SVC)
//! around every task. *Cycle-oriented* protection programs one MPU
//! configuration per cycle, draws the process stack and per-cycle buffers
//! from the randomized pool, drops to unprivileged mode once, and returns
//! through a single SVC when the cycle's tasks are done.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::{AllocError, AllocatedRegion, AllocationOrder, EntropySource, MemoryPool};
use crate::memory::{Address, FaultEvent, Machine, MachineError, MpuRegion, PrivilegeMode, MPU_CAPACITY};
use crate::scheduler::{SoftTimer, Task, TouchTarget};

/// Stack size used by schemes with a statically placed process stack.
pub const STATIC_STACK_SIZE: u32 = 1024;

/// Per-step time costs in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeModel {
    /// Cost of configuring one MPU region.
    pub t_mpu: u32,
    /// Upper end of the MPU configure cost. Equal to `t_mpu` for a fixed
    /// cost; larger values draw each configure uniformly from the range.
    pub t_mpu_max: u32,
    /// Process stack initialization and switch.
    pub t_stack: u32,
    pub t_svc: u32,
    /// One execution-level switch.
    pub t_switch: u32,
    /// Cost charged per pool placement draw. No measured figure exists, so
    /// the default is zero and retries are reported as counts.
    pub t_alloc_draw: u32,
}

impl Default for TimeModel {
    fn default() -> Self {
        TimeModel { t_mpu: 9, t_mpu_max: 9, t_stack: 10, t_svc: 1, t_switch: 1, t_alloc_draw: 0 }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimeModelError {
    #[error("time model entry {0} must be positive")]
    NonPositive(&'static str),
    #[error("MPU configure cost {lo}..={hi} us is outside 9..=15 us")]
    MpuOutOfRange { lo: u32, hi: u32 },
}

impl TimeModel {
    /// `allow_out_of_range` lifts the 9..=15 us bound on the MPU cost.
    pub fn validate(&self, allow_out_of_range: bool) -> Result<(), TimeModelError> {
        for (name, v) in
            [("t_mpu", self.t_mpu), ("t_stack", self.t_stack), ("t_svc", self.t_svc), ("t_switch", self.t_switch)]
        {
            if v == 0 {
                return Err(TimeModelError::NonPositive(name));
            }
        }
        let (lo, hi) = (self.t_mpu, self.t_mpu_max.max(self.t_mpu));
        if !allow_out_of_range && (lo < 9 || hi > 15) {
            return Err(TimeModelError::MpuOutOfRange { lo, hi });
        }
        Ok(())
    }

    /// Fixed cost of one unprivileged round trip excluding MPU work:
    /// two level switches, one stack setup, one SVC.
    pub fn round_trip(&self) -> u64 {
        u64::from(2 * self.t_switch + self.t_stack + self.t_svc)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadBreakdown {
    pub mpu_us: u64,
    pub switch_us: u64,
    pub stack_us: u64,
    pub svc_us: u64,
    pub total_us: u64,
}

impl OverheadBreakdown {
    fn from_parts(mpu_us: u64, switch_us: u64, stack_us: u64, svc_us: u64) -> Self {
        OverheadBreakdown { mpu_us, switch_us, stack_us, svc_us, total_us: mpu_us + switch_us + stack_us + svc_us }
    }
}

/// Per-cycle cost of task-oriented protection for `views.len()` tasks with
/// the given per-task view sizes.
pub fn overhead_task_oriented(views: &[u32], tm: &TimeModel) -> OverheadBreakdown {
    let n = views.len() as u64;
    let regions: u64 = views.iter().map(|&m| u64::from(m)).sum();
    OverheadBreakdown::from_parts(
        regions * u64::from(tm.t_mpu),
        n * 2 * u64::from(tm.t_switch),
        n * u64::from(tm.t_stack),
        n * u64::from(tm.t_svc),
    )
}

/// Per-cycle cost of cycle-oriented protection with `z` MPU regions.
pub fn overhead_ctomp(z: u32, tm: &TimeModel) -> OverheadBreakdown {
    OverheadBreakdown::from_parts(
        u64::from(z) * u64::from(tm.t_mpu),
        2 * u64::from(tm.t_switch),
        u64::from(tm.t_stack),
        u64::from(tm.t_svc),
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub name: String,
    pub size: u32,
    /// Marks the secure process stack entry.
    #[serde(default)]
    pub stack: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum StackMode {
    /// One process stack per cycle shared by all tasks.
    #[default]
    Shared,
    /// One stack per task, each re-drawn every cycle.
    PerTask(BTreeMap<String, u32>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskOrientedConfig {
    pub views: BTreeMap<String, Vec<MpuRegion>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleOrientedConfig {
    pub regions: Vec<MpuRegion>,
    pub buffers: Vec<BufferSpec>,
    pub order: AllocationOrder,
    pub stacks: StackMode,
    /// Whole-set placement attempts per cycle before the cycle falls back.
    pub set_attempts: u32,
    /// Halt instead of degrading when the pool cannot satisfy a cycle.
    pub strict: bool,
}

/// Default number of whole-set placement attempts per cycle.
pub const DEFAULT_SET_ATTEMPTS: u32 = 4;

impl CycleOrientedConfig {
    pub fn new(regions: Vec<MpuRegion>, buffers: Vec<BufferSpec>) -> Self {
        CycleOrientedConfig {
            regions,
            buffers,
            order: AllocationOrder::default(),
            stacks: StackMode::Shared,
            set_attempts: DEFAULT_SET_ATTEMPTS,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtectionScheme {
    None,
    TaskOriented(TaskOrientedConfig),
    CycleOriented(CycleOrientedConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    None,
    TaskOriented,
    CycleOriented,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::None, SchemeKind::TaskOriented, SchemeKind::CycleOriented];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::None => "none",
            SchemeKind::TaskOriented => "task_oriented",
            SchemeKind::CycleOriented => "cycle_oriented",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SchemeKind::None),
            "task_oriented" | "task-oriented" => Ok(SchemeKind::TaskOriented),
            "cycle_oriented" | "cycle-oriented" => Ok(SchemeKind::CycleOriented),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemeError {
    #[error("task {0} has no memory view")]
    MissingView(String),
    #[error("task {task} view has {count} regions; views need 1..={MPU_CAPACITY}")]
    ViewSize { task: String, count: usize },
    #[error("cycle program has {0} regions, capacity is {MPU_CAPACITY}")]
    TooManyRegions(usize),
    #[error("shared-stack buffer list needs exactly one stack entry, found {0}")]
    StackEntries(usize),
    #[error("task {0} has no per-task stack size")]
    MissingTaskStack(String),
    #[error("buffer {0} has zero size")]
    EmptyBuffer(String),
}

impl ProtectionScheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            ProtectionScheme::None => SchemeKind::None,
            ProtectionScheme::TaskOriented(_) => SchemeKind::TaskOriented,
            ProtectionScheme::CycleOriented(_) => SchemeKind::CycleOriented,
        }
    }

    pub fn validate(&self, tasks: &[Task]) -> Result<(), SchemeError> {
        match self {
            ProtectionScheme::None => Ok(()),
            ProtectionScheme::TaskOriented(cfg) => {
                for task in tasks {
                    let view = cfg.views.get(&task.name).ok_or_else(|| SchemeError::MissingView(task.name.clone()))?;
                    if view.is_empty() {
                        return Err(SchemeError::ViewSize { task: task.name.clone(), count: 0 });
                    }
                }
                Ok(())
            }
            ProtectionScheme::CycleOriented(cfg) => {
                if cfg.regions.len() > MPU_CAPACITY {
                    return Err(SchemeError::TooManyRegions(cfg.regions.len()));
                }
                if let Some(b) = cfg.buffers.iter().find(|b| b.size == 0) {
                    return Err(SchemeError::EmptyBuffer(b.name.clone()));
                }
                let stacks = cfg.buffers.iter().filter(|b| b.stack).count();
                match &cfg.stacks {
                    StackMode::Shared if stacks != 1 => Err(SchemeError::StackEntries(stacks)),
                    StackMode::Shared => Ok(()),
                    StackMode::PerTask(sizes) => {
                        if stacks != 0 {
                            return Err(SchemeError::StackEntries(stacks));
                        }
                        match tasks.iter().find(|t| !sizes.contains_key(&t.name)) {
                            Some(t) => Err(SchemeError::MissingTaskStack(t.name.clone())),
                            None => Ok(()),
                        }
                    }
                }
            }
        }
    }

    /// Closed-form per-cycle overhead for a cycle that runs `executed`.
    pub fn model_overhead(&self, executed: &[&Task], tm: &TimeModel) -> OverheadBreakdown {
        match self {
            ProtectionScheme::None => OverheadBreakdown::default(),
            ProtectionScheme::TaskOriented(cfg) => {
                let views: Vec<u32> =
                    executed.iter().map(|t| cfg.views.get(&t.name).map_or(0, |v| v.len() as u32)).collect();
                overhead_task_oriented(&views, tm)
            }
            ProtectionScheme::CycleOriented(cfg) => overhead_ctomp(cfg.regions.len() as u32, tm),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("pool could not supply the cycle's regions: {0}")]
    AllocationFailed(AllocError),
    #[error("per-cycle pool regions still live at cycle start")]
    PoolNotEmpty,
}

/// What the attacker can know about the process stack base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackKnowledge {
    Exact,
    Guess,
}

/// Where shellcode can land in the vulnerable task's context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackSurface {
    pub stack: AllocatedRegion,
    pub buffers: BTreeMap<String, AllocatedRegion>,
    pub pool: MemoryPool,
    pub alignment: u32,
    pub stack_knowledge: StackKnowledge,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BeginReport {
    pub overhead_us: u64,
    pub alloc_retries: u64,
    pub degraded: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskRun {
    pub overhead_us: u64,
    pub faults: Vec<FaultEvent>,
}

#[derive(Clone, Debug, Default)]
struct CycleState {
    stack: Option<AllocatedRegion>,
    task_stacks: BTreeMap<String, AllocatedRegion>,
    buffers: BTreeMap<String, AllocatedRegion>,
    degraded: bool,
}

/// A scheme bound to one machine, with its per-cycle state.
#[derive(Debug)]
pub struct Engine {
    scheme: ProtectionScheme,
    static_stack: Option<AllocatedRegion>,
    cycle: Option<CycleState>,
}

impl Engine {
    /// Boots the machine under `scheme`.
    ///
    /// The unprotected baseline turns the MPU off and enters unprivileged
    /// thread mode once on a static stack. Task-oriented protection keeps a
    /// static stack and stays privileged between tasks. Cycle-oriented
    /// protection stays privileged until the first cycle begins.
    pub fn install(machine: &mut Machine, scheme: ProtectionScheme, tasks: &[Task]) -> Result<Engine, EngineError> {
        scheme.validate(tasks)?;
        if machine.mode() != PrivilegeMode::Privileged {
            return Err(MachineError::NotPrivileged(machine.mode()).into());
        }
        let mut static_stack = None;
        match &scheme {
            ProtectionScheme::None => {
                machine.set_mpu_enabled(false)?;
                let base = machine.pool().pool().base;
                let stack = machine.pool_mut().reserve_at(base, STATIC_STACK_SIZE)?;
                machine.drop_to_unprivileged(stack.stack_top())?;
                static_stack = Some(stack);
            }
            ProtectionScheme::TaskOriented(_) => {
                machine.set_mpu_enabled(true)?;
                let base = machine.pool().pool().base;
                static_stack = Some(machine.pool_mut().reserve_at(base, STATIC_STACK_SIZE)?);
            }
            ProtectionScheme::CycleOriented(_) => {
                machine.set_mpu_enabled(true)?;
            }
        }
        Ok(Engine { scheme, static_stack, cycle: None })
    }

    pub fn scheme(&self) -> &ProtectionScheme {
        &self.scheme
    }

    pub fn kind(&self) -> SchemeKind {
        self.scheme.kind()
    }

    /// Worst-case overhead charged by `begin_cycle` plus `end_cycle`.
    pub fn fixed_overhead_bound(&self, tm: &TimeModel, retry_budget: u32) -> u64 {
        match &self.scheme {
            ProtectionScheme::CycleOriented(cfg) => {
                let allocations = match &cfg.stacks {
                    StackMode::Shared => cfg.buffers.len(),
                    StackMode::PerTask(sizes) => cfg.buffers.len() + sizes.len(),
                } as u64;
                cfg.regions.len() as u64 * u64::from(tm.t_mpu_max.max(tm.t_mpu))
                    + tm.round_trip()
                    + allocations
                        * u64::from(cfg.set_attempts.max(1))
                        * u64::from(retry_budget + 1)
                        * u64::from(tm.t_alloc_draw)
            }
            _ => 0,
        }
    }

    /// Worst-case overhead charged by `end_cycle` alone.
    pub fn end_overhead_bound(&self, tm: &TimeModel) -> u64 {
        match &self.scheme {
            ProtectionScheme::CycleOriented(_) => u64::from(tm.t_svc + tm.t_switch),
            _ => 0,
        }
    }

    /// Worst-case overhead charged around one task.
    pub fn task_overhead_bound(&self, task: &Task, tm: &TimeModel) -> u64 {
        match &self.scheme {
            ProtectionScheme::TaskOriented(cfg) => {
                let m = cfg.views.get(&task.name).map_or(0, Vec::len) as u64;
                m * u64::from(tm.t_mpu_max.max(tm.t_mpu)) + tm.round_trip()
            }
            _ => 0,
        }
    }

    pub fn begin_cycle(
        &mut self,
        machine: &mut Machine,
        rng: &mut dyn EntropySource,
    ) -> Result<BeginReport, EngineError> {
        match &self.scheme {
            ProtectionScheme::CycleOriented(_) => self.begin_cycle_ctomp(machine, rng),
            _ => Ok(BeginReport::default()),
        }
    }

    /// Programs the cycle's MPU regions, draws the stack and buffers from
    /// the pool, points PSP at the stack and drops to unprivileged mode.
    pub fn begin_cycle_ctomp(
        &mut self,
        machine: &mut Machine,
        rng: &mut dyn EntropySource,
    ) -> Result<BeginReport, EngineError> {
        let ProtectionScheme::CycleOriented(cfg) = &self.scheme else {
            return Ok(BeginReport::default());
        };
        if machine.mode() != PrivilegeMode::Privileged {
            return Err(MachineError::NotPrivileged(machine.mode()).into());
        }
        if !machine.pool().table().is_empty() {
            return Err(EngineError::PoolNotEmpty);
        }
        let clock0 = machine.clock_us();
        machine.clear_mpu()?;
        machine.set_mpu_enabled(true)?;
        for region in &cfg.regions {
            machine.configure_mpu(region.clone())?;
        }

        // (name, size, is_stack, owning task)
        let mut wanted: Vec<(String, u32, bool, Option<String>)> =
            cfg.buffers.iter().map(|b| (b.name.clone(), b.size, b.stack, None)).collect();
        if let StackMode::PerTask(sizes) = &cfg.stacks {
            for (task, &size) in sizes {
                wanted.push((format!("stack:{task}"), size, true, Some(task.clone())));
            }
        }
        cfg.order.arrange(&mut wanted, |w| w.1);
        let sizes: Vec<u32> = wanted.iter().map(|w| w.1).collect();

        let stats0 = machine.pool().stats().clone();
        let mut result = machine.pool_mut().alloc_cycle_set(rng, &sizes);
        for _ in 1..cfg.set_attempts {
            if result.is_ok() {
                break;
            }
            result = machine.pool_mut().alloc_cycle_set(rng, &sizes);
        }
        let stats1 = machine.pool().stats();
        let draws = stats1.attempts - stats0.attempts;
        let alloc_retries = stats1.realloc_retries - stats0.realloc_retries;
        machine.advance(draws * u64::from(machine.time_model().t_alloc_draw));

        let mut state = CycleState::default();
        match result {
            Ok(regions) => {
                for (w, region) in wanted.into_iter().zip(regions) {
                    match (w.2, w.3) {
                        (true, Some(task)) => {
                            state.task_stacks.insert(task, region);
                        }
                        (true, None) => state.stack = Some(region),
                        (false, _) => {
                            state.buffers.insert(w.0, region);
                        }
                    }
                }
                if state.stack.is_none() {
                    state.stack = state.task_stacks.values().next().copied();
                }
            }
            Err(err) if cfg.strict => return Err(EngineError::AllocationFailed(err)),
            Err(err) => {
                warn!("cycle allocation failed ({err}); running this cycle unprotected");
                machine.clear_mpu()?;
                machine.set_mpu_enabled(false)?;
                let stack_size = wanted.iter().filter(|w| w.2).map(|w| w.1).max().unwrap_or(STATIC_STACK_SIZE);
                let base = machine.pool().pool().base;
                state.stack = Some(machine.pool_mut().reserve_at(base, stack_size)?);
                state.degraded = true;
            }
        }
        let stack = state.stack.expect("cycle stack assigned");
        machine.drop_to_unprivileged(stack.stack_top())?;
        let degraded = state.degraded;
        self.cycle = Some(state);
        Ok(BeginReport { overhead_us: machine.clock_us() - clock0, alloc_retries, degraded })
    }

    /// Runs one task under the scheme and reports the protection overhead
    /// charged around it.
    pub fn run_task(&mut self, machine: &mut Machine, task: &Task) -> Result<TaskRun, EngineError> {
        match &self.scheme {
            ProtectionScheme::TaskOriented(_) => self.run_task_oriented(machine, task),
            ProtectionScheme::CycleOriented(_) => {
                if let Some(stack) = self.cycle.as_ref().and_then(|c| c.task_stacks.get(&task.name)) {
                    machine.retarget_psp(stack.stack_top())?;
                }
                Ok(TaskRun { overhead_us: 0, faults: execute(machine, task) })
            }
            ProtectionScheme::None => Ok(TaskRun { overhead_us: 0, faults: execute(machine, task) }),
        }
    }

    /// Switches into `task`'s view on the static stack, runs it, and returns
    /// to privileged mode through SVC.
    pub fn run_task_oriented(&mut self, machine: &mut Machine, task: &Task) -> Result<TaskRun, EngineError> {
        let clock0 = machine.clock_us();
        self.enter_view(machine, &task.name)?;
        let faults = execute(machine, task);
        machine.svc_call();
        let overhead_us = machine.clock_us() - clock0 - u64::from(task.exec_time_us);
        Ok(TaskRun { overhead_us, faults })
    }

    fn enter_view(&mut self, machine: &mut Machine, task: &str) -> Result<(), EngineError> {
        let ProtectionScheme::TaskOriented(cfg) = &self.scheme else {
            return Ok(());
        };
        if machine.mode() != PrivilegeMode::Privileged {
            return Err(MachineError::NotPrivileged(machine.mode()).into());
        }
        let view = cfg.views.get(task).ok_or_else(|| SchemeError::MissingView(task.to_string()))?;
        if view.len() > MPU_CAPACITY {
            return Err(MachineError::CapacityExceeded { capacity: MPU_CAPACITY }.into());
        }
        machine.clear_mpu()?;
        for region in view {
            machine.configure_mpu(region.clone())?;
        }
        let stack = self.static_stack.expect("task-oriented engine has a static stack");
        machine.drop_to_unprivileged(stack.stack_top())?;
        Ok(())
    }

    /// Closes the cycle: back to privileged mode, soft timer update, pool
    /// release. Returns the overhead charged.
    pub fn end_cycle(
        &mut self,
        machine: &mut Machine,
        timer: &mut SoftTimer,
        executed: &[&Task],
    ) -> Result<u64, EngineError> {
        match &self.scheme {
            ProtectionScheme::CycleOriented(_) => self.end_cycle_ctomp(machine, timer, executed),
            _ => {
                timer.commit(machine, executed)?;
                Ok(0)
            }
        }
    }

    pub fn end_cycle_ctomp(
        &mut self,
        machine: &mut Machine,
        timer: &mut SoftTimer,
        executed: &[&Task],
    ) -> Result<u64, EngineError> {
        if machine.mode() != PrivilegeMode::Unprivileged {
            return Err(MachineError::NotUnprivileged(machine.mode()).into());
        }
        let clock0 = machine.clock_us();
        machine.svc_call();
        timer.commit(machine, executed)?;
        self.release_cycle(machine);
        Ok(machine.clock_us() - clock0)
    }

    fn release_cycle(&mut self, machine: &mut Machine) {
        machine.pool_mut().free_all();
        self.cycle = None;
    }

    /// Puts the machine into `task`'s unprivileged context without running it.
    pub fn enter_task_context(
        &mut self,
        machine: &mut Machine,
        task: &str,
        rng: &mut dyn EntropySource,
    ) -> Result<(), EngineError> {
        match &self.scheme {
            ProtectionScheme::None => Ok(()),
            ProtectionScheme::TaskOriented(_) => self.enter_view(machine, task),
            ProtectionScheme::CycleOriented(_) => {
                self.begin_cycle_ctomp(machine, rng)?;
                if let Some(stack) = self.cycle.as_ref().and_then(|c| c.task_stacks.get(task)) {
                    machine.retarget_psp(stack.stack_top())?;
                }
                Ok(())
            }
        }
    }

    /// Leaves a context opened by [`enter_task_context`](Self::enter_task_context)
    /// without touching the soft timer.
    pub fn leave_task_context(&mut self, machine: &mut Machine) -> Result<(), EngineError> {
        match &self.scheme {
            ProtectionScheme::None => Ok(()),
            ProtectionScheme::TaskOriented(_) => {
                machine.svc_call();
                Ok(())
            }
            ProtectionScheme::CycleOriented(_) => {
                machine.svc_call();
                self.release_cycle(machine);
                Ok(())
            }
        }
    }

    /// The regions an attacker in `task`'s context could target.
    pub fn attack_surface(&self, machine: &Machine, task: &str) -> Option<AttackSurface> {
        let pool = *machine.pool().pool();
        let alignment = machine.pool().alignment();
        match &self.scheme {
            ProtectionScheme::CycleOriented(_) => {
                let cycle = self.cycle.as_ref()?;
                let stack = cycle.task_stacks.get(task).copied().or(cycle.stack)?;
                Some(AttackSurface {
                    stack,
                    buffers: cycle.buffers.clone(),
                    pool,
                    alignment,
                    // A degraded cycle sits at the pool base, a known address.
                    stack_knowledge: if cycle.degraded { StackKnowledge::Exact } else { StackKnowledge::Guess },
                })
            }
            _ => Some(AttackSurface {
                stack: self.static_stack?,
                buffers: BTreeMap::new(),
                pool,
                alignment,
                stack_knowledge: StackKnowledge::Exact,
            }),
        }
    }

    pub fn current_stack(&self) -> Option<AllocatedRegion> {
        match &self.cycle {
            Some(c) => c.stack,
            None => self.static_stack,
        }
    }
}

/// Charges a task's execution time and replays its memory touches.
fn execute(machine: &mut Machine, task: &Task) -> Vec<FaultEvent> {
    machine.task_step(&task.name);
    let faults = task
        .touches
        .iter()
        .filter_map(|touch| {
            let addr = match &touch.target {
                TouchTarget::Fixed(addr) => *addr,
                TouchTarget::Stack => Address(machine.stacks().psp.0.saturating_sub(4)),
            };
            machine.check_access(addr, touch.access).err()
        })
        .collect();
    machine.advance(u64::from(task.exec_time_us));
    faults
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_oriented_golden_values() {
        let tm = TimeModel::default();
        assert_eq!(overhead_task_oriented(&[1; 7], &tm).total_us, 154);
        assert_eq!(overhead_task_oriented(&[], &tm).total_us, 0);
        let b = overhead_task_oriented(&[2, 4, 1], &tm);
        assert_eq!(b.total_us, 102);
        assert_eq!((b.mpu_us, b.switch_us, b.stack_us, b.svc_us), (63, 6, 30, 3));
    }

    #[test]
    fn ctomp_golden_values() {
        let tm = TimeModel::default();
        assert_eq!(overhead_ctomp(0, &tm).total_us, 13);
        assert_eq!(overhead_ctomp(6, &tm).total_us, 67);
    }

    #[test]
    fn time_model_validation() {
        assert!(TimeModel::default().validate(false).is_ok());
        let slow = TimeModel { t_mpu: 20, t_mpu_max: 20, ..Default::default() };
        assert!(slow.validate(false).is_err());
        assert!(slow.validate(true).is_ok());
        let zero = TimeModel { t_svc: 0, ..Default::default() };
        assert_eq!(zero.validate(true), Err(TimeModelError::NonPositive("t_svc")));
    }

    #[test]
    fn scheme_names_round_trip() {
        for kind in SchemeKind::ALL {
            assert_eq!(kind.name().parse::<SchemeKind>().unwrap(), kind);
        }
    }
}

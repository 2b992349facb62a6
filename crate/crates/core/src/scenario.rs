//! Scenario files: memory layout, task set, scheme parameters and attack
//! scripts in one TOML document.
//!
//! Addresses may be written as integers or as symbol names, optionally
//! with an offset (`"last_run+4"`). Symbols are resolved and every
//! reference is checked against the mapped segments at load time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::alloc::{
    seeded_entropy, AllocationOrder, MemoryPool, PoolAllocator, DEFAULT_ALIGNMENT, DEFAULT_MAX_REGIONS,
    DEFAULT_RETRY_BUDGET,
};
use crate::attack::{
    validate_script, Action, AttackBody, AttackScript, AttackerKnowledge, CaseId, Gadget, GadgetChain, ShellcodeSite,
};
use crate::memory::{Access, Address, Machine, MemoryMap, MpuRegion, Perms, Segment, SegmentKind};
use crate::protection::{
    BufferSpec, CycleOrientedConfig, Engine, EngineError, ProtectionScheme, SchemeKind, StackKnowledge, StackMode,
    TaskOrientedConfig, TimeModel, DEFAULT_SET_ATTEMPTS,
};
use crate::scheduler::{CycleConfig, Simulation, SoftTimer, Task, Touch, TouchTarget};

const ARDUPILOT_LIKE: &str = include_str!("../scenarios/ardupilot_like.toml");
const CRAZYFLIE_LIKE: &str = include_str!("../scenarios/crazyflie_like.toml");

/// Names of the scenarios compiled into the crate.
pub const BUNDLED: [&str; 2] = ["ardupilot_like", "crazyflie_like"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario: {message}")]
    Validation { message: String, symbol: Option<String> },
}

impl ScenarioError {
    fn invalid(message: impl Into<String>) -> Self {
        ScenarioError::Validation { message: message.into(), symbol: None }
    }

    fn unresolved(symbol: &str, context: &str) -> Self {
        ScenarioError::Validation {
            message: format!("{context}: symbol `{symbol}` does not resolve to mapped memory"),
            symbol: Some(symbol.to_string()),
        }
    }
}

// ---- raw file shape ----

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum AddrRef {
    Num(u64),
    Sym(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_horizon")]
    horizon: u64,
    f_m: u32,
    #[serde(default)]
    time: TimeModel,
    #[serde(default)]
    allow_out_of_range_timing: bool,
    memory: RawMemory,
    #[serde(default)]
    regions: BTreeMap<String, RawRegion>,
    #[serde(default)]
    tasks: Vec<RawTask>,
    scheme: RawScheme,
    #[serde(default)]
    attacks: Vec<RawAttack>,
}

fn default_horizon() -> u64 {
    4000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMemory {
    segments: Vec<RawSegment>,
    #[serde(default)]
    symbols: BTreeMap<String, AddrRef>,
    #[serde(default = "default_max_regions")]
    max_regions: usize,
    #[serde(default = "default_retry_budget")]
    retry_budget: u32,
    #[serde(default = "default_alignment")]
    alignment: u32,
    timer: Option<RawTimer>,
}

fn default_max_regions() -> usize {
    DEFAULT_MAX_REGIONS
}

fn default_retry_budget() -> u32 {
    DEFAULT_RETRY_BUDGET
}

fn default_alignment() -> u32 {
    DEFAULT_ALIGNMENT
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    name: String,
    kind: SegmentKind,
    base: u64,
    size: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimer {
    ticks: AddrRef,
    last_run: AddrRef,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    base: AddrRef,
    size: u64,
    privileged: Perms,
    unprivileged: Perms,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: String,
    priority: i32,
    aci: u32,
    exec_us: u32,
    #[serde(default)]
    vulnerable: bool,
    #[serde(default)]
    touches: Vec<RawTouch>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTouch {
    addr: Option<AddrRef>,
    #[serde(default)]
    stack: bool,
    access: Access,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    default: SchemeKind,
    task_oriented: Option<RawTaskOriented>,
    cycle_oriented: Option<RawCycleOriented>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskOriented {
    views: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCycleOriented {
    regions: Vec<String>,
    #[serde(default)]
    buffers: Vec<BufferSpec>,
    #[serde(default)]
    order: AllocationOrder,
    #[serde(default)]
    task_stacks: BTreeMap<String, u32>,
    #[serde(default = "default_set_attempts")]
    set_attempts: u32,
    #[serde(default)]
    strict: bool,
}

fn default_set_attempts() -> u32 {
    DEFAULT_SET_ATTEMPTS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    case: CaseId,
    name: String,
    task: String,
    #[serde(default)]
    payload: Vec<RawAction>,
    rop: Option<RawChain>,
    #[serde(default = "default_guesses")]
    guesses_per_cycle: u32,
    stack_base: Option<StackKnowledge>,
}

fn default_guesses() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    call: Option<AddrRef>,
    #[serde(default)]
    args: Vec<u32>,
    write: Option<AddrRef>,
    bytes: Option<Vec<u8>>,
    word: Option<u32>,
    overwrite_return: Option<AddrRef>,
    inject: Option<String>,
    #[serde(default)]
    body: Vec<RawAction>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChain {
    #[serde(default)]
    gadgets: Vec<RawGadget>,
    #[serde(default)]
    terminal: Vec<RawAction>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGadget {
    addr: AddrRef,
    #[serde(default)]
    effects: Vec<RawAction>,
}

// ---- validated form ----

/// A validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub horizon: u64,
    pub config: CycleConfig,
    pub time: TimeModel,
    pub map: MemoryMap,
    pub symbols: BTreeMap<String, Address>,
    pub max_regions: usize,
    pub retry_budget: u32,
    pub alignment: u32,
    pub timer: Option<(Address, Address)>,
    pub tasks: Vec<Task>,
    pub default_scheme: SchemeKind,
    pub task_oriented: Option<TaskOrientedConfig>,
    pub cycle_oriented: Option<CycleOrientedConfig>,
    pub attacks: Vec<AttackScript>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

struct Resolver<'a> {
    map: &'a MemoryMap,
    symbols: &'a BTreeMap<String, Address>,
}

impl Resolver<'_> {
    fn resolve(&self, r: &AddrRef, context: &str) -> Result<Address, ScenarioError> {
        match r {
            AddrRef::Num(n) => {
                let addr = u32::try_from(*n)
                    .map_err(|_| ScenarioError::invalid(format!("{context}: address {n:#x} exceeds 32 bits")))?;
                if !self.map.is_mapped(Address(addr)) {
                    return Err(ScenarioError::invalid(format!("{context}: address {addr:#010x} is unmapped")));
                }
                Ok(Address(addr))
            }
            AddrRef::Sym(s) => {
                let (name, offset) = match s.split_once('+') {
                    Some((name, off)) => {
                        (name.trim(), parse_int(off.trim()).ok_or_else(|| ScenarioError::unresolved(s, context))?)
                    }
                    None => (s.trim(), 0),
                };
                let base = self.symbols.get(name).ok_or_else(|| ScenarioError::unresolved(name, context))?;
                let addr = base
                    .offset(offset)
                    .filter(|a| self.map.is_mapped(*a))
                    .ok_or_else(|| ScenarioError::unresolved(s, context))?;
                Ok(addr)
            }
        }
    }

    fn action(&self, raw: &RawAction, context: &str, nested: bool) -> Result<Action, ScenarioError> {
        let kinds = [raw.call.is_some(), raw.write.is_some(), raw.overwrite_return.is_some(), raw.inject.is_some()];
        if kinds.iter().filter(|&&k| k).count() != 1 {
            return Err(ScenarioError::invalid(format!(
                "{context}: each action needs exactly one of call, write, overwrite_return, inject"
            )));
        }
        if let Some(target) = &raw.call {
            return Ok(Action::CallAddr { addr: self.resolve(target, context)?, args: raw.args.clone() });
        }
        if let Some(target) = &raw.write {
            let bytes = match (&raw.bytes, raw.word) {
                (Some(b), None) if !b.is_empty() => b.clone(),
                (None, Some(w)) => w.to_le_bytes().to_vec(),
                _ => {
                    return Err(ScenarioError::invalid(format!(
                        "{context}: write needs either non-empty bytes or word"
                    )))
                }
            };
            return Ok(Action::WriteMem { addr: self.resolve(target, context)?, bytes });
        }
        if let Some(target) = &raw.overwrite_return {
            return Ok(Action::OverwriteReturn { target: self.resolve(target, context)? });
        }
        if nested {
            return Err(ScenarioError::invalid(format!("{context}: shellcode bodies cannot inject again")));
        }
        let site = match raw.inject.as_deref() {
            Some("stack") => ShellcodeSite::Stack,
            Some(buffer) => ShellcodeSite::Buffer(buffer.to_string()),
            None => unreachable!("checked above"),
        };
        let body = raw.body.iter().map(|a| self.action(a, context, true)).collect::<Result<_, _>>()?;
        Ok(Action::InjectShellcode { site, body })
    }

    fn actions(&self, raw: &[RawAction], context: &str) -> Result<Vec<Action>, ScenarioError> {
        raw.iter().map(|a| self.action(a, context, false)).collect()
    }
}

fn parse_int(s: &str) -> Option<u32> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(&hex.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_toml_str(src: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = toml::from_str(src).map_err(|e| ScenarioError::Parse {
            line: e.span().map_or(0, |s| line_of(src, s.start)),
            message: e.message().to_string(),
        })?;
        Self::from_raw(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&src)
    }

    /// One of the [`BUNDLED`] scenarios.
    pub fn bundled(name: &str) -> Option<Scenario> {
        let src = match name {
            "ardupilot_like" => ARDUPILOT_LIKE,
            "crazyflie_like" => CRAZYFLIE_LIKE,
            _ => return None,
        };
        Some(Self::from_toml_str(src).expect("bundled scenario is valid"))
    }

    /// A bundled scenario name or a path to a scenario file.
    pub fn open(name_or_path: &str) -> Result<Scenario, ScenarioError> {
        match Self::bundled(name_or_path) {
            Some(s) => Ok(s),
            None => Self::load(name_or_path),
        }
    }

    pub fn bundled_source(name: &str) -> Option<&'static str> {
        match name {
            "ardupilot_like" => Some(ARDUPILOT_LIKE),
            "crazyflie_like" => Some(CRAZYFLIE_LIKE),
            _ => None,
        }
    }

    fn from_raw(raw: RawScenario) -> Result<Scenario, ScenarioError> {
        if raw.f_m == 0 {
            return Err(ScenarioError::invalid("f_m must be positive"));
        }
        if raw.tasks.is_empty() {
            return Err(ScenarioError::invalid("task list is empty"));
        }
        raw.time.validate(raw.allow_out_of_range_timing).map_err(|e| ScenarioError::invalid(e.to_string()))?;

        let mut segments = Vec::with_capacity(raw.memory.segments.len());
        for s in &raw.memory.segments {
            let (base, size) = match (u32::try_from(s.base), u32::try_from(s.size)) {
                (Ok(b), Ok(z)) => (b, z),
                _ => return Err(ScenarioError::invalid(format!("segment {} does not fit in 32 bits", s.name))),
            };
            segments.push(Segment { name: s.name.clone(), kind: s.kind, base: Address(base), size });
        }
        let map = MemoryMap::new(segments).map_err(|e| ScenarioError::invalid(e.to_string()))?;

        let mut symbols = BTreeMap::new();
        for (name, r) in &raw.memory.symbols {
            let AddrRef::Num(n) = r else {
                return Err(ScenarioError::invalid(format!("symbol {name} must be a numeric address")));
            };
            match u32::try_from(*n).ok().map(Address).filter(|a| map.is_mapped(*a)) {
                Some(addr) => symbols.insert(name.clone(), addr),
                None => return Err(ScenarioError::unresolved(name, "memory.symbols")),
            };
        }
        let res = Resolver { map: &map, symbols: &symbols };

        let alignment = raw.memory.alignment;
        if alignment == 0 || !alignment.is_power_of_two() {
            return Err(ScenarioError::invalid(format!("alignment {alignment} is not a power of two")));
        }
        let timer = match &raw.memory.timer {
            Some(t) => Some((res.resolve(&t.ticks, "memory.timer")?, res.resolve(&t.last_run, "memory.timer")?)),
            None => None,
        };

        let mut library = BTreeMap::new();
        for (name, r) in &raw.regions {
            let base = res.resolve(&r.base, &format!("region {name}"))?;
            let size =
                u32::try_from(r.size).map_err(|_| ScenarioError::invalid(format!("region {name} is too large")))?;
            let region = MpuRegion::new(name.clone(), base, size, r.privileged, r.unprivileged);
            if !region.is_valid() {
                return Err(ScenarioError::invalid(format!("region {name} is empty or leaves the address space")));
            }
            library.insert(name.clone(), region);
        }
        let lookup = |name: &str, context: &str| {
            library.get(name).cloned().ok_or_else(|| ScenarioError::Validation {
                message: format!("{context}: unknown region `{name}`"),
                symbol: Some(name.to_string()),
            })
        };

        let mut tasks = Vec::with_capacity(raw.tasks.len());
        let mut names = BTreeSet::new();
        for t in &raw.tasks {
            if !names.insert(t.name.clone()) {
                return Err(ScenarioError::invalid(format!("duplicate task {}", t.name)));
            }
            let mut task = Task::new(t.name.clone(), t.priority, t.aci, t.exec_us);
            task.vulnerable = t.vulnerable;
            for touch in &t.touches {
                let target = match (&touch.addr, touch.stack) {
                    (Some(a), false) => TouchTarget::Fixed(res.resolve(a, &format!("task {}", t.name))?),
                    (None, true) => TouchTarget::Stack,
                    _ => {
                        return Err(ScenarioError::invalid(format!(
                            "task {}: a touch needs either addr or stack = true",
                            t.name
                        )))
                    }
                };
                task.touches.push(Touch { target, access: touch.access });
            }
            task.validate().map_err(ScenarioError::invalid)?;
            tasks.push(task);
        }

        let task_oriented = match &raw.scheme.task_oriented {
            Some(to) => {
                let mut views = BTreeMap::new();
                for (task, regions) in &to.views {
                    if !names.contains(task) {
                        return Err(ScenarioError::invalid(format!("view for unknown task {task}")));
                    }
                    let context = format!("view of {task}");
                    views.insert(task.clone(), regions.iter().map(|r| lookup(r, &context)).collect::<Result<_, _>>()?);
                }
                Some(TaskOrientedConfig { views })
            }
            None => None,
        };
        let cycle_oriented = match &raw.scheme.cycle_oriented {
            Some(co) => {
                let regions = co.regions.iter().map(|r| lookup(r, "cycle regions")).collect::<Result<_, _>>()?;
                let stacks = if co.task_stacks.is_empty() {
                    StackMode::Shared
                } else {
                    if let Some(t) = co.task_stacks.keys().find(|t| !names.contains(*t)) {
                        return Err(ScenarioError::invalid(format!("stack for unknown task {t}")));
                    }
                    StackMode::PerTask(co.task_stacks.clone())
                };
                let pool = map.pool_segment();
                if let Some(b) = co.buffers.iter().find(|b| b.size > pool.size) {
                    return Err(ScenarioError::invalid(format!("buffer {} is larger than the pool", b.name)));
                }
                Some(CycleOrientedConfig {
                    regions,
                    buffers: co.buffers.clone(),
                    order: co.order,
                    stacks,
                    set_attempts: co.set_attempts.max(1),
                    strict: co.strict,
                })
            }
            None => None,
        };

        let mut attacks = Vec::with_capacity(raw.attacks.len());
        for a in &raw.attacks {
            let context = format!("attack {}", a.name);
            match tasks.iter().find(|t| t.name == a.task) {
                Some(t) if t.vulnerable => {}
                Some(_) => {
                    return Err(ScenarioError::invalid(format!("{context}: task {} is not marked vulnerable", a.task)))
                }
                None => return Err(ScenarioError::invalid(format!("{context}: unknown task {}", a.task))),
            }
            let body = match (&a.rop, a.payload.is_empty()) {
                (Some(chain), true) => {
                    let gadgets = chain
                        .gadgets
                        .iter()
                        .map(|g| {
                            Ok(Gadget {
                                addr: res.resolve(&g.addr, &context)?,
                                effects: res.actions(&g.effects, &context)?,
                            })
                        })
                        .collect::<Result<_, ScenarioError>>()?;
                    AttackBody::Rop(GadgetChain { gadgets, terminal: res.actions(&chain.terminal, &context)? })
                }
                (None, false) => AttackBody::Payload(res.actions(&a.payload, &context)?),
                _ => return Err(ScenarioError::invalid(format!("{context}: give either a payload or a rop chain"))),
            };
            let script = AttackScript {
                case: a.case,
                name: a.name.clone(),
                task: a.task.clone(),
                body,
                knowledge: AttackerKnowledge {
                    knows_static_addresses: true,
                    stack_base: a.stack_base.unwrap_or(StackKnowledge::Exact),
                    guesses_per_cycle: a.guesses_per_cycle.max(1),
                },
            };
            validate_script(&map, &script).map_err(|e| ScenarioError::invalid(format!("{context}: {e}")))?;
            attacks.push(script);
        }

        let scenario = Scenario {
            name: raw.name,
            seed: raw.seed,
            horizon: raw.horizon,
            config: CycleConfig { f_m: raw.f_m },
            time: raw.time,
            map,
            symbols,
            max_regions: raw.memory.max_regions,
            retry_budget: raw.memory.retry_budget,
            alignment,
            timer,
            tasks,
            default_scheme: raw.scheme.default,
            task_oriented,
            cycle_oriented,
            attacks,
        };
        for kind in scenario.available_schemes() {
            let scheme = scenario.scheme(kind).expect("available");
            scheme.validate(&scenario.tasks).map_err(|e| ScenarioError::invalid(format!("scheme {kind}: {e}")))?;
        }
        if !scenario.available_schemes().contains(&scenario.default_scheme) {
            return Err(ScenarioError::invalid(format!(
                "default scheme {} has no parameters",
                scenario.default_scheme
            )));
        }
        Ok(scenario)
    }

    pub fn symbol(&self, name: &str) -> Option<Address> {
        self.symbols.get(name).copied()
    }

    pub fn pool(&self) -> MemoryPool {
        let seg = self.map.pool_segment();
        MemoryPool { base: seg.base, size: seg.size }
    }

    /// Schemes this scenario has parameters for. `None` is always available.
    pub fn available_schemes(&self) -> Vec<SchemeKind> {
        let mut kinds = vec![SchemeKind::None];
        if self.task_oriented.is_some() {
            kinds.push(SchemeKind::TaskOriented);
        }
        if self.cycle_oriented.is_some() {
            kinds.push(SchemeKind::CycleOriented);
        }
        kinds
    }

    pub fn scheme(&self, kind: SchemeKind) -> Option<ProtectionScheme> {
        match kind {
            SchemeKind::None => Some(ProtectionScheme::None),
            SchemeKind::TaskOriented => self.task_oriented.clone().map(ProtectionScheme::TaskOriented),
            SchemeKind::CycleOriented => self.cycle_oriented.clone().map(ProtectionScheme::CycleOriented),
        }
    }

    /// A freshly reset machine for this layout.
    pub fn machine(&self) -> Machine {
        let mut machine = Machine::new(self.map.clone(), self.time);
        *machine.pool_mut() =
            PoolAllocator::with_policy(self.pool(), self.max_regions, self.retry_budget, self.alignment);
        machine
    }

    /// Boots a simulation under `scheme` with placement draws seeded by `seed`.
    pub fn simulation(&self, scheme: ProtectionScheme, seed: u64) -> Result<Simulation, EngineError> {
        let mut machine = self.machine();
        machine.seed_timing(seed ^ 0x5eed_71e5);
        let engine = Engine::install(&mut machine, scheme, &self.tasks)?;
        let mut timer = SoftTimer::new(&self.tasks);
        if let Some((ticks, last_run)) = self.timer {
            timer = timer.with_addresses(ticks, last_run);
        }
        Ok(Simulation {
            machine,
            engine,
            tasks: self.tasks.clone(),
            timer,
            config: self.config,
            entropy: Box::new(seeded_entropy(seed)),
        })
    }

    /// Boots a simulation under one of the scenario's schemes.
    pub fn simulation_for(&self, kind: SchemeKind, seed: u64) -> Result<Simulation, ScenarioError> {
        let scheme = self
            .scheme(kind)
            .ok_or_else(|| ScenarioError::invalid(format!("scenario has no parameters for scheme {kind}")))?;
        self.simulation(scheme, seed).map_err(|e| ScenarioError::invalid(format!("scheme {kind}: {e}")))
    }

    pub fn attack(&self, case: CaseId) -> Option<&AttackScript> {
        self.attacks.iter().find(|a| a.case == case)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"
f_m = 100

[memory]
segments = [
  { name = "flash", kind = "code", base = 0x08000000, size = 0x1000 },
  { name = "sram", kind = "data", base = 0x20000000, size = 0x1000 },
  { name = "pool", kind = "pool", base = 0x20001000, size = 0x800 },
]
symbols = { entry = 0x08000100 }

[regions.flash]
base = "entry"
size = 0x100
privileged = "rx"
unprivileged = "rx"

[[tasks]]
name = "t"
priority = 0
aci = 1
exec_us = 10
vulnerable = true

[scheme]
default = "none"
"#;

    #[test]
    fn minimal_loads() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.config.budget_us(), 10_000);
        assert_eq!(s.symbol("entry"), Some(Address(0x0800_0100)));
        assert_eq!(s.available_schemes(), vec![SchemeKind::None]);
        assert_eq!(s.pool().size, 0x800);
    }

    #[test]
    fn parse_error_reports_line() {
        let bad = MINIMAL.replace("aci = 1", "aci = \"one\"");
        match Scenario::from_toml_str(&bad) {
            Err(ScenarioError::Parse { line, .. }) => {
                let expected = bad.lines().position(|l| l.contains("\"one\"")).unwrap() + 1;
                assert_eq!(line, expected);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_task_list_is_rejected() {
        let start = MINIMAL.find("[[tasks]]").unwrap();
        let end = MINIMAL.find("[scheme]").unwrap();
        let src = format!("{}{}", &MINIMAL[..start], &MINIMAL[end..]);
        assert!(matches!(Scenario::from_toml_str(&src), Err(ScenarioError::Validation { .. })));
    }

    #[test]
    fn unknown_symbol_is_named() {
        let src = MINIMAL.replace("base = \"entry\"", "base = \"nowhere\"");
        match Scenario::from_toml_str(&src) {
            Err(ScenarioError::Validation { symbol, .. }) => assert_eq!(symbol.as_deref(), Some("nowhere")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn symbol_offsets() {
        let src = MINIMAL.replace("base = \"entry\"", "base = \"entry+0x10\"");
        let s = Scenario::from_toml_str(&src).unwrap();
        assert_eq!(s.time, TimeModel::default());
        assert!(s.scheme(SchemeKind::CycleOriented).is_none());
    }

    #[test]
    fn int_parsing() {
        assert_eq!(parse_int("0x10"), Some(16));
        assert_eq!(parse_int("1_000"), Some(1000));
        assert_eq!(parse_int("z"), None);
    }
}

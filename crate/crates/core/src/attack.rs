//! Memory-corruption attack scripts and their adjudication.
//!
//! Attacks are replayed as access checks from the vulnerable task's
//! unprivileged context: which address is touched, in which mode, with
//! which permission. No machine code is emulated. Every write an attack
//! makes is journaled and rolled back once the verdict is known.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::alloc::{AllocatedRegion, EntropySource, MemoryPool};
use crate::memory::{Access, Address, FaultEvent, Machine, MemoryMap, SegmentKind};
use crate::protection::{AttackSurface, EngineError, StackKnowledge};
use crate::scheduler::Simulation;

/// Attack case number (1..=8) or a return-oriented chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaseId {
    Case(u8),
    Rop,
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseId::Case(n) => write!(f, "{n}"),
            CaseId::Rop => f.write_str("rop"),
        }
    }
}

impl Serialize for CaseId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CaseId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) if (1..=8).contains(&n) => Ok(CaseId::Case(n)),
            Raw::Str(s) if s.eq_ignore_ascii_case("rop") => Ok(CaseId::Rop),
            Raw::Str(s) => match s.parse::<u8>() {
                Ok(n) if (1..=8).contains(&n) => Ok(CaseId::Case(n)),
                _ => Err(serde::de::Error::custom(format!("invalid attack case {s:?}"))),
            },
            Raw::Num(n) => Err(serde::de::Error::custom(format!("attack case {n} outside 1..=8"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShellcodeSite {
    Stack,
    /// A named per-cycle buffer. Schemes without per-cycle buffers place
    /// the shellcode on the stack instead.
    Buffer(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    WriteMem { addr: Address, bytes: Vec<u8> },
    CallAddr { addr: Address, args: Vec<u32> },
    OverwriteReturn { target: Address },
    InjectShellcode { site: ShellcodeSite, body: Vec<Action> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gadget {
    pub addr: Address,
    pub effects: Vec<Action>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GadgetChain {
    pub gadgets: Vec<Gadget>,
    pub terminal: Vec<Action>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerKnowledge {
    pub knows_static_addresses: bool,
    pub stack_base: StackKnowledge,
    /// Distinct entry addresses tried per cycle when guessing.
    pub guesses_per_cycle: u32,
}

impl Default for AttackerKnowledge {
    fn default() -> Self {
        AttackerKnowledge { knows_static_addresses: true, stack_base: StackKnowledge::Exact, guesses_per_cycle: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackBody {
    Payload(Vec<Action>),
    Rop(GadgetChain),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackScript {
    pub case: CaseId,
    pub name: String,
    /// The vulnerable task whose context the attack runs in.
    pub task: String,
    pub body: AttackBody,
    pub knowledge: AttackerKnowledge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Succeeded,
    BlockedByPrivilege,
    BlockedByMpu,
    DefeatedByRandomization,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Succeeded => "succeeded",
            Verdict::BlockedByPrivilege => "blocked_by_privilege",
            Verdict::BlockedByMpu => "blocked_by_mpu",
            Verdict::DefeatedByRandomization => "defeated_by_randomization",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackOutcome {
    pub verdict: Verdict,
    pub fault: Option<FaultEvent>,
    /// Per-attempt success probability when an entry address was guessed.
    pub success_probability: Option<f64>,
    pub trials: u64,
    /// Start addresses of every write the attack completed before the verdict.
    pub effects: Vec<Address>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttackError {
    #[error("invalid attack script: {0}")]
    InvalidScript(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

struct Stop {
    verdict: Verdict,
    fault: Option<FaultEvent>,
}

impl Stop {
    fn privilege(fault: FaultEvent) -> Self {
        Stop { verdict: Verdict::BlockedByPrivilege, fault: Some(fault) }
    }

    fn mpu(fault: FaultEvent) -> Self {
        Stop { verdict: Verdict::BlockedByMpu, fault: Some(fault) }
    }
}

/// Replays actions against one machine and journals every store.
struct Adjudicator<'a> {
    machine: &'a mut Machine,
    surface: &'a AttackSurface,
    knowledge: AttackerKnowledge,
    rng: &'a mut dyn rand::RngCore,
    journal: Vec<(Address, Vec<u8>)>,
    effects: Vec<Address>,
    success_probability: Option<f64>,
}

impl Adjudicator<'_> {
    fn store(&mut self, addr: Address, bytes: &[u8]) -> Result<(), Stop> {
        self.machine.check_range(addr, bytes.len() as u32, Access::Write).map_err(Stop::mpu)?;
        let old = self.machine.write_raw(addr, bytes).expect("script addresses validated");
        self.journal.push((addr, old));
        self.effects.push(addr);
        Ok(())
    }

    fn return_slot(&self) -> Address {
        Address(self.machine.stacks().psp.0.saturating_sub(4))
    }

    /// Permission check of one action with no side effects.
    fn permitted(&self, action: &Action) -> Result<(), Stop> {
        let m = &*self.machine;
        match action {
            Action::WriteMem { addr, bytes } => {
                m.check_range(*addr, bytes.len() as u32, Access::Write).map_err(Stop::mpu)
            }
            Action::CallAddr { addr, .. } => m.check_access(*addr, Access::Execute).map_err(Stop::privilege),
            Action::OverwriteReturn { target } => {
                m.check_range(self.return_slot(), 4, Access::Write).map_err(Stop::mpu)?;
                m.check_access(*target, Access::Execute).map_err(Stop::privilege)
            }
            Action::InjectShellcode { .. } => Ok(()),
        }
    }

    fn site_region(&self, site: &ShellcodeSite) -> AllocatedRegion {
        match site {
            ShellcodeSite::Stack => self.surface.stack,
            ShellcodeSite::Buffer(name) => self.surface.buffers.get(name).copied().unwrap_or(self.surface.stack),
        }
    }

    /// True when one of the attacker's guesses hits `region.start`.
    fn guess_entry(&mut self, region: AllocatedRegion) -> bool {
        let stack_knowledge = match self.surface.stack_knowledge {
            StackKnowledge::Guess => StackKnowledge::Guess,
            StackKnowledge::Exact => self.knowledge.stack_base,
        };
        if stack_knowledge == StackKnowledge::Exact {
            return true;
        }
        let pool: &MemoryPool = &self.surface.pool;
        let align = self.surface.alignment;
        let n = pool.feasible_starts(region.size, align);
        let k = self.knowledge.guesses_per_cycle.clamp(1, n.max(1));
        self.success_probability = Some(shellcode_success_probability(pool, region.size, align, k));
        if n <= 1 {
            return pool.start_at(0, align) == region.start;
        }
        sample(self.rng, n as usize, k as usize).iter().any(|i| pool.start_at(i as u32, align) == region.start)
    }

    fn step(&mut self, action: &Action) -> Result<(), Stop> {
        match action {
            Action::WriteMem { addr, bytes } => self.store(*addr, bytes),
            Action::CallAddr { addr, .. } => self.machine.check_access(*addr, Access::Execute).map_err(Stop::privilege),
            Action::OverwriteReturn { target } => {
                self.store(self.return_slot(), &target.0.to_le_bytes())?;
                self.machine.check_access(*target, Access::Execute).map_err(Stop::privilege)
            }
            Action::InjectShellcode { site, body } => {
                let region = self.site_region(site);
                // The overflow itself: shellcode image written at the site.
                let image = vec![0xBE; (body.len().max(1) * 8).min(region.size as usize)];
                self.store(region.start, &image)?;
                // Deterministic barriers are checked before the entry guess.
                for inner in body {
                    self.permitted(inner)?;
                }
                if !self.guess_entry(region) {
                    return Err(Stop { verdict: Verdict::DefeatedByRandomization, fault: None });
                }
                self.machine.check_access(region.start, Access::Execute).map_err(Stop::mpu)?;
                body.iter().try_for_each(|inner| self.step(inner))
            }
        }
    }

    fn finish(mut self, result: Result<(), Stop>) -> AttackOutcome {
        for (addr, old) in self.journal.drain(..).rev() {
            self.machine.write_raw(addr, &old).expect("journaled address is mapped");
        }
        let (verdict, fault) = match result {
            Ok(()) => (Verdict::Succeeded, None),
            Err(stop) => (stop.verdict, stop.fault),
        };
        AttackOutcome {
            verdict,
            fault,
            success_probability: self.success_probability,
            trials: 1,
            effects: self.effects,
        }
    }
}

fn action_addresses(action: &Action, out: &mut Vec<(Address, u32)>, depth: usize) -> Result<(), AttackError> {
    match action {
        Action::WriteMem { addr, bytes } => out.push((*addr, bytes.len().max(1) as u32)),
        Action::CallAddr { addr, .. } => out.push((*addr, 1)),
        Action::OverwriteReturn { target } => out.push((*target, 1)),
        Action::InjectShellcode { body, .. } => {
            if depth > 0 {
                return Err(AttackError::InvalidScript("nested shellcode injection".into()));
            }
            for inner in body {
                action_addresses(inner, out, depth + 1)?;
            }
        }
    }
    Ok(())
}

fn validate_actions(map: &MemoryMap, actions: &[Action]) -> Result<(), AttackError> {
    let mut addrs = Vec::new();
    for a in actions {
        action_addresses(a, &mut addrs, 0)?;
    }
    match addrs.into_iter().find(|&(addr, len)| !map.is_mapped_range(addr, len)) {
        Some((addr, _)) => Err(AttackError::InvalidScript(format!("address {addr} is unmapped"))),
        None => Ok(()),
    }
}

/// Validates a script against a memory layout without running it.
pub fn validate_script(map: &MemoryMap, script: &AttackScript) -> Result<(), AttackError> {
    match &script.body {
        AttackBody::Payload(actions) => validate_actions(map, actions),
        AttackBody::Rop(chain) => validate_chain(map, chain),
    }
}

fn validate_chain(map: &MemoryMap, chain: &GadgetChain) -> Result<(), AttackError> {
    for g in &chain.gadgets {
        match map.segment_of(g.addr) {
            Some(seg) if seg.kind == SegmentKind::Code => {}
            _ => return Err(AttackError::InvalidScript(format!("gadget {} is outside the code segment", g.addr))),
        }
        validate_actions(map, &g.effects)?;
    }
    validate_actions(map, &chain.terminal)
}

/// Adjudicates `script` in the machine's current context. The machine's
/// memory, mode and clock are unchanged afterwards.
pub fn run_attack(
    machine: &mut Machine,
    surface: &AttackSurface,
    script: &AttackScript,
    rng: &mut dyn rand::RngCore,
) -> Result<AttackOutcome, AttackError> {
    validate_script(machine.map(), script)?;
    let mut adj = Adjudicator {
        machine,
        surface,
        knowledge: script.knowledge,
        rng,
        journal: Vec::new(),
        effects: Vec::new(),
        success_probability: None,
    };
    let result = match &script.body {
        AttackBody::Payload(actions) => actions.iter().try_for_each(|a| adj.step(a)),
        AttackBody::Rop(chain) => rop_steps(&mut adj, chain),
    };
    Ok(adj.finish(result))
}

fn rop_steps(adj: &mut Adjudicator<'_>, chain: &GadgetChain) -> Result<(), Stop> {
    if let Some(first) = chain.gadgets.first() {
        adj.store(adj.return_slot(), &first.addr.0.to_le_bytes())?;
    }
    for gadget in &chain.gadgets {
        adj.machine.check_access(gadget.addr, Access::Execute).map_err(Stop::privilege)?;
        gadget.effects.iter().try_for_each(|a| adj.step(a))?;
    }
    chain.terminal.iter().try_for_each(|a| adj.step(a))
}

/// Adjudicates a gadget chain. Gadgets must lie in the code segment.
pub fn run_rop(
    machine: &mut Machine,
    surface: &AttackSurface,
    chain: &GadgetChain,
    rng: &mut dyn rand::RngCore,
) -> Result<AttackOutcome, AttackError> {
    let script = AttackScript {
        case: CaseId::Rop,
        name: "rop".into(),
        task: String::new(),
        body: AttackBody::Rop(chain.clone()),
        knowledge: AttackerKnowledge::default(),
    };
    run_attack(machine, surface, &script, rng)
}

/// Chance that `guesses` distinct uniform guesses hit the start of a
/// `stack_size` region placed uniformly over the pool's aligned starts.
pub fn shellcode_success_probability(pool: &MemoryPool, stack_size: u32, alignment: u32, guesses: u32) -> f64 {
    let n = pool.feasible_starts(stack_size, alignment);
    if n == 0 {
        return 0.0;
    }
    f64::from(guesses.min(n)) / f64::from(n)
}

/// Opens the vulnerable task's context under the simulation's scheme, runs
/// the script, and closes the context again.
pub fn evaluate(
    sim: &mut Simulation,
    script: &AttackScript,
    rng: &mut dyn rand::RngCore,
) -> Result<AttackOutcome, AttackError> {
    let entropy: &mut dyn EntropySource = sim.entropy.as_mut();
    sim.engine.enter_task_context(&mut sim.machine, &script.task, entropy)?;
    let result = match sim.engine.attack_surface(&sim.machine, &script.task) {
        Some(surface) => run_attack(&mut sim.machine, &surface, script, rng),
        None => Err(AttackError::InvalidScript("scheme exposes no process stack".into())),
    };
    sim.engine.leave_task_context(&mut sim.machine)?;
    result
}

/// Verdict for every script, keyed by case.
pub fn run_all_cases(
    sim: &mut Simulation,
    scripts: &[AttackScript],
    rng: &mut dyn rand::RngCore,
) -> Result<BTreeMap<CaseId, AttackOutcome>, AttackError> {
    scripts.iter().map(|s| Ok((s.case, evaluate(sim, s, rng)?))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    /// Closed-form per-trial probability, when the script guesses an entry.
    pub closed_form: Option<f64>,
}

/// Repeats a script over `trials` fresh cycles.
pub fn monte_carlo(
    sim: &mut Simulation,
    script: &AttackScript,
    trials: u64,
    rng: &mut dyn rand::RngCore,
) -> Result<MonteCarloEstimate, AttackError> {
    let mut successes = 0;
    let mut closed_form = None;
    for _ in 0..trials {
        let outcome = evaluate(sim, script, rng)?;
        closed_form = closed_form.or(outcome.success_probability);
        if outcome.verdict == Verdict::Succeeded {
            successes += 1;
        }
    }
    let rate = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
    let half_width = if trials == 0 { 0.0 } else { 1.96 * (rate * (1.0 - rate) / trials as f64).sqrt() };
    Ok(MonteCarloEstimate { trials, successes, rate, half_width, closed_form })
}

/// Uniform entry guess used by tests that need a raw draw.
pub fn uniform_guess(pool: &MemoryPool, size: u32, alignment: u32, rng: &mut impl Rng) -> Address {
    let n = pool.feasible_starts(size, alignment).max(1);
    pool.start_at(rng.gen_range(0..n), alignment)
}

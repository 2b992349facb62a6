//! Cycle-oriented MPU memory protection for MCU-class flight software,
//! as a deterministic simulator.
//!
//! The crate models a flat 32-bit address space guarded by an MPU, a
//! randomized region allocator, a fixed-frequency cycle scheduler, three
//! protection schemes, and an attack harness that replays memory-corruption
//! attempts against each scheme.

pub mod alloc;
pub mod attack;
pub mod memory;
pub mod protection;
pub mod report;
pub mod scenario;
pub mod scheduler;

pub use alloc::{AllocError, AllocatedRegion, MemoryPool, PoolAllocator, RegionHandle, RegionTable};
pub use attack::{run_attack, run_rop, shellcode_success_probability, AttackOutcome, AttackScript, CaseId, Verdict};
pub use memory::{Access, Address, Machine, MemoryMap, MpuRegion, Perms, PrivilegeMode};
pub use protection::{Engine, ProtectionScheme, SchemeKind, TimeModel};
pub use scenario::{Scenario, ScenarioError};
pub use scheduler::{CycleConfig, CycleTrace, SimError, Simulation, Task};

//! Simulated MCU address space: segments, MPU regions, execution levels and
//! the main/process stack pointer pair.
//!
//! The model works at the granularity of "which address, which mode, which
//! permission". There is no instruction emulation and no register encoding.
//! MPU regions may have any size and base (real Cortex-M parts require
//! power-of-two sizes and natural alignment; this model does not).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alloc::PoolAllocator;
use crate::protection::TimeModel;

/// Number of MPU regions the modeled hardware can hold.
pub const MPU_CAPACITY: usize = 16;

/// Segment bases in a layout must be aligned to this many bytes.
pub const SEGMENT_ALIGNMENT: u32 = 8;

/// A byte offset into the flat 32-bit simulated address space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(pub u32);

impl Address {
    pub fn offset(self, delta: u32) -> Option<Address> {
        self.0.checked_add(delta).map(Address)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Read,
    Write,
    Execute,
}

impl Access {
    pub const ALL: [Access; 3] = [Access::Read, Access::Write, Access::Execute];
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Access::Read => "read",
            Access::Write => "write",
            Access::Execute => "execute",
        })
    }
}

/// A subset of {read, write, execute}, written as e.g. `"rw"`, `"r-x"` or `""`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const R: Perms = Perms(0b001);
    pub const W: Perms = Perms(0b010);
    pub const X: Perms = Perms(0b100);
    pub const RW: Perms = Perms(0b011);
    pub const RX: Perms = Perms(0b101);
    pub const RWX: Perms = Perms(0b111);

    pub fn allows(self, access: Access) -> bool {
        let bit = match access {
            Access::Read => Self::R.0,
            Access::Write => Self::W.0,
            Access::Execute => Self::X.0,
        };
        self.0 & bit != 0
    }

    pub fn union(self, other: Perms) -> Perms {
        Perms(self.0 | other.0)
    }
}

impl fmt::Debug for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Perms({self})")
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |a: Access, ch: char| if self.allows(a) { ch } else { '-' };
        write!(f, "{}{}{}", c(Access::Read, 'r'), c(Access::Write, 'w'), c(Access::Execute, 'x'))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid permission string {0:?} (expected a subset of \"rwx\")")]
pub struct PermsParseError(String);

impl FromStr for Perms {
    type Err = PermsParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut perms = Perms::NONE;
        for ch in s.chars() {
            perms = perms.union(match ch {
                'r' | 'R' => Perms::R,
                'w' | 'W' => Perms::W,
                'x' | 'X' => Perms::X,
                '-' => Perms::NONE,
                _ => return Err(PermsParseError(s.to_string())),
            });
        }
        Ok(perms)
    }
}

impl Serialize for Perms {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivilegeMode {
    Privileged,
    Unprivileged,
    /// Exception handler context entered through SVC. Always privileged
    /// for access checks, always on the main stack.
    Handler,
}

impl PrivilegeMode {
    pub fn is_privileged(self) -> bool {
        !matches!(self, PrivilegeMode::Unprivileged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Code,
    Data,
    Peripheral,
    PrivatePeripheral,
    Pool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub base: Address,
    pub size: u32,
}

impl Segment {
    pub fn contains(&self, addr: Address) -> bool {
        addr.0 >= self.base.0 && u64::from(addr.0) < u64::from(self.base.0) + u64::from(self.size)
    }

    /// Exclusive end as a u64 so a segment may touch the top of the space.
    pub fn end(&self) -> u64 {
        u64::from(self.base.0) + u64::from(self.size)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("segment {0} has zero size")]
    EmptySegment(String),
    #[error("segment {name} base {base} is not {SEGMENT_ALIGNMENT}-byte aligned")]
    Misaligned { name: String, base: Address },
    #[error("segment {0} runs past the end of the address space")]
    OutOfSpace(String),
    #[error("segments {0} and {1} overlap")]
    Overlap(String, String),
    #[error("layout needs exactly one pool segment, found {0}")]
    PoolCount(usize),
}

#[derive(Clone, Debug)]
struct Backing {
    segment: Segment,
    bytes: Vec<u8>,
}

/// The set of mapped segments together with their byte contents.
#[derive(Clone, Debug)]
pub struct MemoryMap {
    backing: Vec<Backing>,
}

impl MemoryMap {
    pub fn new(mut segments: Vec<Segment>) -> Result<Self, LayoutError> {
        segments.sort_by_key(|s| s.base);
        for s in &segments {
            if s.size == 0 {
                return Err(LayoutError::EmptySegment(s.name.clone()));
            }
            if s.base.0 % SEGMENT_ALIGNMENT != 0 {
                return Err(LayoutError::Misaligned { name: s.name.clone(), base: s.base });
            }
            if s.end() > 1u64 << 32 {
                return Err(LayoutError::OutOfSpace(s.name.clone()));
            }
        }
        for pair in segments.windows(2) {
            if pair[0].end() > u64::from(pair[1].base.0) {
                return Err(LayoutError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
            }
        }
        let pools = segments.iter().filter(|s| s.kind == SegmentKind::Pool).count();
        if pools != 1 {
            return Err(LayoutError::PoolCount(pools));
        }
        let backing =
            segments.into_iter().map(|segment| Backing { bytes: vec![0; segment.size as usize], segment }).collect();
        Ok(MemoryMap { backing })
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.backing.iter().map(|b| &b.segment)
    }

    pub fn segment_of(&self, addr: Address) -> Option<&Segment> {
        self.segments().find(|s| s.contains(addr))
    }

    pub fn is_mapped(&self, addr: Address) -> bool {
        self.segment_of(addr).is_some()
    }

    /// True when every byte of `[addr, addr+len)` lies in a single segment.
    pub fn is_mapped_range(&self, addr: Address, len: u32) -> bool {
        match self.segment_of(addr) {
            Some(s) => u64::from(addr.0) + u64::from(len) <= s.end(),
            None => false,
        }
    }

    pub fn pool_segment(&self) -> &Segment {
        self.segments().find(|s| s.kind == SegmentKind::Pool).expect("layout validated with one pool")
    }

    fn locate(&self, addr: Address, len: usize) -> Option<(usize, usize)> {
        self.backing.iter().enumerate().find_map(|(i, b)| {
            let s = &b.segment;
            (s.contains(addr) && u64::from(addr.0) + len as u64 <= s.end()).then(|| (i, (addr.0 - s.base.0) as usize))
        })
    }

    pub fn read(&self, addr: Address, len: usize) -> Option<&[u8]> {
        let (i, off) = self.locate(addr, len)?;
        Some(&self.backing[i].bytes[off..off + len])
    }

    /// Raw store with no permission check. Returns the bytes it replaced.
    pub fn write(&mut self, addr: Address, data: &[u8]) -> Option<Vec<u8>> {
        let (i, off) = self.locate(addr, data.len())?;
        let slot = &mut self.backing[i].bytes[off..off + data.len()];
        let old = slot.to_vec();
        slot.copy_from_slice(data);
        Some(old)
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        for b in &self.backing {
            hasher.update(b.segment.base.0.to_le_bytes());
            hasher.update(&b.bytes);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpuRegion {
    pub name: String,
    pub base: Address,
    pub size: u32,
    /// Permissions for privileged and handler execution.
    pub privileged: Perms,
    pub unprivileged: Perms,
}

impl MpuRegion {
    pub fn new(name: impl Into<String>, base: Address, size: u32, privileged: Perms, unprivileged: Perms) -> Self {
        MpuRegion { name: name.into(), base, size, privileged, unprivileged }
    }

    pub fn covers(&self, addr: Address) -> bool {
        addr.0 >= self.base.0 && u64::from(addr.0) < u64::from(self.base.0) + u64::from(self.size)
    }

    pub fn perms_for(&self, mode: PrivilegeMode) -> Perms {
        if mode.is_privileged() {
            self.privileged
        } else {
            self.unprivileged
        }
    }

    pub fn is_valid(&self) -> bool {
        self.size > 0 && u64::from(self.base.0) + u64::from(self.size) <= 1u64 << 32
    }
}

/// Ordered MPU program. The first region covering an address decides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MpuConfig {
    regions: Vec<MpuRegion>,
    capacity: usize,
    /// With the MPU disabled every access is allowed, as on hardware that
    /// never turned the unit on.
    enabled: bool,
}

impl Default for MpuConfig {
    fn default() -> Self {
        MpuConfig { regions: Vec::new(), capacity: MPU_CAPACITY, enabled: true }
    }
}

impl MpuConfig {
    pub fn with_capacity(capacity: usize) -> Self {
        MpuConfig { capacity, ..Default::default() }
    }

    pub fn regions(&self) -> &[MpuRegion] {
        &self.regions
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn push(&mut self, region: MpuRegion) -> Result<(), MachineError> {
        if !region.is_valid() {
            return Err(MachineError::InvalidRegion(region.name));
        }
        if self.regions.len() >= self.capacity {
            return Err(MachineError::CapacityExceeded { capacity: self.capacity });
        }
        self.regions.push(region);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.regions.clear();
    }

    /// Pure permission decision: first covering region wins, uncovered
    /// addresses fall back to privileged-allow / unprivileged-deny.
    pub fn decide(&self, mode: PrivilegeMode, addr: Address, access: Access) -> bool {
        if !self.enabled {
            return true;
        }
        match self.regions.iter().find(|r| r.covers(addr)) {
            Some(region) => region.perms_for(mode).allows(access),
            None => mode.is_privileged(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveStack {
    MainStack,
    ProcessStack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSelect {
    pub active: ActiveStack,
    pub msp: Address,
    pub psp: Address,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    MpuFault,
    PrivilegeViolation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub kind: FaultKind,
    pub address: Address,
    pub access: Access,
    pub mode: PrivilegeMode,
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {} at {} in {:?} mode", self.kind, self.access, self.address, self.mode)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MachineError {
    #[error("privilege violation: {0}")]
    PrivilegeViolation(FaultEvent),
    #[error("MPU capacity of {capacity} regions exceeded")]
    CapacityExceeded { capacity: usize },
    #[error("MPU region {0} is empty or leaves the address space")]
    InvalidRegion(String),
    #[error("process stack pointer {0} is not inside an allocated pool region")]
    InvalidStack(Address),
    #[error("operation requires privileged mode, machine is in {0:?}")]
    NotPrivileged(PrivilegeMode),
    #[error("operation requires unprivileged mode, machine is in {0:?}")]
    NotUnprivileged(PrivilegeMode),
    #[error("access to unmapped memory at {0}")]
    Unmapped(Address),
    #[error("memory fault: {0}")]
    Fault(FaultEvent),
}

/// Trace entries recorded when event logging is on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum MachineEvent {
    Mode { mode: PrivilegeMode },
    TaskStep { task: String, mode: PrivilegeMode, stack: ActiveStack },
    TimerWrite { mode: PrivilegeMode },
}

/// One simulated MCU: memory, MPU, execution level, stacks, clock and the
/// pool allocator that owns the process-stack region table.
#[derive(Debug)]
pub struct Machine {
    map: MemoryMap,
    mpu: MpuConfig,
    mode: PrivilegeMode,
    stacks: StackSelect,
    clock_us: u64,
    time: TimeModel,
    timing_rng: ChaCha8Rng,
    pool: PoolAllocator,
    events: Option<Vec<MachineEvent>>,
}

impl Machine {
    /// A freshly reset machine: privileged, on the main stack, MPU enabled
    /// with no regions.
    pub fn new(map: MemoryMap, time: TimeModel) -> Self {
        let pool_seg = map.pool_segment();
        let pool = PoolAllocator::new(crate::alloc::MemoryPool { base: pool_seg.base, size: pool_seg.size });
        let msp = map
            .segments()
            .find(|s| s.kind == SegmentKind::Data)
            .map(|s| Address((s.end() - 8) as u32))
            .unwrap_or_default();
        Machine {
            map,
            mpu: MpuConfig::default(),
            mode: PrivilegeMode::Privileged,
            stacks: StackSelect { active: ActiveStack::MainStack, msp, psp: Address(0) },
            clock_us: 0,
            time,
            timing_rng: ChaCha8Rng::seed_from_u64(0),
            pool,
            events: None,
        }
    }

    /// Seeds the generator used when the MPU configure cost is drawn from a range.
    pub fn seed_timing(&mut self, seed: u64) {
        self.timing_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn enable_event_log(&mut self) {
        self.events.get_or_insert_with(Vec::new);
    }

    pub fn events(&self) -> &[MachineEvent] {
        self.events.as_deref().unwrap_or(&[])
    }

    fn log(&mut self, event: MachineEvent) {
        if let Some(events) = &mut self.events {
            events.push(event);
        }
    }

    pub fn map(&self) -> &MemoryMap {
        &self.map
    }

    pub fn mpu(&self) -> &MpuConfig {
        &self.mpu
    }

    pub fn mode(&self) -> PrivilegeMode {
        self.mode
    }

    pub fn stacks(&self) -> StackSelect {
        self.stacks
    }

    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    pub fn time_model(&self) -> &TimeModel {
        &self.time
    }

    pub fn pool(&self) -> &PoolAllocator {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut PoolAllocator {
        &mut self.pool
    }

    pub fn advance(&mut self, us: u64) {
        self.clock_us += us;
    }

    /// Decides an access in the current mode. Denial is a value.
    pub fn check_access(&self, addr: Address, access: Access) -> Result<(), FaultEvent> {
        if self.mpu.decide(self.mode, addr, access) {
            Ok(())
        } else {
            Err(FaultEvent { kind: FaultKind::MpuFault, address: addr, access, mode: self.mode })
        }
    }

    /// Checks every byte of a range; reports the first denied byte.
    pub fn check_range(&self, addr: Address, len: u32, access: Access) -> Result<(), FaultEvent> {
        for i in 0..len.max(1) {
            let a = addr.offset(i).unwrap_or(addr);
            self.check_access(a, access)?;
        }
        Ok(())
    }

    fn require_privileged_register(&self, addr: Address) -> Result<(), MachineError> {
        if self.mode.is_privileged() {
            Ok(())
        } else {
            Err(MachineError::PrivilegeViolation(FaultEvent {
                kind: FaultKind::PrivilegeViolation,
                address: addr,
                access: Access::Write,
                mode: self.mode,
            }))
        }
    }

    /// Appends one MPU region, charging one region-configure cost.
    pub fn configure_mpu(&mut self, region: MpuRegion) -> Result<(), MachineError> {
        self.require_privileged_register(region.base)?;
        self.mpu.push(region)?;
        let cost = if self.time.t_mpu_max > self.time.t_mpu {
            self.timing_rng.gen_range(self.time.t_mpu..=self.time.t_mpu_max)
        } else {
            self.time.t_mpu
        };
        self.clock_us += u64::from(cost);
        Ok(())
    }

    /// Drops every MPU region. Uncharged: disabling regions is folded into
    /// the configure cost of the program that replaces them.
    pub fn clear_mpu(&mut self) -> Result<(), MachineError> {
        self.require_privileged_register(Address(0))?;
        self.mpu.clear();
        Ok(())
    }

    pub fn set_mpu_enabled(&mut self, enabled: bool) -> Result<(), MachineError> {
        self.require_privileged_register(Address(0))?;
        self.mpu.set_enabled(enabled);
        Ok(())
    }

    /// Supervisor call: unprivileged code traps into the handler, which
    /// returns to privileged thread mode on the main stack.
    pub fn svc_call(&mut self) {
        self.mode = PrivilegeMode::Handler;
        self.stacks.active = ActiveStack::MainStack;
        self.log(MachineEvent::Mode { mode: PrivilegeMode::Handler });
        self.mode = PrivilegeMode::Privileged;
        self.log(MachineEvent::Mode { mode: PrivilegeMode::Privileged });
        self.clock_us += u64::from(self.time.t_svc + self.time.t_switch);
    }

    /// Points PSP at an allocated pool region and lowers the execution level.
    pub fn drop_to_unprivileged(&mut self, psp: Address) -> Result<(), MachineError> {
        if self.mode != PrivilegeMode::Privileged {
            return Err(MachineError::NotPrivileged(self.mode));
        }
        if !self.pool.table().holds_stack_pointer(psp) {
            return Err(MachineError::InvalidStack(psp));
        }
        self.stacks.psp = psp;
        self.stacks.active = ActiveStack::ProcessStack;
        self.mode = PrivilegeMode::Unprivileged;
        self.log(MachineEvent::Mode { mode: PrivilegeMode::Unprivileged });
        self.clock_us += u64::from(self.time.t_switch + self.time.t_stack);
        Ok(())
    }

    /// RTOS context switch to another task's process stack. Its cost belongs
    /// to the baseline scheduler, so nothing is charged.
    pub fn retarget_psp(&mut self, psp: Address) -> Result<(), MachineError> {
        if !self.pool.table().holds_stack_pointer(psp) {
            return Err(MachineError::InvalidStack(psp));
        }
        self.stacks.psp = psp;
        Ok(())
    }

    /// Marks one task execution step in the event log.
    pub fn task_step(&mut self, task: &str) {
        if self.events.is_some() {
            let ev = MachineEvent::TaskStep { task: task.to_string(), mode: self.mode, stack: self.stacks.active };
            self.log(ev);
        }
    }

    pub fn read(&self, addr: Address, len: usize) -> Result<&[u8], MachineError> {
        self.map.read(addr, len).ok_or(MachineError::Unmapped(addr))
    }

    /// Unchecked store used by loaders and by state restoration.
    pub fn write_raw(&mut self, addr: Address, data: &[u8]) -> Result<Vec<u8>, MachineError> {
        self.map.write(addr, data).ok_or(MachineError::Unmapped(addr))
    }

    /// Permission-checked store in the current mode.
    pub fn store(&mut self, addr: Address, data: &[u8]) -> Result<Vec<u8>, MachineError> {
        if !self.map.is_mapped_range(addr, data.len() as u32) {
            return Err(MachineError::Unmapped(addr));
        }
        self.check_range(addr, data.len() as u32, Access::Write).map_err(MachineError::Fault)?;
        self.write_raw(addr, data)
    }

    /// Soft-timer store: permission checked and logged.
    pub fn store_timer(&mut self, addr: Address, data: &[u8]) -> Result<(), MachineError> {
        self.store(addr, data)?;
        self.log(MachineEvent::TimerWrite { mode: self.mode });
        Ok(())
    }

    /// SHA-256 over all mapped bytes, the execution level and the clock.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.map.hash_into(&mut hasher);
        hasher.update([self.mode as u8]);
        hasher.update(self.clock_us.to_le_bytes());
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> MemoryMap {
        MemoryMap::new(vec![
            Segment { name: "flash".into(), kind: SegmentKind::Code, base: Address(0x0800_0000), size: 0x1000 },
            Segment { name: "sram".into(), kind: SegmentKind::Data, base: Address(0x2000_0000), size: 0x1000 },
            Segment { name: "pool".into(), kind: SegmentKind::Pool, base: Address(0x2000_1000), size: 0x800 },
            Segment {
                name: "ppb".into(),
                kind: SegmentKind::PrivatePeripheral,
                base: Address(0xE000_E000),
                size: 0x1000,
            },
        ])
        .unwrap()
    }

    fn machine() -> Machine {
        Machine::new(layout(), TimeModel::default())
    }

    #[test]
    fn perms_parse_and_print() {
        assert_eq!("rw".parse::<Perms>().unwrap(), Perms::RW);
        assert_eq!("r-x".parse::<Perms>().unwrap(), Perms::RX);
        assert_eq!("".parse::<Perms>().unwrap(), Perms::NONE);
        assert!("rwz".parse::<Perms>().is_err());
        assert_eq!(Perms::RX.to_string(), "r-x");
    }

    #[test]
    fn layout_rejects_overlap_and_misalignment() {
        let seg = |name: &str, kind, base, size| Segment { name: name.into(), kind, base: Address(base), size };
        let err =
            MemoryMap::new(vec![seg("a", SegmentKind::Pool, 0x100, 0x100), seg("b", SegmentKind::Data, 0x1f8, 0x100)])
                .unwrap_err();
        assert_eq!(err, LayoutError::Overlap("a".into(), "b".into()));
        let err = MemoryMap::new(vec![seg("a", SegmentKind::Pool, 0x104, 0x100)]).unwrap_err();
        assert!(matches!(err, LayoutError::Misaligned { .. }));
        assert!(MemoryMap::new(vec![seg("a", SegmentKind::Data, 0, 8)]).is_err());
    }

    #[test]
    fn unprivileged_write_to_private_peripheral_faults() {
        let mut m = machine();
        m.mode = PrivilegeMode::Unprivileged;
        let nvic = Address(0xE000_E100);
        let fault = m.check_access(nvic, Access::Write).unwrap_err();
        assert_eq!(fault.kind, FaultKind::MpuFault);
        assert_eq!(fault.address, nvic);
        assert_eq!(fault.mode, PrivilegeMode::Unprivileged);
    }

    #[test]
    fn privileged_default_allows_everything() {
        let m = machine();
        for seg in m.map().segments() {
            for access in Access::ALL {
                assert!(m.check_access(seg.base, access).is_ok());
            }
        }
    }

    #[test]
    fn first_matching_region_wins() {
        let mut mpu = MpuConfig::default();
        mpu.push(MpuRegion::new("inner", Address(0x100), 0x10, Perms::RW, Perms::NONE)).unwrap();
        mpu.push(MpuRegion::new("outer", Address(0x000), 0x1000, Perms::RW, Perms::RW)).unwrap();
        assert!(!mpu.decide(PrivilegeMode::Unprivileged, Address(0x108), Access::Read));
        assert!(mpu.decide(PrivilegeMode::Unprivileged, Address(0x110), Access::Read));
    }

    #[test]
    fn disabled_mpu_allows_everything() {
        let mut mpu = MpuConfig::default();
        mpu.set_enabled(false);
        assert!(mpu.decide(PrivilegeMode::Unprivileged, Address(0xE000_E014), Access::Write));
    }

    #[test]
    fn configure_mpu_charges_and_guards() {
        let mut m = machine();
        let region = MpuRegion::new("r", Address(0x2000_0000), 0x100, Perms::RW, Perms::R);
        m.configure_mpu(region.clone()).unwrap();
        assert_eq!(m.clock_us(), 9);
        for _ in 1..MPU_CAPACITY {
            m.configure_mpu(region.clone()).unwrap();
        }
        assert_eq!(m.configure_mpu(region.clone()), Err(MachineError::CapacityExceeded { capacity: 16 }));
        assert_eq!(m.mpu().regions().len(), 16);

        let mut m = machine();
        m.mode = PrivilegeMode::Unprivileged;
        assert!(matches!(m.configure_mpu(region), Err(MachineError::PrivilegeViolation(_))));
        assert_eq!(m.clock_us(), 0);
    }

    #[test]
    fn jittered_mpu_cost_stays_in_range() {
        let time = TimeModel { t_mpu_max: 15, ..TimeModel::default() };
        let mut m = Machine::new(layout(), time);
        m.seed_timing(7);
        let mut last = 0;
        for _ in 0..16 {
            m.configure_mpu(MpuRegion::new("r", Address(0), 8, Perms::RW, Perms::RW)).unwrap();
            let cost = m.clock_us() - last;
            assert!((9..=15).contains(&cost));
            last = m.clock_us();
        }
    }

    #[test]
    fn svc_from_unprivileged_goes_through_handler() {
        let mut m = machine();
        m.enable_event_log();
        m.mode = PrivilegeMode::Unprivileged;
        m.stacks.active = ActiveStack::ProcessStack;
        m.svc_call();
        assert_eq!(m.mode(), PrivilegeMode::Privileged);
        assert_eq!(m.stacks().active, ActiveStack::MainStack);
        assert_eq!(m.clock_us(), 2);
        assert_eq!(
            m.events(),
            &[
                MachineEvent::Mode { mode: PrivilegeMode::Handler },
                MachineEvent::Mode { mode: PrivilegeMode::Privileged }
            ]
        );
        // Idempotent on mode, still charged.
        m.svc_call();
        assert_eq!(m.mode(), PrivilegeMode::Privileged);
        assert_eq!(m.clock_us(), 4);
    }

    #[test]
    fn drop_requires_allocated_stack() {
        let mut m = machine();
        let outside = Address(0x2000_0100);
        assert_eq!(m.drop_to_unprivileged(outside), Err(MachineError::InvalidStack(outside)));
        let region = m.pool_mut().reserve_at(Address(0x2000_1000), 0x400).unwrap();
        m.drop_to_unprivileged(region.stack_top()).unwrap();
        assert_eq!(m.mode(), PrivilegeMode::Unprivileged);
        assert_eq!(m.stacks().active, ActiveStack::ProcessStack);
        assert_eq!(m.stacks().psp, region.stack_top());
        assert_eq!(m.clock_us(), 11);
        assert_eq!(
            m.drop_to_unprivileged(region.stack_top()),
            Err(MachineError::NotPrivileged(PrivilegeMode::Unprivileged))
        );
    }

    #[test]
    fn privileged_only_datum_faults_after_drop() {
        let mut m = machine();
        let datum = Address(0x2000_0010);
        m.configure_mpu(MpuRegion::new("kernel", Address(0x2000_0000), 0x100, Perms::RW, Perms::NONE)).unwrap();
        assert!(m.store(datum, &[1, 2, 3, 4]).is_ok());
        let region = m.pool_mut().reserve_at(Address(0x2000_1000), 0x400).unwrap();
        m.drop_to_unprivileged(region.stack_top()).unwrap();
        let err = m.store(datum, &[9]).unwrap_err();
        assert!(matches!(err, MachineError::Fault(FaultEvent { kind: FaultKind::MpuFault, .. })));
        assert_eq!(m.read(datum, 1).unwrap(), &[1]);
    }

    #[test]
    fn digest_tracks_bytes_mode_and_clock() {
        let mut m = machine();
        let d0 = m.digest();
        let old = m.write_raw(Address(0x2000_0000), &[0xAA]).unwrap();
        assert_ne!(m.digest(), d0);
        m.write_raw(Address(0x2000_0000), &old).unwrap();
        assert_eq!(m.digest(), d0);
        m.advance(1);
        assert_ne!(m.digest(), d0);
    }
}

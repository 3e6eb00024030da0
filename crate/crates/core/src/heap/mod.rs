//! Device heap allocators with allocation tracking.
//!
//! Two allocators are provided behind one interface. The generic allocator
//! serves every agent from a single region; its allocation and free lists are
//! guarded by one lock, so concurrent use serializes. The balanced allocator
//! divides the heap into N x M chunks selected by `thread_id mod N` and
//! `team_id mod M`, one lock per chunk, with the first chunk of each team row
//! oversized by a configurable ratio for the initial thread. Entry metadata is
//! embedded in simulated memory and freed space is reclaimed by moving the
//! chunk watermark down over trailing dead entries.
//!
//! Both allocators keep a registry of live allocations so that an interior
//! address can be resolved back to its underlying object.

mod balanced;
mod generic;

use std::sync::Arc;

use thiserror::Error;

use crate::mem::{MemFault, SimAddress, SimMemory, SpaceKind};

pub use balanced::{ChunkGeometry, ENTRY_HEADER_SIZE, EntryHeader, FLAG_IN_USE};

pub const DEFAULT_ALIGNMENT: u64 = 16;
pub const DEFAULT_FIRST_CHUNK_RATIO: f64 = 4.0;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid allocator spec `{0}` (expected `generic` or `balanced:N,M[,ratio]`)")]
    Syntax(String),
    #[error("allocator parameter out of range: {0}")]
    Range(&'static str),
    #[error("heap too small: chunk unit would be {unit} bytes")]
    HeapTooSmall { unit: u64 },
}

/// Which allocator to instantiate, as selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AllocatorSpec {
    Generic,
    Balanced { n: u32, m: u32, ratio: f64 },
}

impl AllocatorSpec {
    /// Parses the config string grammar: `generic` | `balanced:N,M[,ratio]`.
    pub fn parse(s: &str) -> Result<AllocatorSpec, ConfigError> {
        let s = s.trim();
        if s == "generic" {
            return Ok(AllocatorSpec::Generic);
        }
        let Some(rest) = s.strip_prefix("balanced:") else {
            return Err(ConfigError::Syntax(s.to_string()));
        };
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(ConfigError::Syntax(s.to_string()));
        }
        let n: u32 = parts[0]
            .trim()
            .parse()
            .map_err(|_| ConfigError::Syntax(s.to_string()))?;
        let m: u32 = parts[1]
            .trim()
            .parse()
            .map_err(|_| ConfigError::Syntax(s.to_string()))?;
        let ratio: f64 = match parts.get(2) {
            Some(r) => r
                .trim()
                .parse()
                .map_err(|_| ConfigError::Syntax(s.to_string()))?,
            None => DEFAULT_FIRST_CHUNK_RATIO,
        };
        let spec = AllocatorSpec::Balanced { n, m, ratio };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let AllocatorSpec::Balanced { n, m, ratio } = *self {
            if n < 1 {
                return Err(ConfigError::Range("N must be >= 1"));
            }
            if m < 1 {
                return Err(ConfigError::Range("M must be >= 1"));
            }
            if !(ratio >= 1.0) || !ratio.is_finite() {
                return Err(ConfigError::Range("ratio must be >= 1"));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for AllocatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AllocatorSpec::Generic => write!(f, "generic"),
            AllocatorSpec::Balanced { n, m, ratio } => write!(f, "balanced:{n},{m},{ratio}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AllocatorConfig {
    pub spec: AllocatorSpec,
    pub heap_base: SimAddress,
    pub heap_size: u64,
    pub alignment: u64,
}

impl AllocatorConfig {
    pub fn new(spec: AllocatorSpec, heap_base: SimAddress, heap_size: u64) -> AllocatorConfig {
        AllocatorConfig {
            spec,
            heap_base,
            heap_size,
            alignment: DEFAULT_ALIGNMENT,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("out of memory: {requested} bytes requested from {region}")]
    OutOfMemory { requested: u64, region: Region },
    #[error("invalid free of {addr} (not the base of a live allocation)")]
    InvalidFree { addr: SimAddress },
    #[error("allocation size must be non-zero")]
    ZeroSize,
    #[error(transparent)]
    Fault(#[from] MemFault),
}

/// Identifies where an allocation failure occurred; the balanced allocator
/// can run out of memory in one chunk while others are mostly empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    GenericHeap,
    Chunk { n: u32, m: u32 },
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::GenericHeap => write!(f, "generic heap"),
            Region::Chunk { n, m } => write!(f, "chunk ({n},{m})"),
        }
    }
}

/// A live heap allocation found by interior-address lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeapObject {
    pub base: SimAddress,
    pub size: u64,
}

/// Selects the chunk an agent allocates from: `(thread_id mod N, team_id mod M)`.
pub fn chunk_index(thread_id: u32, team_id: u32, n: u32, m: u32) -> (u32, u32) {
    (thread_id % n, team_id % m)
}

enum Inner {
    Generic(generic::GenericHeap),
    Balanced(balanced::BalancedHeap),
}

/// The device heap. Thread-safe; clones of the `Arc` may allocate from any
/// agent concurrently.
pub struct DeviceHeap {
    mem: Arc<SimMemory>,
    config: AllocatorConfig,
    inner: Inner,
}

impl DeviceHeap {
    pub fn new(mem: Arc<SimMemory>, config: AllocatorConfig) -> Result<DeviceHeap, ConfigError> {
        config.spec.validate()?;
        assert_eq!(
            config.heap_base.space,
            SpaceKind::Device,
            "heap must live in the device space"
        );
        let inner = match config.spec {
            AllocatorSpec::Generic => Inner::Generic(generic::GenericHeap::new(&config)),
            AllocatorSpec::Balanced { n, m, ratio } => {
                Inner::Balanced(balanced::BalancedHeap::new(&config, n, m, ratio)?)
            }
        };
        Ok(DeviceHeap {
            mem,
            config,
            inner,
        })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn geometry(&self) -> Option<&ChunkGeometry> {
        match &self.inner {
            Inner::Balanced(b) => Some(b.geometry()),
            Inner::Generic(_) => None,
        }
    }

    /// Allocates `size` bytes of user data, aligned to the configured
    /// alignment and zero-filled. The generic allocator ignores the ids.
    pub fn allocate(
        &self,
        thread_id: u32,
        team_id: u32,
        size: u64,
    ) -> Result<SimAddress, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let base = match &self.inner {
            Inner::Generic(g) => g.allocate(size)?,
            Inner::Balanced(b) => b.allocate(&self.mem, thread_id, team_id, size)?,
        };
        let addr = self.config.heap_base.add(base);
        // Deterministic contents regardless of prior occupants.
        self.mem.fill_zero(addr, size)?;
        Ok(addr)
    }

    /// Frees a live allocation. `addr` must be the base returned by
    /// [`allocate`](Self::allocate); anything else (including a second free)
    /// is an invalid-free error.
    pub fn deallocate(&self, addr: SimAddress) -> Result<(), AllocError> {
        if addr.space != SpaceKind::Device || addr.offset < self.config.heap_base.offset {
            return Err(AllocError::InvalidFree { addr });
        }
        let rel = addr.offset - self.config.heap_base.offset;
        if rel >= self.config.heap_size {
            return Err(AllocError::InvalidFree { addr });
        }
        match &self.inner {
            Inner::Generic(g) => g.deallocate(rel).map_err(|_| AllocError::InvalidFree { addr }),
            Inner::Balanced(b) => b
                .deallocate(&self.mem, rel)
                .map_err(|_| AllocError::InvalidFree { addr }),
        }
    }

    /// Interior-address lookup over live allocations.
    pub fn find_object(&self, addr: SimAddress) -> Option<HeapObject> {
        if addr.space != SpaceKind::Device || addr.offset < self.config.heap_base.offset {
            return None;
        }
        let rel = addr.offset - self.config.heap_base.offset;
        if rel >= self.config.heap_size {
            return None;
        }
        let (base, size) = match &self.inner {
            Inner::Generic(g) => g.find(rel)?,
            Inner::Balanced(b) => b.find(rel)?,
        };
        Some(HeapObject {
            base: self.config.heap_base.add(base),
            size,
        })
    }

    /// Snapshot of all live `(base offset, size)` pairs, sorted by base.
    /// Offsets are relative to the heap base.
    pub fn live_objects(&self) -> Vec<(u64, u64)> {
        let mut v = match &self.inner {
            Inner::Generic(g) => g.live_objects(),
            Inner::Balanced(b) => b.live_objects(),
        };
        v.sort_unstable();
        v
    }

    /// Current watermark of the chunk holding `(n, m)`, relative to the
    /// chunk base. Panics for the generic allocator.
    pub fn chunk_top(&self, n: u32, m: u32) -> u64 {
        match &self.inner {
            Inner::Balanced(b) => b.chunk_top(n, m),
            Inner::Generic(_) => panic!("generic allocator has no chunks"),
        }
    }

    /// Walks the embedded header chain of chunk `(n, m)` from its watermark
    /// down, returning `(user_base, user_size, in_use)` per entry.
    pub fn walk_chunk(&self, n: u32, m: u32) -> Result<Vec<(u64, u64, bool)>, MemFault> {
        match &self.inner {
            Inner::Balanced(b) => b.walk_chunk(&self.mem, n, m),
            Inner::Generic(_) => panic!("generic allocator has no chunks"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::SimMemoryConfig;

    fn mem() -> Arc<SimMemory> {
        Arc::new(SimMemory::new(&SimMemoryConfig {
            device_capacity: 1 << 20,
            host_capacity: 4096,
            shared_capacity: 1024,
            device_static_limit: Some(4096),
        }))
    }

    fn heap(spec: AllocatorSpec) -> DeviceHeap {
        let cfg = AllocatorConfig::new(spec, SimAddress::device(4096), (1 << 20) - 4096);
        DeviceHeap::new(mem(), cfg).unwrap()
    }

    #[test]
    fn parse_allocator_specs() {
        assert_eq!(AllocatorSpec::parse("generic").unwrap(), AllocatorSpec::Generic);
        assert_eq!(
            AllocatorSpec::parse("balanced:32,16").unwrap(),
            AllocatorSpec::Balanced { n: 32, m: 16, ratio: 4.0 }
        );
        assert_eq!(
            AllocatorSpec::parse("balanced:8,2,1.5").unwrap(),
            AllocatorSpec::Balanced { n: 8, m: 2, ratio: 1.5 }
        );
        assert!(AllocatorSpec::parse("balanced:0,4").is_err());
        assert!(AllocatorSpec::parse("balanced:4").is_err());
        assert!(AllocatorSpec::parse("arena").is_err());
        assert!(AllocatorSpec::parse("balanced:4,4,0.5").is_err());
    }

    #[test]
    fn chunk_index_modulo() {
        assert_eq!(chunk_index(37, 3, 32, 16), (5, 3));
        assert_eq!(chunk_index(0, 0, 32, 16), (0, 0));
        assert_eq!(chunk_index(32, 16, 32, 16), (0, 0));
    }

    #[test]
    fn bump_allocations_ascend() {
        for spec in [AllocatorSpec::Generic, AllocatorSpec::Balanced { n: 2, m: 2, ratio: 1.0 }] {
            let h = heap(spec);
            let a = h.allocate(0, 0, 32).unwrap();
            let b = h.allocate(0, 0, 16).unwrap();
            assert!(b.offset >= a.offset + 32);
            assert_eq!(a.offset % DEFAULT_ALIGNMENT, 0);
            assert_eq!(b.offset % DEFAULT_ALIGNMENT, 0);
        }
    }

    #[test]
    fn oversized_allocation_fails() {
        let h = heap(AllocatorSpec::Balanced { n: 4, m: 4, ratio: 2.0 });
        let err = h.allocate(1, 0, 1 << 20).unwrap_err();
        assert!(matches!(err, AllocError::OutOfMemory { .. }));
        let g = heap(AllocatorSpec::Generic);
        assert!(g.allocate(0, 0, 2 << 20).is_err());
    }

    #[test]
    fn double_free_rejected() {
        for spec in [AllocatorSpec::Generic, AllocatorSpec::Balanced { n: 2, m: 2, ratio: 1.0 }] {
            let h = heap(spec);
            let a = h.allocate(0, 0, 64).unwrap();
            h.deallocate(a).unwrap();
            assert!(matches!(h.deallocate(a), Err(AllocError::InvalidFree { .. })));
            // Interior address is not a valid free either.
            let b = h.allocate(0, 0, 64).unwrap();
            assert!(matches!(h.deallocate(b.add(8)), Err(AllocError::InvalidFree { .. })));
        }
    }

    #[test]
    fn dead_entry_reused_when_chunk_full() {
        // Chunk sized so exactly three 64-byte entries fit: after freeing the
        // middle one, a fourth allocation must reuse its slot via traversal.
        let m = mem();
        let entry = 64 + ENTRY_HEADER_SIZE; // user + header, both 16-aligned
        let cfg = AllocatorConfig::new(
            AllocatorSpec::Balanced { n: 1, m: 1, ratio: 1.0 },
            SimAddress::device(4096),
            3 * entry,
        );
        let h = DeviceHeap::new(m, cfg).unwrap();
        let a = h.allocate(0, 0, 64).unwrap();
        let b = h.allocate(0, 0, 64).unwrap();
        let c = h.allocate(0, 0, 64).unwrap();
        assert!(h.allocate(0, 0, 64).is_err());
        h.deallocate(b).unwrap();
        let d = h.allocate(0, 0, 48).unwrap();
        assert_eq!(d, b, "reuse must keep the slot base");
        let _ = (a, c);
    }

    #[test]
    fn find_object_interior() {
        let h = heap(AllocatorSpec::Balanced { n: 2, m: 2, ratio: 1.0 });
        let base = h.allocate(1, 1, 64).unwrap();
        let hit = h.find_object(base.add(12)).unwrap();
        assert_eq!(hit.base, base);
        assert_eq!(hit.size, 64);
        h.deallocate(base).unwrap();
        assert!(h.find_object(base.add(12)).is_none());
        assert!(h.find_object(SimAddress::host(base.offset)).is_none());
    }

    #[test]
    fn chunks_do_not_block_each_other() {
        use std::sync::atomic::{AtomicBool, Ordering};
        let h = Arc::new(heap(AllocatorSpec::Balanced { n: 4, m: 1, ratio: 1.0 }));
        let stop = Arc::new(AtomicBool::new(false));
        let mut handles = Vec::new();
        for tid in 0..4u32 {
            let h = Arc::clone(&h);
            let stop = Arc::clone(&stop);
            handles.push(std::thread::spawn(move || {
                let mut bases = Vec::new();
                while !stop.load(Ordering::Relaxed) {
                    let a = h.allocate(tid, 0, 48).unwrap();
                    bases.push(a.offset);
                    h.deallocate(a).unwrap();
                }
                bases
            }));
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
        stop.store(true, Ordering::Relaxed);
        let per_thread: Vec<Vec<u64>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        // Each thread stayed inside its own chunk; ranges never interleave.
        let geo = h.geometry().unwrap().clone();
        for (tid, bases) in per_thread.iter().enumerate() {
            assert!(!bases.is_empty());
            let (lo, len) = geo.chunk_range(tid as u32, 0);
            for b in bases {
                let rel = b - 4096;
                assert!(rel >= lo && rel < lo + len, "escaped its chunk");
            }
        }
    }
}

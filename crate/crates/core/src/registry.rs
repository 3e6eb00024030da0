//! Underlying-object lookup across every device-side allocation source.
//!
//! Dynamic RPC argument resolution needs to answer "which object does this
//! pointer address, and at what offset" for heap allocations, statically
//! placed objects, and simulated stack slots. Lookups consult the heap
//! registry first, then statics, then the stack.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::heap::DeviceHeap;
use crate::mem::{MemFault, SimAddress, SimMemory, SpaceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectOrigin {
    Heap,
    Static,
    Stack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectInfo {
    pub base: SimAddress,
    pub size: u64,
    pub offset: u64,
    pub origin: ObjectOrigin,
}

/// Bump-allocated simulated stack with frame rollback, maintained by the
/// interpreter for alloca-style slots.
pub struct StackRegistry {
    base: u64,
    size: u64,
    inner: Mutex<StackState>,
}

struct StackState {
    cursor: u64,
    slots: BTreeMap<u64, u64>,
}

/// Position to rewind to when a frame is popped.
#[derive(Clone, Copy, Debug)]
pub struct FrameMark(u64);

impl StackRegistry {
    pub fn new(base: SimAddress, size: u64) -> StackRegistry {
        assert_eq!(base.space, SpaceKind::Device);
        StackRegistry {
            base: base.offset,
            size,
            inner: Mutex::new(StackState { cursor: 0, slots: BTreeMap::new() }),
        }
    }

    pub fn push_frame(&self) -> FrameMark {
        FrameMark(self.inner.lock().unwrap().cursor)
    }

    pub fn allocate(&self, size: u64) -> Result<SimAddress, MemFault> {
        let mut st = self.inner.lock().unwrap();
        let off = st.cursor.next_multiple_of(16);
        if off + size > self.size {
            return Err(MemFault::OutOfMemory {
                space: SpaceKind::Device,
                requested: size,
            });
        }
        st.cursor = off + size;
        st.slots.insert(off, size);
        Ok(SimAddress::device(self.base + off))
    }

    pub fn pop_frame(&self, mark: FrameMark) {
        let mut st = self.inner.lock().unwrap();
        st.slots.retain(|&off, _| off < mark.0);
        st.cursor = mark.0;
    }

    fn lookup(&self, offset: u64) -> Option<(u64, u64)> {
        if offset < self.base || offset >= self.base + self.size {
            return None;
        }
        let rel = offset - self.base;
        let st = self.inner.lock().unwrap();
        let (slot, size) = st.slots.range(..=rel).next_back()?;
        (rel < slot + size).then_some((self.base + slot, *size))
    }
}

/// All device-side object sources, in lookup order.
pub struct DeviceRegistry {
    mem: Arc<SimMemory>,
    heap: Arc<DeviceHeap>,
    stack: Arc<StackRegistry>,
}

impl DeviceRegistry {
    pub fn new(
        mem: Arc<SimMemory>,
        heap: Arc<DeviceHeap>,
        stack: Arc<StackRegistry>,
    ) -> DeviceRegistry {
        DeviceRegistry { mem, heap, stack }
    }

    /// Resolves an address to its underlying live object. Only device
    /// addresses resolve; anything else is treated as not found (a host
    /// pointer is assumed to already be host-accessible downstream).
    pub fn find_object(&self, addr: SimAddress) -> Option<ObjectInfo> {
        if addr.space != SpaceKind::Device {
            return None;
        }
        if let Some(hit) = self.heap.find_object(addr) {
            return Some(ObjectInfo {
                base: hit.base,
                size: hit.size,
                offset: addr.offset - hit.base.offset,
                origin: ObjectOrigin::Heap,
            });
        }
        if let Some(obj) = self.mem.find_static(SpaceKind::Device, addr.offset) {
            return Some(ObjectInfo {
                base: SimAddress::device(obj.base),
                size: obj.size,
                offset: addr.offset - obj.base,
                origin: ObjectOrigin::Static,
            });
        }
        if let Some((base, size)) = self.stack.lookup(addr.offset) {
            return Some(ObjectInfo {
                base: SimAddress::device(base),
                size,
                offset: addr.offset - base,
                origin: ObjectOrigin::Stack,
            });
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::{AllocatorConfig, AllocatorSpec};
    use crate::mem::SimMemoryConfig;

    fn setup() -> (Arc<SimMemory>, DeviceRegistry, Arc<DeviceHeap>, Arc<StackRegistry>) {
        let mem = Arc::new(SimMemory::new(&SimMemoryConfig {
            device_capacity: 1 << 20,
            host_capacity: 1024,
            shared_capacity: 1024,
            device_static_limit: Some(1 << 16),
        }));
        let heap = Arc::new(
            DeviceHeap::new(
                Arc::clone(&mem),
                AllocatorConfig::new(
                    AllocatorSpec::Generic,
                    SimAddress::device(1 << 19),
                    1 << 19,
                ),
            )
            .unwrap(),
        );
        let stack = Arc::new(StackRegistry::new(SimAddress::device(1 << 16), 1 << 16));
        let reg = DeviceRegistry::new(Arc::clone(&mem), Arc::clone(&heap), Arc::clone(&stack));
        (mem, reg, heap, stack)
    }

    #[test]
    fn lookup_order_and_origins() {
        let (mem, reg, heap, stack) = setup();
        let s = mem.place_static(SpaceKind::Device, &[0; 24], false).unwrap();
        let h = heap.allocate(0, 0, 64).unwrap();
        let k = stack.allocate(8).unwrap();

        let hit = reg.find_object(h.add(12)).unwrap();
        assert_eq!((hit.base, hit.size, hit.offset, hit.origin), (h, 64, 12, ObjectOrigin::Heap));
        let hit = reg.find_object(s.add(3)).unwrap();
        assert_eq!((hit.base, hit.offset, hit.origin), (s, 3, ObjectOrigin::Static));
        let hit = reg.find_object(k).unwrap();
        assert_eq!((hit.base, hit.size, hit.origin), (k, 8, ObjectOrigin::Stack));
    }

    #[test]
    fn misses() {
        let (_mem, reg, heap, stack) = setup();
        let h = heap.allocate(0, 0, 64).unwrap();
        heap.deallocate(h).unwrap();
        assert!(reg.find_object(h).is_none(), "dead heap entry must miss");
        assert!(reg.find_object(SimAddress::host(64)).is_none(), "host address must miss");

        let mark = stack.push_frame();
        let k = stack.allocate(16).unwrap();
        stack.pop_frame(mark);
        assert!(reg.find_object(k).is_none(), "popped stack slot must miss");
    }
}

//! The generic single-region allocator: one allocation list, one free list,
//! one lock. Every agent may use the whole heap, at the cost of serializing
//! all allocator traffic.

use std::collections::BTreeMap;
use std::sync::Mutex;

use super::{AllocError, AllocatorConfig, Region};

#[derive(Clone, Copy)]
struct FreeBlock {
    base: u64,
    capacity: u64,
}

#[derive(Clone, Copy)]
struct LiveEntry {
    size: u64,
    capacity: u64,
}

struct State {
    cursor: u64,
    free: Vec<FreeBlock>,
    live: BTreeMap<u64, LiveEntry>,
}

pub struct GenericHeap {
    heap_size: u64,
    alignment: u64,
    state: Mutex<State>,
}

impl GenericHeap {
    pub fn new(config: &AllocatorConfig) -> GenericHeap {
        GenericHeap {
            heap_size: config.heap_size,
            alignment: config.alignment,
            state: Mutex::new(State {
                cursor: 0,
                free: Vec::new(),
                live: BTreeMap::new(),
            }),
        }
    }

    /// Returns the heap-relative user base. First fit over the free list in
    /// the order blocks were freed; freed blocks are reused whole, never
    /// split. Falls back to bumping fresh space.
    pub fn allocate(&self, size: u64) -> Result<u64, AllocError> {
        let mut st = self.state.lock().unwrap();
        if let Some(i) = st.free.iter().position(|b| b.capacity >= size) {
            let block = st.free.remove(i);
            st.live.insert(block.base, LiveEntry { size, capacity: block.capacity });
            return Ok(block.base);
        }
        let base = st.cursor.next_multiple_of(self.alignment);
        let end = base.checked_add(size);
        match end {
            Some(end) if end <= self.heap_size => {
                st.cursor = end;
                st.live.insert(
                    base,
                    LiveEntry { size, capacity: size.next_multiple_of(self.alignment) },
                );
                Ok(base)
            }
            _ => Err(AllocError::OutOfMemory {
                requested: size,
                region: Region::GenericHeap,
            }),
        }
    }

    pub fn deallocate(&self, rel: u64) -> Result<(), ()> {
        let mut st = self.state.lock().unwrap();
        let entry = st.live.remove(&rel).ok_or(())?;
        st.free.push(FreeBlock { base: rel, capacity: entry.capacity });
        Ok(())
    }

    pub fn find(&self, rel: u64) -> Option<(u64, u64)> {
        let st = self.state.lock().unwrap();
        let (base, entry) = st.live.range(..=rel).next_back()?;
        (rel < base + entry.size).then_some((*base, entry.size))
    }

    pub fn live_objects(&self) -> Vec<(u64, u64)> {
        let st = self.state.lock().unwrap();
        st.live.iter().map(|(b, e)| (*b, e.size)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::AllocatorSpec;
    use crate::mem::SimAddress;

    fn heap(size: u64) -> GenericHeap {
        GenericHeap::new(&AllocatorConfig::new(
            AllocatorSpec::Generic,
            SimAddress::device(0),
            size,
        ))
    }

    #[test]
    fn freed_block_is_reused_first_fit() {
        let h = heap(4096);
        let a = h.allocate(100).unwrap();
        let b = h.allocate(50).unwrap();
        h.deallocate(a).unwrap();
        h.deallocate(b).unwrap();
        // First fit scans in free order: the 100-byte block comes first and
        // fits a 30-byte request even though b would too.
        assert_eq!(h.allocate(30).unwrap(), a);
        assert_eq!(h.allocate(50).unwrap(), b);
    }

    #[test]
    fn exhaustion_reports_generic_region() {
        let h = heap(128);
        h.allocate(100).unwrap();
        match h.allocate(100) {
            Err(AllocError::OutOfMemory { region, .. }) => {
                assert_eq!(region, Region::GenericHeap)
            }
            other => panic!("expected OOM, got {other:?}"),
        }
    }
}

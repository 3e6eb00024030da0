//! Simulated byte-addressable memory: two disjoint device/host arenas plus a
//! small shared mailbox region.
//!
//! Every pointer of a simulated program is a [`SimAddress`], a (space, offset)
//! pair; a raw device offset is meaningless in the host space and vice versa.
//! Arenas are backed by atomic words so that independent execution agents can
//! read and write disjoint byte ranges without data races. A 4-byte flag cell
//! with acquire/release semantics is provided for cross-agent notification,
//! and a fetch-add cell for explicit read-modify-write communication.
//!
//! Faults (out-of-bounds access, writes to constant objects) are recoverable
//! error values, never process crashes; the simulator keeps running to
//! report them.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

pub const DEFAULT_DEVICE_CAPACITY: u64 = 64 << 20;
pub const DEFAULT_HOST_CAPACITY: u64 = 64 << 20;
pub const DEFAULT_SHARED_CAPACITY: u64 = 64 << 10;

/// Alignment used for statically placed objects.
pub const STATIC_ALIGN: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpaceKind {
    Device,
    Host,
    Shared,
}

impl SpaceKind {
    fn tag(self) -> u8 {
        match self {
            SpaceKind::Device => 0x44,
            SpaceKind::Host => 0x48,
            SpaceKind::Shared => 0x53,
        }
    }

    fn from_tag(tag: u8) -> Option<SpaceKind> {
        match tag {
            0x44 => Some(SpaceKind::Device),
            0x48 => Some(SpaceKind::Host),
            0x53 => Some(SpaceKind::Shared),
            _ => None,
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceKind::Device => write!(f, "dev"),
            SpaceKind::Host => write!(f, "host"),
            SpaceKind::Shared => write!(f, "shared"),
        }
    }
}

/// Address within one simulated space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SimAddress {
    pub space: SpaceKind,
    pub offset: u64,
}

impl SimAddress {
    pub fn new(space: SpaceKind, offset: u64) -> SimAddress {
        SimAddress { space, offset }
    }

    pub fn device(offset: u64) -> SimAddress {
        SimAddress::new(SpaceKind::Device, offset)
    }

    pub fn host(offset: u64) -> SimAddress {
        SimAddress::new(SpaceKind::Host, offset)
    }

    pub fn shared(offset: u64) -> SimAddress {
        SimAddress::new(SpaceKind::Shared, offset)
    }

    pub fn add(self, bytes: u64) -> SimAddress {
        SimAddress::new(self.space, self.offset + bytes)
    }

    /// Packs the address into the 8-byte form simulated programs store in
    /// memory: space tag in the top byte, offset in the low 56 bits. The
    /// tags are non-zero so that small integers never decode as addresses.
    pub fn encode(self) -> u64 {
        ((self.space.tag() as u64) << 56) | (self.offset & 0x00ff_ffff_ffff_ffff)
    }

    pub fn decode(bits: u64) -> Option<SimAddress> {
        let space = SpaceKind::from_tag((bits >> 56) as u8)?;
        Some(SimAddress::new(space, bits & 0x00ff_ffff_ffff_ffff))
    }
}

impl fmt::Display for SimAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{:#x}", self.space, self.offset)
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum MemFault {
    #[error("access of {len} bytes at {addr} is out of bounds")]
    OutOfBounds { addr: SimAddress, len: u64 },
    #[error("write into constant object at {addr}")]
    ConstWrite { addr: SimAddress },
    #[error("out of memory in {space} space ({requested} bytes requested)")]
    OutOfMemory { space: SpaceKind, requested: u64 },
    #[error("address {addr} outside translation range")]
    TranslationMiss { addr: SimAddress },
    #[error("atomic access at {addr} must be {required}-byte aligned")]
    Misaligned { addr: SimAddress, required: u64 },
}

/// Maps addresses inside one object to the corresponding addresses in a
/// migrated copy, preserving the offset into the object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Translation {
    pub source_base: SimAddress,
    pub dest_base: SimAddress,
    pub length: u64,
}

impl Translation {
    pub fn translate(&self, addr: SimAddress) -> Result<SimAddress, MemFault> {
        if addr.space != self.source_base.space
            || addr.offset < self.source_base.offset
            || addr.offset >= self.source_base.offset + self.length
        {
            return Err(MemFault::TranslationMiss { addr });
        }
        Ok(self.dest_base.add(addr.offset - self.source_base.offset))
    }
}

/// A statically placed object (global or constant data).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticObject {
    pub base: u64,
    pub size: u64,
    pub constant: bool,
}

#[derive(Clone, Debug)]
pub struct SimMemoryConfig {
    pub device_capacity: u64,
    pub host_capacity: u64,
    pub shared_capacity: u64,
    /// Statically placed objects must stay below this device offset, so the
    /// runtime can reserve the upper part of the space for stack and heap.
    pub device_static_limit: Option<u64>,
}

impl Default for SimMemoryConfig {
    fn default() -> Self {
        SimMemoryConfig {
            device_capacity: DEFAULT_DEVICE_CAPACITY,
            host_capacity: DEFAULT_HOST_CAPACITY,
            shared_capacity: DEFAULT_SHARED_CAPACITY,
            device_static_limit: None,
        }
    }
}

struct Space {
    kind: SpaceKind,
    capacity: u64,
    words: Vec<AtomicU64>,
    static_limit: u64,
    statics: Mutex<StaticTable>,
}

#[derive(Default)]
struct StaticTable {
    next: u64,
    // Sorted by base; placement is bump-only so pushes keep the order.
    objects: Vec<StaticObject>,
}

impl Space {
    fn new(kind: SpaceKind, capacity: u64, static_limit: u64) -> Space {
        let words = (capacity as usize).div_ceil(8);
        let mut v = Vec::with_capacity(words);
        v.resize_with(words, || AtomicU64::new(0));
        Space {
            kind,
            capacity,
            words: v,
            static_limit,
            statics: Mutex::new(StaticTable::default()),
        }
    }

    fn check(&self, offset: u64, len: u64) -> Result<(), MemFault> {
        if offset.checked_add(len).map_or(true, |end| end > self.capacity) {
            return Err(MemFault::OutOfBounds {
                addr: SimAddress::new(self.kind, offset),
                len,
            });
        }
        Ok(())
    }

    fn check_write(&self, offset: u64, len: u64) -> Result<(), MemFault> {
        self.check(offset, len)?;
        let end = offset + len;
        let table = self.statics.lock().unwrap();
        // Rightmost object starting at or below the write; constant objects
        // are rare enough that a binary search over all statics suffices.
        let idx = table.objects.partition_point(|o| o.base < end);
        for obj in table.objects[..idx].iter().rev() {
            if obj.base + obj.size <= offset {
                break;
            }
            if obj.constant {
                return Err(MemFault::ConstWrite {
                    addr: SimAddress::new(self.kind, offset),
                });
            }
        }
        Ok(())
    }

    /// Splices `bits` into the word at `widx` under `mask`, preserving the
    /// other bytes. A compare-exchange loop so that concurrent writers to
    /// different bytes of the same word never lose updates.
    fn splice(&self, widx: usize, mask: u64, bits: u64, success: Ordering) {
        let word = &self.words[widx];
        let mut cur = word.load(Ordering::Relaxed);
        loop {
            let new = (cur & !mask) | (bits & mask);
            match word.compare_exchange_weak(cur, new, success, Ordering::Relaxed) {
                Ok(_) => return,
                Err(seen) => cur = seen,
            }
        }
    }

    fn read_range(&self, offset: u64, out: &mut [u8]) {
        let mut pos = offset as usize;
        let mut idx = 0usize;
        while idx < out.len() {
            let widx = pos / 8;
            let in_word = pos % 8;
            let take = (8 - in_word).min(out.len() - idx);
            let word = self.words[widx].load(Ordering::Relaxed);
            let bytes = word.to_le_bytes();
            out[idx..idx + take].copy_from_slice(&bytes[in_word..in_word + take]);
            pos += take;
            idx += take;
        }
    }

    fn write_range(&self, offset: u64, data: &[u8]) {
        let mut pos = offset as usize;
        let mut idx = 0usize;
        while idx < data.len() {
            let widx = pos / 8;
            let in_word = pos % 8;
            let take = (8 - in_word).min(data.len() - idx);
            let mut bytes = [0u8; 8];
            bytes[in_word..in_word + take].copy_from_slice(&data[idx..idx + take]);
            let bits = u64::from_le_bytes(bytes);
            if take == 8 {
                self.words[widx].store(bits, Ordering::Relaxed);
            } else {
                let mut mask = [0u8; 8];
                mask[in_word..in_word + take].fill(0xff);
                self.splice(widx, u64::from_le_bytes(mask), bits, Ordering::Relaxed);
            }
            pos += take;
            idx += take;
        }
    }

    fn u32_cell(&self, offset: u64) -> Result<(usize, u32), MemFault> {
        self.check(offset, 4)?;
        if offset % 4 != 0 {
            return Err(MemFault::Misaligned {
                addr: SimAddress::new(self.kind, offset),
                required: 4,
            });
        }
        Ok(((offset / 8) as usize, ((offset % 8) * 8) as u32))
    }
}

/// The simulated memory system: device, host, and shared spaces.
pub struct SimMemory {
    device: Space,
    host: Space,
    shared: Space,
}

impl SimMemory {
    pub fn new(config: &SimMemoryConfig) -> SimMemory {
        let dev_limit = config
            .device_static_limit
            .unwrap_or(config.device_capacity)
            .min(config.device_capacity);
        SimMemory {
            device: Space::new(SpaceKind::Device, config.device_capacity, dev_limit),
            host: Space::new(SpaceKind::Host, config.host_capacity, config.host_capacity),
            shared: Space::new(
                SpaceKind::Shared,
                config.shared_capacity,
                config.shared_capacity,
            ),
        }
    }

    fn space(&self, kind: SpaceKind) -> &Space {
        match kind {
            SpaceKind::Device => &self.device,
            SpaceKind::Host => &self.host,
            SpaceKind::Shared => &self.shared,
        }
    }

    pub fn capacity(&self, kind: SpaceKind) -> u64 {
        self.space(kind).capacity
    }

    /// Copies `bytes` into the space's static region and records the object.
    pub fn place_static(
        &self,
        kind: SpaceKind,
        bytes: &[u8],
        constant: bool,
    ) -> Result<SimAddress, MemFault> {
        self.place_static_sized(kind, bytes, bytes.len() as u64, constant)
    }

    /// Like [`place_static`](Self::place_static) but reserves `size` bytes,
    /// zero-filling past the initializer.
    pub fn place_static_sized(
        &self,
        kind: SpaceKind,
        init: &[u8],
        size: u64,
        constant: bool,
    ) -> Result<SimAddress, MemFault> {
        assert!(init.len() as u64 <= size, "initializer larger than object");
        let space = self.space(kind);
        let mut table = space.statics.lock().unwrap();
        let base = table.next.next_multiple_of(STATIC_ALIGN);
        let end = base.checked_add(size);
        if end.map_or(true, |e| e > space.static_limit) {
            return Err(MemFault::OutOfMemory {
                space: kind,
                requested: size,
            });
        }
        // Write the initializer before publishing the record; constness is
        // enforced only for writes that come later through write_bytes.
        space.write_range(base, init);
        table.next = base + size;
        table.objects.push(StaticObject {
            base,
            size,
            constant,
        });
        Ok(SimAddress::new(kind, base))
    }

    /// Interior lookup over the static-object registry of `kind`.
    pub fn find_static(&self, kind: SpaceKind, offset: u64) -> Option<StaticObject> {
        let table = self.space(kind).statics.lock().unwrap();
        let idx = table.objects.partition_point(|o| o.base <= offset);
        let obj = table.objects[..idx].last()?;
        (offset < obj.base + obj.size).then(|| obj.clone())
    }

    pub fn statics(&self, kind: SpaceKind) -> Vec<StaticObject> {
        self.space(kind).statics.lock().unwrap().objects.clone()
    }

    pub fn read_bytes(&self, addr: SimAddress, len: u64) -> Result<Vec<u8>, MemFault> {
        let mut out = vec![0u8; len as usize];
        self.read_into(addr, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, addr: SimAddress, out: &mut [u8]) -> Result<(), MemFault> {
        let space = self.space(addr.space);
        space.check(addr.offset, out.len() as u64)?;
        space.read_range(addr.offset, out);
        Ok(())
    }

    pub fn write_bytes(&self, addr: SimAddress, data: &[u8]) -> Result<(), MemFault> {
        let space = self.space(addr.space);
        space.check_write(addr.offset, data.len() as u64)?;
        space.write_range(addr.offset, data);
        Ok(())
    }

    /// Byte copy between (possibly different) spaces.
    pub fn copy(&self, src: SimAddress, dst: SimAddress, len: u64) -> Result<(), MemFault> {
        let buf = self.read_bytes(src, len)?;
        self.write_bytes(dst, &buf)
    }

    /// Zero-fills a range, honoring constness like a write.
    pub fn fill_zero(&self, addr: SimAddress, len: u64) -> Result<(), MemFault> {
        let space = self.space(addr.space);
        space.check_write(addr.offset, len)?;
        // Chunked so large fills do not allocate large temporaries.
        let zeros = [0u8; 256];
        let mut off = addr.offset;
        let mut remaining = len;
        while remaining > 0 {
            let take = remaining.min(zeros.len() as u64);
            space.write_range(off, &zeros[..take as usize]);
            off += take;
            remaining -= take;
        }
        Ok(())
    }

    pub fn read_u8(&self, addr: SimAddress) -> Result<u8, MemFault> {
        let mut b = [0u8; 1];
        self.read_into(addr, &mut b)?;
        Ok(b[0])
    }

    pub fn read_u32(&self, addr: SimAddress) -> Result<u32, MemFault> {
        let mut b = [0u8; 4];
        self.read_into(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&self, addr: SimAddress) -> Result<u64, MemFault> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f32(&self, addr: SimAddress) -> Result<f32, MemFault> {
        Ok(f32::from_bits(self.read_u32(addr)?))
    }

    pub fn write_u32(&self, addr: SimAddress, value: u32) -> Result<(), MemFault> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    pub fn write_u64(&self, addr: SimAddress, value: u64) -> Result<(), MemFault> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    pub fn write_f32(&self, addr: SimAddress, value: f32) -> Result<(), MemFault> {
        self.write_u32(addr, value.to_bits())
    }

    /// Acquire-load of a 4-byte notification flag cell.
    pub fn flag_load(&self, addr: SimAddress) -> Result<u32, MemFault> {
        let space = self.space(addr.space);
        let (widx, shift) = space.u32_cell(addr.offset)?;
        Ok((space.words[widx].load(Ordering::Acquire) >> shift) as u32)
    }

    /// Release-store of a 4-byte notification flag cell. All plain writes
    /// performed before the store are visible to an agent that observes the
    /// stored value through [`flag_load`](Self::flag_load).
    pub fn flag_store(&self, addr: SimAddress, value: u32) -> Result<(), MemFault> {
        let space = self.space(addr.space);
        let (widx, shift) = space.u32_cell(addr.offset)?;
        let mask = 0xffff_ffffu64 << shift;
        space.splice(widx, mask, (value as u64) << shift, Ordering::Release);
        Ok(())
    }

    /// Atomic read-modify-write cell for explicit cross-agent communication
    /// (e.g. manual reductions inside region bodies).
    pub fn fetch_add_u32(&self, addr: SimAddress, delta: u32) -> Result<u32, MemFault> {
        let space = self.space(addr.space);
        let (widx, shift) = space.u32_cell(addr.offset)?;
        let word = &space.words[widx];
        let mut cur = word.load(Ordering::Acquire);
        loop {
            let old = (cur >> shift) as u32;
            let mask = 0xffff_ffffu64 << shift;
            let new = (cur & !mask) | ((old.wrapping_add(delta) as u64) << shift);
            match word.compare_exchange_weak(cur, new, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return Ok(old),
                Err(seen) => cur = seen,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn small() -> SimMemory {
        SimMemory::new(&SimMemoryConfig {
            device_capacity: 4096,
            host_capacity: 4096,
            shared_capacity: 1024,
            device_static_limit: None,
        })
    }

    #[test]
    fn place_static_roundtrip() {
        let mem = small();
        let b = mem
            .place_static(SpaceKind::Device, b"%f%d%d\0\0", true)
            .unwrap();
        assert_eq!(mem.read_bytes(b, 8).unwrap(), b"%f%d%d\0\0");
    }

    #[test]
    fn place_static_disjoint() {
        let mem = small();
        let a = mem.place_static(SpaceKind::Device, &[1; 20], false).unwrap();
        let b = mem.place_static(SpaceKind::Device, &[2; 20], false).unwrap();
        assert!(b.offset >= a.offset + 20);
    }

    #[test]
    fn place_static_out_of_memory() {
        let mem = small();
        let err = mem
            .place_static(SpaceKind::Shared, &vec![0u8; 1025], false)
            .unwrap_err();
        assert!(matches!(err, MemFault::OutOfMemory { .. }));
    }

    #[test]
    fn write_read_identity() {
        let mem = small();
        let addr = SimAddress::device(123);
        let data: Vec<u8> = (0..128).map(|i| i as u8).collect();
        mem.write_bytes(addr, &data).unwrap();
        assert_eq!(mem.read_bytes(addr, 128).unwrap(), data);
    }

    #[test]
    fn read_at_capacity_faults() {
        let mem = small();
        let err = mem.read_bytes(SimAddress::device(4096), 1).unwrap_err();
        assert!(matches!(err, MemFault::OutOfBounds { .. }));
    }

    #[test]
    fn write_to_constant_faults() {
        let mem = small();
        let b = mem.place_static(SpaceKind::Device, b"const!", true).unwrap();
        let err = mem.write_bytes(b.add(2), &[0]).unwrap_err();
        assert!(matches!(err, MemFault::ConstWrite { .. }));
        // Non-constant placements stay writable.
        let w = mem.place_static(SpaceKind::Device, b"varies", false).unwrap();
        mem.write_bytes(w, &[9]).unwrap();
    }

    #[test]
    fn translate_preserves_offset() {
        let t = Translation {
            source_base: SimAddress::device(0x1000),
            dest_base: SimAddress::host(0x80),
            length: 0x10,
        };
        assert_eq!(
            t.translate(SimAddress::device(0x1004)).unwrap(),
            SimAddress::host(0x84)
        );
        assert_eq!(
            t.translate(SimAddress::device(0x1000)).unwrap(),
            SimAddress::host(0x80)
        );
        // Half-open range: the end is a miss.
        assert!(matches!(
            t.translate(SimAddress::device(0x1010)),
            Err(MemFault::TranslationMiss { .. })
        ));
        assert!(matches!(
            t.translate(SimAddress::host(0x1004)),
            Err(MemFault::TranslationMiss { .. })
        ));
    }

    #[test]
    fn address_encoding_roundtrip() {
        let a = SimAddress::shared(0xdead0);
        assert_eq!(SimAddress::decode(a.encode()), Some(a));
        assert_eq!(SimAddress::decode(7), None);
        assert_eq!(SimAddress::decode(0), None);
    }

    #[test]
    fn flag_and_fetch_add() {
        let mem = small();
        let cell = SimAddress::shared(0);
        assert_eq!(mem.flag_load(cell).unwrap(), 0);
        mem.flag_store(cell, 2).unwrap();
        assert_eq!(mem.flag_load(cell).unwrap(), 2);
        let ctr = SimAddress::device(64);
        assert_eq!(mem.fetch_add_u32(ctr, 5).unwrap(), 0);
        assert_eq!(mem.fetch_add_u32(ctr, 1).unwrap(), 5);
        assert_eq!(mem.read_u32(ctr).unwrap(), 6);
        assert!(matches!(
            mem.flag_load(SimAddress::shared(2)),
            Err(MemFault::Misaligned { .. })
        ));
    }

    #[test]
    fn concurrent_disjoint_writes() {
        let mem = Arc::new(small());
        let threads: Vec<_> = (0..8u64)
            .map(|t| {
                let mem = Arc::clone(&mem);
                std::thread::spawn(move || {
                    // Ranges deliberately straddle word boundaries.
                    let addr = SimAddress::device(t * 37);
                    let data = vec![t as u8 + 1; 37];
                    for _ in 0..200 {
                        mem.write_bytes(addr, &data).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        for t in 0..8u64 {
            let got = mem.read_bytes(SimAddress::device(t * 37), 37).unwrap();
            assert_eq!(got, vec![t as u8 + 1; 37]);
        }
    }

    proptest! {
        #[test]
        fn prop_write_read_identity(off in 0u64..4000, data in proptest::collection::vec(any::<u8>(), 0..96)) {
            let mem = small();
            prop_assume!(off + data.len() as u64 <= 4096);
            let addr = SimAddress::device(off);
            mem.write_bytes(addr, &data).unwrap();
            prop_assert_eq!(mem.read_bytes(addr, data.len() as u64).unwrap(), data);
        }

        #[test]
        fn prop_translate_offset_preserved(src in 0u64..1000, dst in 0u64..1000, len in 1u64..64, delta in 0u64..64) {
            let t = Translation {
                source_base: SimAddress::device(src),
                dest_base: SimAddress::host(dst),
                length: len,
            };
            let addr = SimAddress::device(src + delta);
            let res = t.translate(addr);
            if delta < len {
                let out = res.unwrap();
                prop_assert_eq!(out.offset - dst, delta);
            } else {
                prop_assert!(res.is_err());
            }
        }
    }
}

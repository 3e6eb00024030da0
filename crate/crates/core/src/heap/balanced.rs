//! The balanced N x M chunk allocator.
//!
//! Each chunk is a watermark region. An entry is the user data followed by
//! alignment padding and a 16-byte header; the header records the user size,
//! the end offset of the previous entry (zero for the bottom entry), and an
//! in-use flag. Because an entry's user data always starts where the previous
//! entry ended, the header chain can be walked from the watermark down to the
//! chunk bottom, visiting every entry once.
//!
//! Allocation bumps the watermark while space remains; once the chunk is
//! exhausted it walks the chain top-down for the first dead entry large
//! enough (the remainder stays as internal fragmentation). Deallocation marks
//! the entry dead in place; if the entry is the topmost one, the watermark
//! moves down over it and keeps cascading over trailing dead entries.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::mem::{MemFault, SimAddress, SimMemory};

use super::{chunk_index, AllocError, AllocatorConfig, ConfigError, Region};

pub const ENTRY_HEADER_SIZE: u64 = 16;
pub const FLAG_IN_USE: u32 = 1;

/// Entry metadata, embedded in simulated memory directly after the entry's
/// (padded) user data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryHeader {
    pub user_size: u64,
    /// End offset of the previous entry within the chunk; equals this
    /// entry's user base. Zero for the bottom entry.
    pub prev_entry_end: u32,
    pub flags: u32,
}

impl EntryHeader {
    pub fn in_use(&self) -> bool {
        self.flags & FLAG_IN_USE != 0
    }

    fn to_bytes(self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..8].copy_from_slice(&self.user_size.to_le_bytes());
        b[8..12].copy_from_slice(&self.prev_entry_end.to_le_bytes());
        b[12..16].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8; 16]) -> EntryHeader {
        EntryHeader {
            user_size: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            prev_entry_end: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            flags: u32::from_le_bytes(b[12..16].try_into().unwrap()),
        }
    }
}

/// Placement of the N x M chunks inside the heap region.
#[derive(Clone, Debug)]
pub struct ChunkGeometry {
    pub n: u32,
    pub m: u32,
    pub ratio: f64,
    /// Size of every chunk except the first of each team row.
    pub unit: u64,
    /// Size of the oversized first chunk of each team row.
    pub first_size: u64,
    /// Distance between consecutive team rows.
    pub team_span: u64,
}

impl ChunkGeometry {
    fn new(config: &AllocatorConfig, n: u32, m: u32, ratio: f64) -> Result<ChunkGeometry, ConfigError> {
        let align = config.alignment;
        let per_team = config.heap_size / m as u64;
        let units = (n - 1) as f64 + ratio;
        let unit = ((per_team as f64 / units) as u64) / align * align;
        let first_size = ((ratio * unit as f64) as u64) / align * align;
        if unit < 2 * ENTRY_HEADER_SIZE || first_size < 2 * ENTRY_HEADER_SIZE {
            return Err(ConfigError::HeapTooSmall { unit });
        }
        let team_span = first_size + (n as u64 - 1) * unit;
        debug_assert!(team_span * m as u64 <= config.heap_size);
        Ok(ChunkGeometry {
            n,
            m,
            ratio,
            unit,
            first_size,
            team_span,
        })
    }

    pub fn chunk_size(&self, n: u32) -> u64 {
        if n == 0 {
            self.first_size
        } else {
            self.unit
        }
    }

    /// Start offset (relative to the heap base) and size of chunk `(n, m)`.
    pub fn chunk_range(&self, n: u32, m: u32) -> (u64, u64) {
        let row = m as u64 * self.team_span;
        let start = if n == 0 {
            row
        } else {
            row + self.first_size + (n as u64 - 1) * self.unit
        };
        (start, self.chunk_size(n))
    }

    /// Chunk containing the heap-relative offset, if it falls inside one.
    fn chunk_of(&self, rel: u64) -> Option<(u32, u32)> {
        let m = rel / self.team_span;
        if m >= self.m as u64 {
            return None;
        }
        let within = rel % self.team_span;
        let n = if within < self.first_size {
            0
        } else {
            1 + ((within - self.first_size) / self.unit) as u32
        };
        Some((n, m as u32))
    }

    fn slot(&self, n: u32, m: u32) -> usize {
        (m * self.n + n) as usize
    }
}

#[derive(Clone, Copy)]
struct LiveEntry {
    size: u64,
    /// Chunk-relative offset of the entry header.
    header: u64,
}

#[derive(Default)]
struct Chunk {
    /// Watermark: end of the topmost entry. Everything at or above is free.
    top: u64,
    /// Live allocations by chunk-relative user base.
    live: BTreeMap<u64, LiveEntry>,
}

pub struct BalancedHeap {
    heap_base: u64,
    geometry: ChunkGeometry,
    chunks: Vec<Mutex<Chunk>>,
}

impl BalancedHeap {
    pub fn new(
        config: &AllocatorConfig,
        n: u32,
        m: u32,
        ratio: f64,
    ) -> Result<BalancedHeap, ConfigError> {
        let geometry = ChunkGeometry::new(config, n, m, ratio)?;
        let mut chunks = Vec::with_capacity((n * m) as usize);
        chunks.resize_with((n * m) as usize, || Mutex::new(Chunk::default()));
        Ok(BalancedHeap {
            heap_base: config.heap_base.offset,
            geometry,
            chunks,
        })
    }

    pub fn geometry(&self) -> &ChunkGeometry {
        &self.geometry
    }

    fn read_header(&self, mem: &SimMemory, chunk_start: u64, off: u64) -> Result<EntryHeader, MemFault> {
        let mut b = [0u8; 16];
        mem.read_into(SimAddress::device(self.heap_base + chunk_start + off), &mut b)?;
        Ok(EntryHeader::from_bytes(&b))
    }

    fn write_header(
        &self,
        mem: &SimMemory,
        chunk_start: u64,
        off: u64,
        header: EntryHeader,
    ) -> Result<(), MemFault> {
        mem.write_bytes(
            SimAddress::device(self.heap_base + chunk_start + off),
            &header.to_bytes(),
        )
    }

    /// Returns the heap-relative user base of the new allocation.
    pub fn allocate(
        &self,
        mem: &SimMemory,
        thread_id: u32,
        team_id: u32,
        size: u64,
    ) -> Result<u64, AllocError> {
        let (n, m) = chunk_index(thread_id, team_id, self.geometry.n, self.geometry.m);
        let (chunk_start, chunk_size) = self.geometry.chunk_range(n, m);
        let mut chunk = self.chunks[self.geometry.slot(n, m)].lock().unwrap();

        // Fast path: bump a fresh entry on top.
        let user_base = chunk.top;
        let header_off = (user_base + size).next_multiple_of(16);
        let entry_end = header_off + ENTRY_HEADER_SIZE;
        if entry_end <= chunk_size {
            self.write_header(
                mem,
                chunk_start,
                header_off,
                EntryHeader {
                    user_size: size,
                    prev_entry_end: user_base as u32,
                    flags: FLAG_IN_USE,
                },
            )?;
            chunk.top = entry_end;
            chunk.live.insert(user_base, LiveEntry { size, header: header_off });
            return Ok(chunk_start + user_base);
        }

        // Exhausted: walk the header chain from the top for the first dead
        // entry whose slot is large enough. The entry is not split.
        let mut end = chunk.top;
        while end > 0 {
            let header_off = end - ENTRY_HEADER_SIZE;
            let hdr = self.read_header(mem, chunk_start, header_off)?;
            let base = hdr.prev_entry_end as u64;
            let capacity = header_off - base;
            if !hdr.in_use() && capacity >= size {
                self.write_header(
                    mem,
                    chunk_start,
                    header_off,
                    EntryHeader {
                        user_size: size,
                        prev_entry_end: hdr.prev_entry_end,
                        flags: FLAG_IN_USE,
                    },
                )?;
                chunk.live.insert(base, LiveEntry { size, header: header_off });
                return Ok(chunk_start + base);
            }
            end = base;
        }
        Err(AllocError::OutOfMemory {
            requested: size,
            region: Region::Chunk { n, m },
        })
    }

    pub fn deallocate(&self, mem: &SimMemory, rel: u64) -> Result<(), AllocError> {
        let (n, m) = self
            .geometry
            .chunk_of(rel)
            .ok_or(AllocError::InvalidFree { addr: SimAddress::device(rel) })?;
        let (chunk_start, _) = self.geometry.chunk_range(n, m);
        let base = rel - chunk_start;
        let mut chunk = self.chunks[self.geometry.slot(n, m)].lock().unwrap();
        let entry = chunk
            .live
            .remove(&base)
            .ok_or(AllocError::InvalidFree { addr: SimAddress::device(rel) })?;
        let hdr = self.read_header(mem, chunk_start, entry.header)?;
        self.write_header(
            mem,
            chunk_start,
            entry.header,
            EntryHeader { flags: hdr.flags & !FLAG_IN_USE, ..hdr },
        )?;

        // Reclaim if this was the top entry, then cascade over any dead
        // entries that become the new top.
        if entry.header + ENTRY_HEADER_SIZE == chunk.top {
            let mut top = hdr.prev_entry_end as u64;
            while top > 0 {
                let below = self.read_header(mem, chunk_start, top - ENTRY_HEADER_SIZE)?;
                if below.in_use() {
                    break;
                }
                top = below.prev_entry_end as u64;
            }
            chunk.top = top;
        }
        Ok(())
    }

    pub fn find(&self, rel: u64) -> Option<(u64, u64)> {
        let (n, m) = self.geometry.chunk_of(rel)?;
        let (chunk_start, _) = self.geometry.chunk_range(n, m);
        let off = rel - chunk_start;
        let chunk = self.chunks[self.geometry.slot(n, m)].lock().unwrap();
        let (base, entry) = chunk.live.range(..=off).next_back()?;
        (off < base + entry.size).then(|| (chunk_start + base, entry.size))
    }

    pub fn live_objects(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for m in 0..self.geometry.m {
            for n in 0..self.geometry.n {
                let (chunk_start, _) = self.geometry.chunk_range(n, m);
                let chunk = self.chunks[self.geometry.slot(n, m)].lock().unwrap();
                out.extend(chunk.live.iter().map(|(b, e)| (chunk_start + b, e.size)));
            }
        }
        out
    }

    pub fn chunk_top(&self, n: u32, m: u32) -> u64 {
        self.chunks[self.geometry.slot(n, m)].lock().unwrap().top
    }

    pub fn walk_chunk(
        &self,
        mem: &SimMemory,
        n: u32,
        m: u32,
    ) -> Result<Vec<(u64, u64, bool)>, MemFault> {
        let (chunk_start, _) = self.geometry.chunk_range(n, m);
        let top = self.chunk_top(n, m);
        let mut out = Vec::new();
        let mut end = top;
        while end > 0 {
            let hdr = self.read_header(mem, chunk_start, end - ENTRY_HEADER_SIZE)?;
            out.push((hdr.prev_entry_end as u64, hdr.user_size, hdr.in_use()));
            end = hdr.prev_entry_end as u64;
        }
        Ok(out)
    }
}

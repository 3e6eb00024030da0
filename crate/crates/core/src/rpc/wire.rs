//! Mailbox layout inside the shared space.
//!
//! The state flag owns the first word so that nothing else shares its
//! atomic cell. Descriptors are fixed-size records; migrated objects live in
//! the payload region above them, each aligned to 16 bytes.

use crate::mem::{MemFault, SimAddress, SimMemory, SpaceKind};

use super::{AccessMode, ArgDescriptor};

pub const STATE_EMPTY: u32 = 0;
pub const STATE_REQUESTED: u32 = 1;
pub const STATE_DONE: u32 = 2;

pub const OFF_STATE: u64 = 0;
pub const OFF_SERIAL: u64 = 8;
pub const OFF_CALLEE: u64 = 16;
pub const OFF_NARGS: u64 = 20;
pub const OFF_RET: u64 = 24;
pub const OFF_ERR: u64 = 32;
pub const OFF_DONE_TS: u64 = 40;
pub const OFF_ARGS: u64 = 64;

pub const DESC_SIZE: u64 = 48;
pub const MAX_ARGS: usize = 16;

/// Start of the payload region holding migrated objects.
pub const PAYLOAD_BASE: u64 = OFF_ARGS + DESC_SIZE * MAX_ARGS as u64;

pub const ERR_NONE: u32 = 0;
pub const ERR_UNKNOWN_CALLEE: u32 = 1;
pub const ERR_HANDLER_FAULT: u32 = 2;

pub fn state_addr() -> SimAddress {
    SimAddress::shared(OFF_STATE)
}

pub fn desc_addr(index: usize) -> SimAddress {
    SimAddress::shared(OFF_ARGS + DESC_SIZE * index as u64)
}

pub fn payload_addr(payload_off: u64) -> SimAddress {
    SimAddress::shared(PAYLOAD_BASE + payload_off)
}

const KIND_VALUE: u32 = 0;
const KIND_REF: u32 = 1;

/// Writes one descriptor record; `payload_off` is where the client placed
/// the referenced object's bytes, relative to the payload base.
pub fn write_descriptor(
    mem: &SimMemory,
    index: usize,
    desc: &ArgDescriptor,
    payload_off: u64,
) -> Result<(), MemFault> {
    let mut b = [0u8; DESC_SIZE as usize];
    match *desc {
        ArgDescriptor::Value { raw } => {
            b[0..4].copy_from_slice(&KIND_VALUE.to_le_bytes());
            b[8..16].copy_from_slice(&raw.to_le_bytes());
        }
        ArgDescriptor::Ref {
            addr,
            mode,
            obj_size,
            obj_offset,
        } => {
            b[0..4].copy_from_slice(&KIND_REF.to_le_bytes());
            b[4..8].copy_from_slice(&mode.to_wire().to_le_bytes());
            b[8..16].copy_from_slice(&addr.encode().to_le_bytes());
            b[16..24].copy_from_slice(&obj_size.to_le_bytes());
            b[24..32].copy_from_slice(&obj_offset.to_le_bytes());
            b[32..40].copy_from_slice(&payload_off.to_le_bytes());
        }
    }
    mem.write_bytes(desc_addr(index), &b)
}

/// Reads one descriptor record back, returning the descriptor and the
/// payload offset for references.
pub fn read_descriptor(
    mem: &SimMemory,
    index: usize,
) -> Result<(ArgDescriptor, u64), MemFault> {
    let mut b = [0u8; DESC_SIZE as usize];
    mem.read_into(desc_addr(index), &mut b)?;
    let kind = u32::from_le_bytes(b[0..4].try_into().unwrap());
    let raw = u64::from_le_bytes(b[8..16].try_into().unwrap());
    if kind == KIND_VALUE {
        return Ok((ArgDescriptor::Value { raw }, 0));
    }
    let mode = AccessMode::from_wire(u32::from_le_bytes(b[4..8].try_into().unwrap()))
        .unwrap_or(AccessMode::ReadWrite);
    let addr = SimAddress::decode(raw).unwrap_or(SimAddress::new(SpaceKind::Device, 0));
    let obj_size = u64::from_le_bytes(b[16..24].try_into().unwrap());
    let obj_offset = u64::from_le_bytes(b[24..32].try_into().unwrap());
    let payload_off = u64::from_le_bytes(b[32..40].try_into().unwrap());
    Ok((
        ArgDescriptor::Ref {
            addr,
            mode,
            obj_size,
            obj_offset,
        },
        payload_off,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::SimMemoryConfig;

    #[test]
    fn descriptor_roundtrip() {
        let mem = SimMemory::new(&SimMemoryConfig::default());
        let v = ArgDescriptor::Value { raw: 0xabcd };
        let r = ArgDescriptor::Ref {
            addr: SimAddress::device(0x1234),
            mode: AccessMode::ReadWrite,
            obj_size: 40,
            obj_offset: 4,
        };
        write_descriptor(&mem, 0, &v, 0).unwrap();
        write_descriptor(&mem, 1, &r, 96).unwrap();
        assert_eq!(read_descriptor(&mem, 0).unwrap(), (v, 0));
        assert_eq!(read_descriptor(&mem, 1).unwrap(), (r, 96));
    }
}

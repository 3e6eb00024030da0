//! A desk-scale simulation of a device/host offload runtime.
//!
//! The crate models a simulated device and host connected through a shared
//! mailbox region: a synchronous, stateless RPC protocol with automatic
//! argument classification and single-level object migration, two device heap
//! allocators (a generic single-list allocator and a balanced chunked
//! allocator with watermark reclamation), a multi-team execution model with
//! continuous thread IDs and cross-team barriers, and a mini-IR compiler pass
//! that produces per-call-site lowering plans for external calls.

pub mod heap;
pub mod interp;
pub mod ir;
pub mod layout;
pub mod lower;
pub mod mem;
pub mod registry;
pub mod rpc;
pub mod runtime;

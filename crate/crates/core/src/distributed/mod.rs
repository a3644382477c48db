//! Data-parallel training over a TCP hub with deterministic gradient
//! averaging.
//!
//! Rank 0 is the hub. Every reduction sums rank 0's vector and then each
//! worker's in ascending rank order, so results do not depend on arrival
//! order.

mod collective;
mod tcp;
mod wire;

pub use collective::{Collective, Local};
pub use tcp::{Tcp, WorkerIdentity, DEFAULT_TIMEOUT};
pub use wire::{param_checksum, payload_to_u64, u64_to_payload, MsgType, WireMessage, HEADER_LEN, MAGIC, VERSION};

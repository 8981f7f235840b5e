//! A key/value store whose whole state lives in the managed heap.

pub mod client;
pub mod node;
pub mod server;
pub mod table;

pub use client::{ClientOptions, KvClient, KvError, Route};
pub use node::{default_kv_heap, KvBackupNode, KvNode, NodeConfig, PromotionReport};
pub use server::{KvApp, KvServer};
pub use table::HeapHashTable;

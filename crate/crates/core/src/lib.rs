//! Intrusion response for ad hoc networks: XOR tree group key agreement,
//! local and global response, an eSOM detector and a MANET simulator.

pub mod crypto;
pub mod esom;
pub mod fixtures;
pub mod gka;
pub mod graph;
pub mod key_tree;
pub mod response;
pub mod security;
pub mod sim;

pub use crypto::{CryptoError, HashAlg, KeyMaterial, Nonce, NonceSource, Suite};
pub use graph::{Graph, NodeId};
pub use key_tree::{build_tree, select_checker, KeyPath, KeyTree, TreeError};
pub use gka::{GkaError, Group, GroupConfig, ProtocolMessage, SessionKeys};

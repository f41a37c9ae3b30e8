//! XOR tree-based group key agreement.

pub mod adversary;
pub mod group;
pub mod message;
pub mod node;

pub use group::{
    run_key_initiation, view_for, Admission, GkaError, Group, GroupConfig, Link, MembershipRecord, PerfectLink,
    SessionKeys, TranscriptEntry,
};
pub use message::{MessageKind, ProtocolMessage, Receiver, WireError};
pub use node::{
    edge_key, next_master_key, step_node, InitMode, NodeProtocolState, ProtocolOptions, Role,
    StepError, TreeView,
};

//! Wire PDUs and the plaintext layouts sealed inside them.
//!
//! Frame layout (big-endian): `kind:u8 | sender:u32 | receiver:u32 |
//! id_count:u8 | ids:u32* | payload_len:u16 | payload`. A receiver of
//! `0xFFFF_FFFF` is a broadcast. See `WIRE.md` for per-kind payloads.

use std::fmt;

use crate::crypto::KeyMaterial;
use crate::graph::NodeId;

pub const BROADCAST: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("too many header ids ({0})")]
    TooManyIds(usize),
    #[error("payload too long ({0} bytes)")]
    PayloadTooLong(usize),
    #[error("node id 0xFFFFFFFF is reserved for broadcast")]
    ReservedId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    AuthStep1 = 0x01,
    AuthStep2 = 0x02,
    AuthStep3 = 0x03,
    AgreeStep1 = 0x11,
    AgreeStep2 = 0x12,
    AgreeStep3 = 0x13,
    JoinRequest = 0x20,
    JoinStepA = 0x21,
    JoinStepB = 0x22,
    JoinStepC = 0x23,
    GlobalRekey = 0x30,
    GlobalRekeyConfirm = 0x31,
    LocalRekeyStep1 = 0x41,
    LocalRekeyStep3 = 0x43,
    MapOffer = 0x50,
    MapReply = 0x51,
    MapCompose = 0x52,
    GlobalAlarm = 0x60,
}

impl MessageKind {
    pub const ALL: [MessageKind; 18] = [
        MessageKind::AuthStep1,
        MessageKind::AuthStep2,
        MessageKind::AuthStep3,
        MessageKind::AgreeStep1,
        MessageKind::AgreeStep2,
        MessageKind::AgreeStep3,
        MessageKind::JoinRequest,
        MessageKind::JoinStepA,
        MessageKind::JoinStepB,
        MessageKind::JoinStepC,
        MessageKind::GlobalRekey,
        MessageKind::GlobalRekeyConfirm,
        MessageKind::LocalRekeyStep1,
        MessageKind::LocalRekeyStep3,
        MessageKind::MapOffer,
        MessageKind::MapReply,
        MessageKind::MapCompose,
        MessageKind::GlobalAlarm,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.code() == code)
            .ok_or(WireError::UnknownKind(code))
    }

    /// Kinds whose payload is a bare digest rather than a ciphertext.
    pub fn is_digest(self) -> bool {
        matches!(
            self,
            MessageKind::AgreeStep3
                | MessageKind::GlobalRekeyConfirm
                | MessageKind::LocalRekeyStep3
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::AuthStep1 => "auth1",
            MessageKind::AuthStep2 => "auth2",
            MessageKind::AuthStep3 => "auth3",
            MessageKind::AgreeStep1 => "agree1",
            MessageKind::AgreeStep2 => "agree2",
            MessageKind::AgreeStep3 => "agree3",
            MessageKind::JoinRequest => "join_request",
            MessageKind::JoinStepA => "join_a",
            MessageKind::JoinStepB => "join_b",
            MessageKind::JoinStepC => "join_c",
            MessageKind::GlobalRekey => "global_rekey",
            MessageKind::GlobalRekeyConfirm => "global_rekey_confirm",
            MessageKind::LocalRekeyStep1 => "local_rekey1",
            MessageKind::LocalRekeyStep3 => "local_rekey3",
            MessageKind::MapOffer => "map_offer",
            MessageKind::MapReply => "map_reply",
            MessageKind::MapCompose => "map_compose",
            MessageKind::GlobalAlarm => "global_alarm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Receiver {
    Node(NodeId),
    Broadcast,
}

impl Receiver {
    fn encode(self) -> u32 {
        match self {
            Receiver::Node(n) => n.0,
            Receiver::Broadcast => BROADCAST,
        }
    }

    fn decode(v: u32) -> Self {
        if v == BROADCAST {
            Receiver::Broadcast
        } else {
            Receiver::Node(NodeId(v))
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub receiver: Receiver,
    /// Cleartext identities.
    pub ids: Vec<NodeId>,
    pub payload: Vec<u8>,
}

impl fmt::Debug for ProtocolMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({} -> {:?}, ids {:?}, {} bytes)",
            self.kind.name(),
            self.sender,
            self.receiver,
            self.ids.iter().map(|n| n.0).collect::<Vec<_>>(),
            self.payload.len()
        )
    }
}

impl ProtocolMessage {
    pub fn new(
        kind: MessageKind,
        sender: NodeId,
        receiver: Receiver,
        ids: Vec<NodeId>,
        payload: Vec<u8>,
    ) -> Self {
        ProtocolMessage {
            kind,
            sender,
            receiver,
            ids,
            payload,
        }
    }

    pub fn is_for(&self, node: NodeId) -> bool {
        match self.receiver {
            Receiver::Broadcast => self.sender != node,
            Receiver::Node(n) => n == node,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.ids.len() > u8::MAX as usize {
            return Err(WireError::TooManyIds(self.ids.len()));
        }
        if self.payload.len() > u16::MAX as usize {
            return Err(WireError::PayloadTooLong(self.payload.len()));
        }
        if self.sender.0 == BROADCAST || self.ids.iter().any(|n| n.0 == BROADCAST) {
            return Err(WireError::ReservedId);
        }
        let mut out = Vec::with_capacity(12 + 4 * self.ids.len() + self.payload.len());
        out.push(self.kind.code());
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        out.extend_from_slice(&self.receiver.encode().to_be_bytes());
        out.push(self.ids.len() as u8);
        for id in &self.ids {
            out.extend_from_slice(&id.0.to_be_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let kind = MessageKind::from_code(r.u8().ok_or(WireError::Truncated)?)?;
        let sender = NodeId(r.u32().ok_or(WireError::Truncated)?);
        if sender.0 == BROADCAST {
            return Err(WireError::ReservedId);
        }
        let receiver = Receiver::decode(r.u32().ok_or(WireError::Truncated)?);
        let count = r.u8().ok_or(WireError::Truncated)? as usize;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u32().ok_or(WireError::Truncated)?;
            if id == BROADCAST {
                return Err(WireError::ReservedId);
            }
            ids.push(NodeId(id));
        }
        let len = r.u16().ok_or(WireError::Truncated)? as usize;
        let payload = r.bytes(len).ok_or(WireError::Truncated)?.to_vec();
        if r.remaining() != 0 {
            return Err(WireError::Trailing(r.remaining()));
        }
        Ok(ProtocolMessage {
            kind,
            sender,
            receiver,
            ids,
            payload,
        })
    }
}

/// Big-endian plaintext builder.
#[derive(Default)]
pub struct Writer(Vec<u8>);

impl Writer {
    pub fn new() -> Self {
        Writer(Vec::new())
    }

    pub fn id(mut self, n: NodeId) -> Self {
        self.0.extend_from_slice(&n.0.to_be_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn key(mut self, k: &KeyMaterial) -> Self {
        self.0.extend_from_slice(k.as_bytes());
        self
    }

    pub fn bytes(mut self, b: &[u8]) -> Self {
        self.0.extend_from_slice(b);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Big-endian cursor over a byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.bytes(1).map(|b| b[0])
    }

    pub fn u16(&mut self) -> Option<u16> {
        self.bytes(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.bytes(4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.bytes(8).map(|b| u64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn id(&mut self) -> Option<NodeId> {
        self.u32().map(NodeId)
    }

    pub fn key(&mut self, width: usize) -> Option<KeyMaterial> {
        self.bytes(width).map(KeyMaterial::from_bytes)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auth_step1_frame_is_bit_exact() {
        let msg = ProtocolMessage::new(
            MessageKind::AuthStep1,
            NodeId(6),
            Receiver::Node(NodeId(2)),
            vec![NodeId(6), NodeId(2)],
            vec![0xAA, 0xBB],
        );
        assert_eq!(
            hex::encode(msg.encode().unwrap()),
            "01000000060000000202000000060000000200" .to_string() + "02aabb"
        );
    }

    #[test]
    fn broadcast_receiver_encoding() {
        let msg = ProtocolMessage::new(
            MessageKind::JoinRequest,
            NodeId(19),
            Receiver::Broadcast,
            vec![NodeId(19)],
            vec![],
        );
        assert_eq!(
            hex::encode(msg.encode().unwrap()),
            "2000000013ffffffff01000000130000"
        );
    }

    #[test]
    fn decode_errors() {
        assert_eq!(ProtocolMessage::decode(&[]), Err(WireError::Truncated));
        assert_eq!(
            ProtocolMessage::decode(&[0x7f, 0, 0, 0, 1]),
            Err(WireError::UnknownKind(0x7f))
        );
        let mut ok = ProtocolMessage::new(
            MessageKind::AgreeStep3,
            NodeId(1),
            Receiver::Node(NodeId(5)),
            vec![NodeId(1), NodeId(5)],
            vec![1, 2, 3],
        )
        .encode()
        .unwrap();
        ok.push(0);
        assert_eq!(ProtocolMessage::decode(&ok), Err(WireError::Trailing(1)));
    }

    proptest! {
        #[test]
        fn frames_round_trip(kind_idx in 0usize..18, sender in 0u32..BROADCAST, recv in any::<u32>(),
                             ids in proptest::collection::vec(0u32..BROADCAST, 0..8),
                             payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let msg = ProtocolMessage::new(
                MessageKind::ALL[kind_idx],
                NodeId(sender),
                Receiver::decode(recv),
                ids.into_iter().map(NodeId).collect(),
                payload,
            );
            let bytes = msg.encode().unwrap();
            prop_assert_eq!(bytes.len(), 12 + 4 * msg.ids.len() + msg.payload.len());
            prop_assert_eq!(ProtocolMessage::decode(&bytes).unwrap(), msg);
        }
    }
}

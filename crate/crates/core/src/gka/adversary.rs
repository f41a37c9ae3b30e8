//! Knowledge-closure adversary. Starting from a set of secrets, it decrypts
//! every ciphertext it can, harvests key fields and nonces, derives every
//! master and edge key reachable through the public derivation rules, and
//! repeats until nothing new appears. A target key counts as compromised if
//! it lies in the XOR span of what was learned.

use std::collections::{BTreeMap, BTreeSet};

use super::group::MembershipRecord;
use super::message::{MessageKind, ProtocolMessage, Reader};
use super::node::{edge_key, next_master_key};
use crate::crypto::{Ciphertext, KeyMaterial, Suite};
use crate::graph::NodeId;

/// A completed challenge on one tree edge, in transcript order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Handshake {
    seq: usize,
    d: NodeId,
    a: NodeId,
    nonce_d: u64,
    nonce_a: u64,
}

impl Handshake {
    fn edge(&self) -> (NodeId, NodeId) {
        (self.d.min(self.a), self.d.max(self.a))
    }
}

/// How a usable key came to be known. Bounds the derivation rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Learned,
    /// Master key obtained by applying membership records up to this index.
    Master(usize),
    /// Edge key produced by this handshake.
    Edge(Handshake),
}

#[derive(Debug, Clone)]
pub struct Knowledge {
    suite: Suite,
    /// Values usable directly as cipher keys.
    keys: BTreeMap<KeyMaterial, Origin>,
    /// Raw key-width values that combine by XOR.
    linear: BTreeSet<KeyMaterial>,
    handshakes: BTreeSet<Handshake>,
    derived: BTreeSet<(KeyMaterial, Handshake)>,
    expanded: BTreeSet<KeyMaterial>,
    opened: usize,
}

impl Knowledge {
    pub fn new(suite: Suite) -> Self {
        Knowledge {
            suite,
            keys: BTreeMap::new(),
            linear: BTreeSet::new(),
            handshakes: BTreeSet::new(),
            derived: BTreeSet::new(),
            expanded: BTreeSet::new(),
            opened: 0,
        }
    }

    pub fn learn(&mut self, k: KeyMaterial) {
        if k.width() == self.suite.key_width() {
            self.linear.insert(k.clone());
            self.keys.insert(k, Origin::Learned);
        }
    }

    pub fn learn_all<I: IntoIterator<Item = KeyMaterial>>(&mut self, ks: I) {
        for k in ks {
            self.learn(k);
        }
    }

    /// Number of ciphertexts opened so far.
    pub fn opened(&self) -> usize {
        self.opened
    }

    pub fn knows(&self, k: &KeyMaterial) -> bool {
        self.keys.contains_key(k) || self.linear.contains(k)
    }

    fn add_key(&mut self, k: KeyMaterial, origin: Origin) -> bool {
        if self.keys.contains_key(&k) {
            return false;
        }
        self.keys.insert(k, origin);
        true
    }

    /// Apply the public derivation rules once to everything known.
    fn derive(&mut self, public: &[MembershipRecord]) -> bool {
        let mut progress = false;
        let pending: Vec<(KeyMaterial, Origin)> = self
            .keys
            .iter()
            .filter(|(k, _)| !self.expanded.contains(*k))
            .map(|(k, o)| (k.clone(), *o))
            .collect();
        for (k, origin) in pending {
            self.expanded.insert(k.clone());
            let first = match origin {
                Origin::Learned => Some(0),
                Origin::Master(i) => Some(i + 1),
                Origin::Edge(_) => None,
            };
            if let Some(first) = first {
                for (i, r) in public.iter().enumerate().skip(first.max(1)) {
                    let next = next_master_key(&self.suite, &k, r.epoch, &r.group);
                    progress |= self.add_key(next, Origin::Master(i));
                }
            }
        }
        let candidates: Vec<(KeyMaterial, Origin)> =
            self.keys.iter().map(|(k, o)| (k.clone(), *o)).collect();
        let shakes: Vec<Handshake> = self.handshakes.iter().copied().collect();
        for h in shakes {
            for (k, origin) in &candidates {
                let eligible = match origin {
                    Origin::Learned | Origin::Master(_) => true,
                    Origin::Edge(prev) => prev.edge() == h.edge() && prev.seq < h.seq,
                };
                if !eligible || !self.derived.insert((k.clone(), h)) {
                    continue;
                }
                let ek = edge_key(&self.suite, k, h.d, h.a, h.nonce_d, h.nonce_a);
                progress |= self.add_key(ek, Origin::Edge(h));
            }
        }
        progress
    }

    /// Expand knowledge against `corpus` until a fixpoint.
    pub fn close(&mut self, corpus: &[ProtocolMessage], public: &[MembershipRecord]) {
        let mut sealed: Vec<(usize, &ProtocolMessage)> = corpus
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.kind.is_digest() && !m.payload.is_empty())
            .collect();
        let xor_target =
            |k: MessageKind| matches!(k, MessageKind::GlobalRekey | MessageKind::LocalRekeyStep1);
        let mut tried: BTreeSet<(usize, KeyMaterial)> = BTreeSet::new();
        loop {
            let mut progress = self.derive(public);
            let keys: Vec<KeyMaterial> = self.keys.keys().cloned().collect();
            let lin: Vec<KeyMaterial> = self.linear.iter().cloned().collect();
            let mut i = 0;
            while i < sealed.len() {
                let (idx, m) = sealed[i];
                let ct = Ciphertext(m.payload.clone());
                let mut hit = None;
                for k in &keys {
                    if tried.insert((idx, k.clone())) {
                        if let Ok(pt) = self.suite.decrypt(k, &ct) {
                            hit = Some(pt);
                            break;
                        }
                    }
                }
                if hit.is_none() && xor_target(m.kind) {
                    'pairs: for (x, a) in lin.iter().enumerate() {
                        for b in &lin[x + 1..] {
                            let k = a.xor(b).expect("uniform width");
                            if tried.insert((idx, k.clone())) {
                                if let Ok(pt) = self.suite.decrypt(&k, &ct) {
                                    hit = Some(pt);
                                    break 'pairs;
                                }
                            }
                        }
                    }
                }
                match hit {
                    Some(pt) => {
                        self.opened += 1;
                        self.harvest(idx, m, &pt);
                        sealed.swap_remove(i);
                        progress = true;
                    }
                    None => i += 1,
                }
            }
            if !progress {
                break;
            }
        }
    }

    fn harvest(&mut self, idx: usize, m: &ProtocolMessage, pt: &[u8]) {
        let w = self.suite.key_width();
        let mut r = Reader::new(pt);
        match m.kind {
            MessageKind::AuthStep2 | MessageKind::JoinStepB => {
                if let (Some(a), Some(d), Some(echo), Some(na)) = (r.id(), r.id(), r.u64(), r.u64()) {
                    self.handshakes.insert(Handshake {
                        seq: idx,
                        d,
                        a,
                        nonce_d: echo.wrapping_sub(1),
                        nonce_a: na,
                    });
                }
            }
            MessageKind::AuthStep3 | MessageKind::JoinStepC => {
                let _ = (r.id(), r.id(), r.u64());
                while let Some(k) = r.key(w) {
                    self.learn(k);
                }
            }
            MessageKind::AgreeStep1
            | MessageKind::AgreeStep2
            | MessageKind::GlobalRekey
            | MessageKind::LocalRekeyStep1 => {
                let _ = r.id();
                if let Some(k) = r.key(w) {
                    self.learn(k);
                }
            }
            _ => {}
        }
    }

    /// Whether `target` is a known value or an XOR combination of learned values.
    pub fn can_compute(&self, target: &KeyMaterial) -> bool {
        if self.knows(target) {
            return true;
        }
        let bits = self.suite.key_width() * 8;
        let basis = reduce_basis(self.linear.iter());
        if basis.len() + 8 >= bits {
            // The span is too close to the whole space to say anything; fall
            // back to explicit pairs.
            let lin: Vec<&KeyMaterial> = self.linear.iter().collect();
            return lin
                .iter()
                .enumerate()
                .any(|(i, a)| lin[i + 1..].iter().any(|b| &a.xor(b).unwrap() == target));
        }
        in_span(&basis, target)
    }
}

fn leading_bit(v: &[u8]) -> Option<usize> {
    v.iter()
        .enumerate()
        .find(|(_, b)| **b != 0)
        .map(|(i, b)| i * 8 + b.leading_zeros() as usize)
}

fn xor_into(a: &mut [u8], b: &[u8]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x ^= y;
    }
}

/// Gaussian elimination over GF(2): rows with distinct leading bits.
fn reduce_basis<'a>(vals: impl Iterator<Item = &'a KeyMaterial>) -> Vec<(usize, Vec<u8>)> {
    let mut basis: Vec<(usize, Vec<u8>)> = Vec::new();
    for v in vals {
        let mut row = v.as_bytes().to_vec();
        loop {
            let Some(lead) = leading_bit(&row) else { break };
            match basis.iter().find(|(l, _)| *l == lead) {
                Some((_, b)) => xor_into(&mut row, b),
                None => {
                    basis.push((lead, row));
                    break;
                }
            }
        }
    }
    basis
}

fn in_span(basis: &[(usize, Vec<u8>)], target: &KeyMaterial) -> bool {
    let mut row = target.as_bytes().to_vec();
    loop {
        let Some(lead) = leading_bit(&row) else { return true };
        match basis.iter().find(|(l, _)| *l == lead) {
            Some((_, b)) => xor_into(&mut row, b),
            None => return false,
        }
    }
}

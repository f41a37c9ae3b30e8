//! Per-node protocol state machine. [`NodeProtocolState::step`] is the only
//! mutator driven by the wire; every check runs before any field changes, so
//! a rejected message leaves the state untouched.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::message::{MessageKind, ProtocolMessage, Reader, Receiver, Writer};
use crate::crypto::{succ, Ciphertext, CryptoError, Digest, KeyMaterial, Nonce, NonceSource, Suite};
use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error("message not addressed to this node")]
    NotAddressed,
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("nonce mismatch or replayed nonce")]
    NonceMismatch,
    #[error("unexpected {0:?} for current role or phase")]
    UnexpectedKind(MessageKind),
    #[error("malformed plaintext or identity mismatch")]
    Malformed,
    #[error("digest from {0} does not match")]
    DigestMismatch(NodeId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Root,
    Checker,
    Member,
}

/// Which handshake family a node is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Steps 1–3 under the current master key.
    Full,
    /// Steps a–c under the next master key.
    TreePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolOptions {
    /// Reject replayed nonces and wrong successor echoes.
    pub verify_nonces: bool,
    /// Relay the subkey hop by hop under pairwise edge keys. When false the
    /// root broadcasts it once under the group master key.
    pub relay_subkey: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            verify_nonces: true,
            relay_subkey: true,
        }
    }
}

/// What a node knows about the tree around it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeView {
    pub root: NodeId,
    pub checker: NodeId,
    /// Tree parent. The checker's handshake partner (the root) is stored here too.
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Tree members the checker expects confirmations from.
    pub members: Vec<NodeId>,
}

/// Next group master key after a membership change.
pub fn next_master_key(suite: &Suite, master: &KeyMaterial, epoch: u64, group: &[NodeId]) -> KeyMaterial {
    let mut ids = Vec::with_capacity(group.len() * 4);
    let mut sorted = group.to_vec();
    sorted.sort();
    for n in sorted {
        ids.extend_from_slice(&n.0.to_be_bytes());
    }
    suite.derive_key(&[b"master", master.as_bytes(), &epoch.to_be_bytes(), &ids])
}

/// Pairwise key for the tree edge between descendant `d` and ascendant `a`.
pub fn edge_key(
    suite: &Suite,
    prev: &KeyMaterial,
    d: NodeId,
    a: NodeId,
    nonce_d: u64,
    nonce_a: u64,
) -> KeyMaterial {
    suite.derive_key(&[
        b"edge",
        prev.as_bytes(),
        &d.0.to_be_bytes(),
        &a.0.to_be_bytes(),
        &nonce_d.to_be_bytes(),
        &nonce_a.to_be_bytes(),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PendingLocalRekey {
    nonce: u64,
    next: KeyMaterial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeProtocolState {
    my_id: NodeId,
    suite: Suite,
    options: ProtocolOptions,
    role: Role,
    view: TreeView,
    master_key: KeyMaterial,
    master_next: Option<KeyMaterial>,
    share: KeyMaterial,
    intermediate: Option<KeyMaterial>,
    subkey: Option<KeyMaterial>,
    session_key: Option<KeyMaterial>,
    local_keys: BTreeMap<NodeId, KeyMaterial>,
    children_received: BTreeMap<NodeId, KeyMaterial>,
    level_one_shares: BTreeMap<NodeId, KeyMaterial>,
    edge_keys: BTreeMap<NodeId, KeyMaterial>,
    pending_nonces: BTreeMap<NodeId, Nonce>,
    peer_nonces: BTreeMap<NodeId, u64>,
    seen: BTreeSet<(NodeId, u64)>,
    awaiting: BTreeSet<NodeId>,
    init_mode: Option<InitMode>,
    root_nonce: Option<u64>,
    checker_nonce: Option<u64>,
    confirm_pending: BTreeSet<NodeId>,
    rekey_nonce: Option<u64>,
    local_rekey_in: BTreeMap<NodeId, PendingLocalRekey>,
    deferred: Option<ProtocolMessage>,
    epoch: u64,
    nonces: NonceSource,
    rng: ChaCha8Rng,
}

fn role_of(id: NodeId, view: &TreeView) -> Role {
    if id == view.root {
        Role::Root
    } else if id == view.checker {
        Role::Checker
    } else {
        Role::Member
    }
}

impl NodeProtocolState {
    pub fn new(
        my_id: NodeId,
        suite: Suite,
        options: ProtocolOptions,
        view: TreeView,
        master_key: KeyMaterial,
        share: KeyMaterial,
        seed: u64,
    ) -> Self {
        NodeProtocolState {
            my_id,
            suite,
            options,
            role: role_of(my_id, &view),
            view,
            master_key,
            master_next: None,
            share,
            intermediate: None,
            subkey: None,
            session_key: None,
            local_keys: BTreeMap::new(),
            children_received: BTreeMap::new(),
            level_one_shares: BTreeMap::new(),
            edge_keys: BTreeMap::new(),
            pending_nonces: BTreeMap::new(),
            peer_nonces: BTreeMap::new(),
            seen: BTreeSet::new(),
            awaiting: BTreeSet::new(),
            init_mode: None,
            root_nonce: None,
            checker_nonce: None,
            confirm_pending: BTreeSet::new(),
            rekey_nonce: None,
            local_rekey_in: BTreeMap::new(),
            deferred: None,
            epoch: 0,
            nonces: NonceSource::new(my_id, seed),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
        }
    }

    pub fn id(&self) -> NodeId {
        self.my_id
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn view(&self) -> &TreeView {
        &self.view
    }
    pub fn master_key(&self) -> &KeyMaterial {
        &self.master_key
    }
    pub fn master_next(&self) -> Option<&KeyMaterial> {
        self.master_next.as_ref()
    }
    pub fn share(&self) -> &KeyMaterial {
        &self.share
    }
    pub fn intermediate(&self) -> Option<&KeyMaterial> {
        self.intermediate.as_ref()
    }
    pub fn subkey(&self) -> Option<&KeyMaterial> {
        self.subkey.as_ref()
    }
    pub fn session_key(&self) -> Option<&KeyMaterial> {
        self.session_key.as_ref()
    }
    pub fn local_keys(&self) -> &BTreeMap<NodeId, KeyMaterial> {
        &self.local_keys
    }
    pub fn local_key(&self, j: NodeId) -> Option<&KeyMaterial> {
        self.local_keys.get(&j)
    }
    pub fn children_received(&self) -> &BTreeMap<NodeId, KeyMaterial> {
        &self.children_received
    }
    pub fn edge_keys(&self) -> &BTreeMap<NodeId, KeyMaterial> {
        &self.edge_keys
    }
    pub fn pending_nonces(&self) -> &BTreeMap<NodeId, Nonce> {
        &self.pending_nonces
    }
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
    pub fn options(&self) -> ProtocolOptions {
        self.options
    }
    pub fn set_options(&mut self, options: ProtocolOptions) {
        self.options = options;
    }

    /// True once the root has `z` and no handshake is outstanding here.
    pub fn initiation_done(&self) -> bool {
        self.init_mode.is_none() && self.awaiting.is_empty() && self.pending_nonces.is_empty()
    }

    pub fn awaiting(&self) -> &BTreeSet<NodeId> {
        &self.awaiting
    }

    /// Checker side of the final verification step.
    pub fn confirmations_outstanding(&self) -> &BTreeSet<NodeId> {
        &self.confirm_pending
    }

    /// Every secret this node currently holds, for adversary modelling.
    pub fn secrets(&self) -> Vec<KeyMaterial> {
        let mut out = vec![self.master_key.clone(), self.share.clone()];
        out.extend(self.master_next.iter().cloned());
        out.extend(self.intermediate.iter().cloned());
        out.extend(self.subkey.iter().cloned());
        out.extend(self.session_key.iter().cloned());
        out.extend(self.local_keys.values().cloned());
        out.extend(self.children_received.values().cloned());
        out.extend(self.level_one_shares.values().cloned());
        out.extend(self.edge_keys.values().cloned());
        out.extend(self.local_rekey_in.values().map(|p| p.next.clone()));
        out
    }

    fn agree_key(&self) -> &KeyMaterial {
        self.master_next.as_ref().unwrap_or(&self.master_key)
    }

    fn handshake_key(&self, mode: InitMode) -> Option<&KeyMaterial> {
        match mode {
            InitMode::Full => Some(&self.master_key),
            InitMode::TreePath => self.master_next.as_ref(),
        }
    }

    fn is_level_one(&self) -> bool {
        self.role == Role::Member && self.view.parent == Some(self.view.root)
    }

    fn open(&self, key: &KeyMaterial, payload: &[u8]) -> Result<Vec<u8>, StepError> {
        self.suite
            .decrypt(key, &Ciphertext(payload.to_vec()))
            .map_err(|_| StepError::IntegrityFailure)
    }

    fn seal(&mut self, key: &KeyMaterial, plaintext: &[u8]) -> Result<Vec<u8>, StepError> {
        Ok(self.suite.encrypt(key, plaintext, &mut self.rng)?.0)
    }

    fn check_fresh(&self, peer: NodeId, value: u64) -> Result<(), StepError> {
        if self.options.verify_nonces && self.seen.contains(&(peer, value)) {
            return Err(StepError::NonceMismatch);
        }
        Ok(())
    }

    fn check_echo(&self, echo: u64, issued: u64) -> Result<(), StepError> {
        if self.options.verify_nonces && Some(echo) != issued.checked_add(1) {
            return Err(StepError::NonceMismatch);
        }
        Ok(())
    }

    fn expect_ids(msg: &ProtocolMessage, ids: &[NodeId]) -> Result<(), StepError> {
        if msg.ids != ids {
            return Err(StepError::Malformed);
        }
        Ok(())
    }

    fn xor_children(&self) -> Result<KeyMaterial, StepError> {
        let mut acc = self.share.clone();
        for c in &self.view.children {
            let k = self
                .children_received
                .get(c)
                .ok_or(StepError::UnexpectedKind(MessageKind::AuthStep3))?;
            acc = acc.xor(k)?;
        }
        Ok(acc)
    }

    /// Initial Key Initiation: this node handshakes with its parent once all
    /// `children` (plus the checker, at the root) have completed theirs.
    pub fn begin_full_initiation(&mut self) {
        self.init_mode = Some(InitMode::Full);
        self.awaiting = self.view.children.iter().copied().collect();
        if self.role == Role::Root {
            self.awaiting.insert(self.view.checker);
        }
        self.intermediate = None;
        self.children_received.clear();
        self.level_one_shares.clear();
    }

    /// Membership epoch: install the new view and the next master key.
    /// `refresh` replaces the share; `active_children` are the children that
    /// will run Steps a–c with this node. Nodes without `run_initiation`
    /// keep their cached intermediate key.
    pub fn begin_membership_epoch(
        &mut self,
        view: TreeView,
        next_epoch: u64,
        group: &[NodeId],
        refresh: Option<KeyMaterial>,
        run_initiation: bool,
        active_children: BTreeSet<NodeId>,
    ) {
        if self.master_next.is_none() {
            self.master_next = Some(next_master_key(&self.suite, &self.master_key, next_epoch, group));
        }
        self.role = role_of(self.my_id, &view);
        self.children_received.retain(|c, _| view.children.contains(c));
        self.level_one_shares.retain(|c, _| view.children.contains(c));
        self.view = view;
        if let Some(s) = refresh {
            self.share = s;
        }
        if run_initiation {
            self.init_mode = Some(InitMode::TreePath);
            self.awaiting = active_children;
            self.intermediate = None;
        }
    }

    /// Admission of a joiner: it is handed the next master key directly.
    pub fn admit(&mut self, next_master: KeyMaterial) {
        self.master_key = next_master.clone();
        self.master_next = Some(next_master);
    }

    /// Outcome of a successful epoch.
    pub fn commit(&mut self, epoch: u64) {
        if let Some(k) = self.master_next.take() {
            self.master_key = k;
        }
        self.epoch = epoch;
        self.init_mode = None;
        self.deferred = None;
        self.rekey_nonce = None;
    }

    /// Starts this node's own handshake if nothing is outstanding below it.
    pub fn start_initiation(&mut self) -> Result<Vec<ProtocolMessage>, StepError> {
        if self.init_mode.is_none() || !self.awaiting.is_empty() || !self.pending_nonces.is_empty() {
            return Ok(Vec::new());
        }
        self.complete_subtree()
    }

    fn complete_subtree(&mut self) -> Result<Vec<ProtocolMessage>, StepError> {
        let mode = self.init_mode.ok_or(StepError::UnexpectedKind(MessageKind::AuthStep1))?;
        match self.role {
            Role::Root => {
                let z = self.xor_children()?;
                for j in self.view.children.clone() {
                    if let Some(s) = self.level_one_shares.get(&j) {
                        let lk = z.xor(s)?;
                        self.local_keys.insert(j, lk);
                    }
                }
                self.intermediate = Some(z.clone());
                self.subkey = Some(z);
                self.init_mode = None;
                Ok(Vec::new())
            }
            Role::Checker => self.send_handshake_open(mode, KeyMaterial::zero(self.suite.key_width())),
            Role::Member => {
                let k = self.xor_children()?;
                self.send_handshake_open(mode, k)
            }
        }
    }

    fn send_handshake_open(
        &mut self,
        mode: InitMode,
        intermediate: KeyMaterial,
    ) -> Result<Vec<ProtocolMessage>, StepError> {
        let parent = self.view.parent.ok_or(StepError::UnexpectedKind(MessageKind::AuthStep1))?;
        let key = self
            .handshake_key(mode)
            .cloned()
            .ok_or(StepError::UnexpectedKind(MessageKind::JoinStepA))?;
        let nonce = self.nonces.fresh()?;
        let pt = Writer::new().id(self.my_id).id(parent).u64(nonce.value).finish();
        let payload = self.seal(&key, &pt)?;
        self.intermediate = Some(intermediate);
        self.pending_nonces.insert(parent, nonce);
        let kind = match mode {
            InitMode::Full => MessageKind::AuthStep1,
            InitMode::TreePath => MessageKind::JoinStepA,
        };
        Ok(vec![ProtocolMessage::new(
            kind,
            self.my_id,
            Receiver::Node(parent),
            vec![self.my_id, parent],
            payload,
        )])
    }

    /// Root: distribute `z` and open the session agreement.
    pub fn start_agreement(&mut self) -> Result<Vec<ProtocolMessage>, StepError> {
        if self.role != Role::Root {
            return Err(StepError::UnexpectedKind(MessageKind::AgreeStep1));
        }
        let z = self
            .subkey
            .clone()
            .ok_or(StepError::UnexpectedKind(MessageKind::AgreeStep1))?;
        let mut targets = self.view.children.clone();
        targets.push(self.view.checker);
        if self.options.relay_subkey && targets.iter().any(|t| !self.edge_keys.contains_key(t)) {
            return Err(StepError::UnexpectedKind(MessageKind::AgreeStep1));
        }
        let nonce = self.nonces.fresh()?;
        let pt = Writer::new().id(self.my_id).key(&z).u64(nonce.value).finish();
        let mut out = Vec::new();
        if self.options.relay_subkey {
            for t in targets {
                let ek = self.edge_keys[&t].clone();
                let payload = self.seal(&ek, &pt)?;
                out.push(ProtocolMessage::new(
                    MessageKind::AgreeStep1,
                    self.my_id,
                    Receiver::Node(t),
                    vec![self.my_id],
                    payload,
                ));
            }
        } else {
            let key = self.agree_key().clone();
            let payload = self.seal(&key, &pt)?;
            out.push(ProtocolMessage::new(
                MessageKind::AgreeStep1,
                self.my_id,
                Receiver::Broadcast,
                vec![self.my_id],
                payload,
            ));
        }
        self.seen.insert((self.my_id, nonce.value));
        self.root_nonce = Some(nonce.value);
        Ok(out)
    }

    /// Checker: distribute a fresh share under the current global key.
    pub fn start_global_rekey(
        &mut self,
        fresh: Option<KeyMaterial>,
    ) -> Result<Vec<ProtocolMessage>, StepError> {
        let gk = match (&self.session_key, self.role) {
            (Some(k), Role::Checker) => k.clone(),
            _ => return Err(StepError::UnexpectedKind(MessageKind::GlobalRekey)),
        };
        let s = fresh.unwrap_or_else(|| self.suite.random_key(&mut self.rng));
        let next = gk.xor(&s)?;
        let share = self.share.xor(&s)?;
        let nonce = self.nonces.fresh()?;
        let pt = Writer::new().id(self.my_id).key(&s).u64(nonce.value).finish();
        let payload = self.seal(&gk, &pt)?;
        self.session_key = Some(next);
        self.share = share;
        self.rekey_nonce = Some(nonce.value);
        self.confirm_pending = self.view.members.iter().copied().collect();
        Ok(vec![ProtocolMessage::new(
            MessageKind::GlobalRekey,
            self.my_id,
            Receiver::Broadcast,
            vec![self.my_id],
            payload,
        )])
    }

    /// Level-1 member: refresh the local key shared with the root.
    pub fn start_local_rekey(
        &mut self,
        fresh: Option<KeyMaterial>,
    ) -> Result<Vec<ProtocolMessage>, StepError> {
        let old = match self.local_keys.get(&self.my_id) {
            Some(k) if self.is_level_one() => k.clone(),
            _ => return Err(StepError::UnexpectedKind(MessageKind::LocalRekeyStep1)),
        };
        let s = fresh.unwrap_or_else(|| self.suite.random_key(&mut self.rng));
        let next = old.xor(&s)?;
        let nonce = self.nonces.fresh()?;
        let pt = Writer::new().id(self.my_id).key(&s).u64(nonce.value).finish();
        let payload = self.seal(&old, &pt)?;
        let digest = self.suite.hash(
            &Writer::new()
                .id(self.my_id)
                .u64(succ(nonce.value)?)
                .key(&next)
                .finish(),
        );
        self.local_keys.insert(self.my_id, next);
        let root = self.view.root;
        Ok(vec![
            ProtocolMessage::new(
                MessageKind::LocalRekeyStep1,
                self.my_id,
                Receiver::Node(root),
                vec![self.my_id],
                payload,
            ),
            ProtocolMessage::new(
                MessageKind::LocalRekeyStep3,
                self.my_id,
                Receiver::Node(root),
                vec![self.my_id],
                digest.0,
            ),
        ])
    }

    /// Announces a wish to join; carries no payload.
    pub fn join_request(&self) -> ProtocolMessage {
        ProtocolMessage::new(
            MessageKind::JoinRequest,
            self.my_id,
            Receiver::Broadcast,
            vec![self.my_id],
            Vec::new(),
        )
    }

    /// Processes one message delivered at simulated time `now`. On error
    /// nothing has changed. Time is not part of the state: deadlines are
    /// enforced by whoever drives delivery.
    pub fn step(&mut self, msg: &ProtocolMessage, now: f64) -> Result<Vec<ProtocolMessage>, StepError> {
        let _ = now;
        if !msg.is_for(self.my_id) {
            return Err(StepError::NotAddressed);
        }
        let out = match msg.kind {
            MessageKind::AuthStep1 => self.on_open(msg, InitMode::Full),
            MessageKind::JoinStepA => self.on_open(msg, InitMode::TreePath),
            MessageKind::AuthStep2 => self.on_challenge(msg, InitMode::Full),
            MessageKind::JoinStepB => self.on_challenge(msg, InitMode::TreePath),
            MessageKind::AuthStep3 => self.on_response(msg, InitMode::Full),
            MessageKind::JoinStepC => self.on_response(msg, InitMode::TreePath),
            MessageKind::AgreeStep1 => self.on_subkey(msg),
            MessageKind::AgreeStep2 => self.on_checker_share(msg),
            MessageKind::AgreeStep3 => self.on_confirm(msg),
            MessageKind::JoinRequest => self.on_join_request(msg),
            MessageKind::GlobalRekey => self.on_global_rekey(msg),
            MessageKind::GlobalRekeyConfirm => self.on_global_confirm(msg),
            MessageKind::LocalRekeyStep1 => self.on_local_rekey(msg),
            MessageKind::LocalRekeyStep3 => self.on_local_confirm(msg),
            k => Err(StepError::UnexpectedKind(k)),
        }?;
        Ok(out)
    }

    fn on_join_request(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        if msg.ids != [msg.sender] || !msg.payload.is_empty() {
            return Err(StepError::Malformed);
        }
        Ok(Vec::new())
    }

    // Step 1 / a at the ascendant.
    fn on_open(&mut self, msg: &ProtocolMessage, mode: InitMode) -> Result<Vec<ProtocolMessage>, StepError> {
        let d = msg.sender;
        if !self.awaiting.contains(&d) || self.init_mode.is_none() {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        let key = self.handshake_key(mode).cloned().ok_or(StepError::UnexpectedKind(msg.kind))?;
        Self::expect_ids(msg, &[d, self.my_id])?;
        let pt = self.open(&key, &msg.payload)?;
        let mut r = Reader::new(&pt);
        let (id_d, id_a, nonce_d) = match (r.id(), r.id(), r.u64()) {
            (Some(a), Some(b), Some(c)) if r.remaining() == 0 => (a, b, c),
            _ => return Err(StepError::Malformed),
        };
        if id_d != d || id_a != self.my_id {
            return Err(StepError::Malformed);
        }
        self.check_fresh(d, nonce_d)?;
        let echo = succ(nonce_d)?;

        let nonce_a = self.nonces.fresh()?;
        let pt = Writer::new().id(self.my_id).id(d).u64(echo).u64(nonce_a.value).finish();
        let payload = self.seal(&key, &pt)?;
        self.seen.insert((d, nonce_d));
        self.peer_nonces.insert(d, nonce_d);
        self.pending_nonces.insert(d, nonce_a);
        let kind = match mode {
            InitMode::Full => MessageKind::AuthStep2,
            InitMode::TreePath => MessageKind::JoinStepB,
        };
        Ok(vec![ProtocolMessage::new(
            kind,
            self.my_id,
            Receiver::Node(d),
            vec![self.my_id, d],
            payload,
        )])
    }

    // Step 2 / b at the descendant.
    fn on_challenge(&mut self, msg: &ProtocolMessage, mode: InitMode) -> Result<Vec<ProtocolMessage>, StepError> {
        let a = msg.sender;
        let mine = *self.pending_nonces.get(&a).ok_or(StepError::UnexpectedKind(msg.kind))?;
        if self.view.parent != Some(a) {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        let key = self.handshake_key(mode).cloned().ok_or(StepError::UnexpectedKind(msg.kind))?;
        Self::expect_ids(msg, &[a, self.my_id])?;
        let pt = self.open(&key, &msg.payload)?;
        let mut r = Reader::new(&pt);
        let (id_a, id_d, echo, nonce_a) = match (r.id(), r.id(), r.u64(), r.u64()) {
            (Some(a), Some(b), Some(c), Some(d)) if r.remaining() == 0 => (a, b, c, d),
            _ => return Err(StepError::Malformed),
        };
        if id_a != a || id_d != self.my_id {
            return Err(StepError::Malformed);
        }
        self.check_echo(echo, mine.value)?;
        self.check_fresh(a, nonce_a)?;
        let k = self.intermediate.clone().ok_or(StepError::UnexpectedKind(msg.kind))?;

        let mut w = Writer::new().id(a).id(self.my_id).u64(succ(nonce_a)?).key(&k);
        if self.is_level_one() {
            w = w.key(&self.share);
        }
        let payload = self.seal(&key, &w.finish())?;
        let prev = self.edge_keys.get(&a).unwrap_or(&key);
        let ek = edge_key(&self.suite, prev, self.my_id, a, mine.value, nonce_a);
        self.seen.insert((a, nonce_a));
        self.pending_nonces.remove(&a);
        self.edge_keys.insert(a, ek);
        self.init_mode = None;
        let kind = match mode {
            InitMode::Full => MessageKind::AuthStep3,
            InitMode::TreePath => MessageKind::JoinStepC,
        };
        Ok(vec![ProtocolMessage::new(
            kind,
            self.my_id,
            Receiver::Node(a),
            vec![a, self.my_id],
            payload,
        )])
    }

    // Step 3 / c at the ascendant.
    fn on_response(&mut self, msg: &ProtocolMessage, mode: InitMode) -> Result<Vec<ProtocolMessage>, StepError> {
        let d = msg.sender;
        let mine = *self.pending_nonces.get(&d).ok_or(StepError::UnexpectedKind(msg.kind))?;
        if !self.awaiting.contains(&d) {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        let nonce_d = *self.peer_nonces.get(&d).ok_or(StepError::UnexpectedKind(msg.kind))?;
        let key = self.handshake_key(mode).cloned().ok_or(StepError::UnexpectedKind(msg.kind))?;
        Self::expect_ids(msg, &[self.my_id, d])?;
        let pt = self.open(&key, &msg.payload)?;
        let w = self.suite.key_width();
        let from_level_one = self.role == Role::Root && d != self.view.checker;
        let mut r = Reader::new(&pt);
        let (id_a, id_d, echo, k) = match (r.id(), r.id(), r.u64(), r.key(w)) {
            (Some(a), Some(b), Some(c), Some(k)) => (a, b, c, k),
            _ => return Err(StepError::Malformed),
        };
        let share = if from_level_one {
            Some(r.key(w).ok_or(StepError::Malformed)?)
        } else {
            None
        };
        if r.remaining() != 0 || id_a != self.my_id || id_d != d {
            return Err(StepError::Malformed);
        }
        self.check_echo(echo, mine.value)?;

        let prev = self.edge_keys.get(&d).unwrap_or(&key);
        let ek = edge_key(&self.suite, prev, d, self.my_id, nonce_d, mine.value);
        self.pending_nonces.remove(&d);
        self.peer_nonces.remove(&d);
        self.edge_keys.insert(d, ek);
        if d != self.view.checker {
            self.children_received.insert(d, k);
        }
        if let Some(s) = share {
            self.level_one_shares.insert(d, s);
        }
        self.awaiting.remove(&d);
        if self.awaiting.is_empty() {
            self.complete_subtree()
        } else {
            Ok(Vec::new())
        }
    }

    // Subkey distribution.
    fn on_subkey(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        let root = self.view.root;
        if self.role == Role::Root {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        let key = if self.options.relay_subkey {
            if self.view.parent != Some(msg.sender) {
                return Err(StepError::UnexpectedKind(msg.kind));
            }
            self.edge_keys.get(&msg.sender).cloned().ok_or(StepError::UnexpectedKind(msg.kind))?
        } else {
            if msg.sender != root {
                return Err(StepError::UnexpectedKind(msg.kind));
            }
            self.agree_key().clone()
        };
        Self::expect_ids(msg, &[root])?;
        let pt = self.open(&key, &msg.payload)?;
        let w = self.suite.key_width();
        let mut r = Reader::new(&pt);
        let (id1, z, nonce1) = match (r.id(), r.key(w), r.u64()) {
            (Some(a), Some(b), Some(c)) if r.remaining() == 0 => (a, b, c),
            _ => return Err(StepError::Malformed),
        };
        if id1 != root {
            return Err(StepError::Malformed);
        }
        self.check_fresh(root, nonce1)?;
        if self.options.relay_subkey
            && self.view.children.iter().any(|c| !self.edge_keys.contains_key(c))
        {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        let echo = succ(nonce1)?;

        let mut out = Vec::new();
        if self.options.relay_subkey {
            for c in self.view.children.clone() {
                let ek = self.edge_keys[&c].clone();
                let payload = self.seal(&ek, &pt)?;
                out.push(ProtocolMessage::new(
                    MessageKind::AgreeStep1,
                    self.my_id,
                    Receiver::Node(c),
                    vec![root],
                    payload,
                ));
            }
        }
        if self.role == Role::Checker {
            let k = z.xor(&self.share)?;
            let nonce_ch = self.nonces.fresh()?;
            let pt = Writer::new()
                .id(self.my_id)
                .key(&self.share)
                .u64(echo)
                .u64(nonce_ch.value)
                .finish();
            let key = self.agree_key().clone();
            let payload = self.seal(&key, &pt)?;
            out.push(ProtocolMessage::new(
                MessageKind::AgreeStep2,
                self.my_id,
                Receiver::Broadcast,
                vec![self.my_id],
                payload,
            ));
            self.session_key = Some(k);
            self.checker_nonce = Some(nonce_ch.value);
            self.seen.insert((self.my_id, nonce_ch.value));
            self.confirm_pending = self.view.members.iter().copied().collect();
        }
        if self.is_level_one() {
            let lk = z.xor(&self.share)?;
            self.local_keys.insert(self.my_id, lk);
        }
        self.seen.insert((root, nonce1));
        self.subkey = Some(z);
        self.root_nonce = Some(nonce1);
        if let Some(d) = self.deferred.take() {
            if let Ok(more) = self.step(&d, 0.0) {
                out.extend(more);
            }
        }
        Ok(out)
    }

    // Checker share broadcast.
    fn on_checker_share(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        let ch = self.view.checker;
        if self.role == Role::Checker || msg.sender != ch {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        Self::expect_ids(msg, &[ch])?;
        let key = self.agree_key().clone();
        let pt = self.open(&key, &msg.payload)?;
        let w = self.suite.key_width();
        let mut r = Reader::new(&pt);
        let (id_ch, s_ch, echo, nonce_ch) = match (r.id(), r.key(w), r.u64(), r.u64()) {
            (Some(a), Some(b), Some(c), Some(d)) if r.remaining() == 0 => (a, b, c, d),
            _ => return Err(StepError::Malformed),
        };
        if id_ch != ch {
            return Err(StepError::Malformed);
        }
        self.check_fresh(ch, nonce_ch)?;
        let in_round = match self.root_nonce {
            Some(n) => self.check_echo(echo, n).is_ok(),
            None => false,
        };
        if !in_round {
            // Authentic but ahead of the subkey relay: hold it for the round.
            if self.role != Role::Root && self.deferred.is_none() {
                self.deferred = Some(msg.clone());
                return Ok(Vec::new());
            }
            return Err(StepError::NonceMismatch);
        }
        let z = self.subkey.clone().ok_or(StepError::UnexpectedKind(msg.kind))?;
        let k = z.xor(&s_ch)?;
        let digest = self
            .suite
            .hash(&Writer::new().id(ch).u64(succ(nonce_ch)?).key(&k).finish());
        self.seen.insert((ch, nonce_ch));
        self.session_key = Some(k);
        self.checker_nonce = Some(nonce_ch);
        Ok(vec![ProtocolMessage::new(
            MessageKind::AgreeStep3,
            self.my_id,
            Receiver::Node(ch),
            vec![self.my_id, ch],
            digest.0,
        )])
    }

    fn on_confirm(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        if self.role != Role::Checker || !self.confirm_pending.contains(&msg.sender) || self.rekey_nonce.is_some() {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        Self::expect_ids(msg, &[msg.sender, self.my_id])?;
        let (k, n) = match (&self.session_key, self.checker_nonce) {
            (Some(k), Some(n)) => (k, n),
            _ => return Err(StepError::UnexpectedKind(msg.kind)),
        };
        let expected = self
            .suite
            .hash(&Writer::new().id(self.my_id).u64(succ(n)?).key(k).finish());
        if expected.0 != msg.payload {
            return Err(StepError::DigestMismatch(msg.sender));
        }
        self.confirm_pending.remove(&msg.sender);
        Ok(Vec::new())
    }

    fn on_global_rekey(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        let ch = self.view.checker;
        if self.role == Role::Checker || msg.sender != ch {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        Self::expect_ids(msg, &[ch])?;
        let gk = self.session_key.clone().ok_or(StepError::UnexpectedKind(msg.kind))?;
        let pt = self.open(&gk, &msg.payload)?;
        let w = self.suite.key_width();
        let mut r = Reader::new(&pt);
        let (id_ch, s, nonce) = match (r.id(), r.key(w), r.u64()) {
            (Some(a), Some(b), Some(c)) if r.remaining() == 0 => (a, b, c),
            _ => return Err(StepError::Malformed),
        };
        if id_ch != ch {
            return Err(StepError::Malformed);
        }
        self.check_fresh(ch, nonce)?;
        let next = gk.xor(&s)?;
        let tag = self.suite.keyed_hash(
            &next,
            &Writer::new().id(self.my_id).id(ch).u64(succ(nonce)?).finish(),
        );
        self.seen.insert((ch, nonce));
        self.session_key = Some(next);
        Ok(vec![ProtocolMessage::new(
            MessageKind::GlobalRekeyConfirm,
            self.my_id,
            Receiver::Node(ch),
            vec![self.my_id, ch],
            tag.0,
        )])
    }

    fn on_global_confirm(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        let nonce = match self.rekey_nonce {
            Some(n) if self.role == Role::Checker && self.confirm_pending.contains(&msg.sender) => n,
            _ => return Err(StepError::UnexpectedKind(msg.kind)),
        };
        Self::expect_ids(msg, &[msg.sender, self.my_id])?;
        let gk = self.session_key.as_ref().ok_or(StepError::UnexpectedKind(msg.kind))?;
        let data = Writer::new().id(msg.sender).id(self.my_id).u64(succ(nonce)?).finish();
        if !self.suite.verify(gk, &data, &Digest(msg.payload.clone())) {
            return Err(StepError::DigestMismatch(msg.sender));
        }
        self.confirm_pending.remove(&msg.sender);
        Ok(Vec::new())
    }

    fn on_local_rekey(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        let j = msg.sender;
        if self.role != Role::Root || !self.view.children.contains(&j) {
            return Err(StepError::UnexpectedKind(msg.kind));
        }
        let old = self.local_keys.get(&j).cloned().ok_or(StepError::UnexpectedKind(msg.kind))?;
        Self::expect_ids(msg, &[j])?;
        let pt = self.open(&old, &msg.payload)?;
        let w = self.suite.key_width();
        let mut r = Reader::new(&pt);
        let (id_j, s, nonce) = match (r.id(), r.key(w), r.u64()) {
            (Some(a), Some(b), Some(c)) if r.remaining() == 0 => (a, b, c),
            _ => return Err(StepError::Malformed),
        };
        if id_j != j {
            return Err(StepError::Malformed);
        }
        self.check_fresh(j, nonce)?;
        let next = old.xor(&s)?;
        self.seen.insert((j, nonce));
        self.local_rekey_in.insert(j, PendingLocalRekey { nonce, next });
        Ok(Vec::new())
    }

    fn on_local_confirm(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>, StepError> {
        let j = msg.sender;
        let pending = self
            .local_rekey_in
            .get(&j)
            .ok_or(StepError::UnexpectedKind(msg.kind))?;
        Self::expect_ids(msg, &[j])?;
        let expected = self.suite.hash(
            &Writer::new()
                .id(j)
                .u64(succ(pending.nonce)?)
                .key(&pending.next)
                .finish(),
        );
        if expected.0 != msg.payload {
            return Err(StepError::DigestMismatch(j));
        }
        let next = pending.next.clone();
        self.local_rekey_in.remove(&j);
        self.local_keys.insert(j, next);
        Ok(Vec::new())
    }

    /// True while a local rekey from `j` awaits its digest.
    pub fn local_rekey_pending(&self, j: NodeId) -> bool {
        self.local_rekey_in.contains_key(&j)
    }

    /// True while the checker waits on global rekey confirmations.
    pub fn global_rekey_pending(&self) -> bool {
        self.rekey_nonce.is_some()
    }
}

/// Functional form of [`NodeProtocolState::step`]: rejected messages return
/// the state unchanged with no output.
pub fn step_node(
    state: &NodeProtocolState,
    msg: &ProtocolMessage,
    now: f64,
) -> (NodeProtocolState, Vec<ProtocolMessage>) {
    let mut next = state.clone();
    match next.step(msg, now) {
        Ok(out) => (next, out),
        Err(_) => (state.clone(), Vec::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn km() -> KeyMaterial {
        KeyMaterial::from_bytes(&[1; 16])
    }

    fn key(b: u8) -> KeyMaterial {
        KeyMaterial::from_bytes(&[b; 16])
    }

    /// Root 1 with children 2 (leaf) and 3 (parent of leaves 5 and 6); checker 4.
    fn small(shares: [u8; 6]) -> BTreeMap<NodeId, NodeProtocolState> {
        let children: BTreeMap<u32, Vec<u32>> =
            BTreeMap::from([(1, vec![2, 3]), (2, vec![]), (3, vec![5, 6]), (4, vec![]), (5, vec![]), (6, vec![])]);
        let parent = BTreeMap::from([(2, 1), (3, 1), (4, 1), (5, 3), (6, 3)]);
        let mut out = BTreeMap::new();
        for (i, id) in [1u32, 2, 3, 4, 5, 6].into_iter().enumerate() {
            let view = TreeView {
                root: NodeId(1),
                checker: NodeId(4),
                parent: parent.get(&id).map(|p| NodeId(*p)),
                children: children[&id].iter().map(|c| NodeId(*c)).collect(),
                members: vec![NodeId(1), NodeId(2), NodeId(3), NodeId(5), NodeId(6)],
            };
            let mut n = NodeProtocolState::new(
                NodeId(id),
                Suite::default(),
                ProtocolOptions::default(),
                view,
                km(),
                key(shares[i]),
                id as u64,
            );
            n.begin_full_initiation();
            out.insert(NodeId(id), n);
        }
        out
    }

    fn run(nodes: &mut BTreeMap<NodeId, NodeProtocolState>, start: Vec<ProtocolMessage>) -> Vec<ProtocolMessage> {
        let mut log = Vec::new();
        let mut q: VecDeque<ProtocolMessage> = start.into();
        while let Some(m) = q.pop_front() {
            log.push(m.clone());
            let targets: Vec<NodeId> = nodes.keys().copied().filter(|n| m.is_for(*n)).collect();
            for t in targets {
                if let Ok(out) = nodes.get_mut(&t).unwrap().step(&m, 0.0) {
                    q.extend(out);
                }
            }
        }
        log
    }

    fn initiate(nodes: &mut BTreeMap<NodeId, NodeProtocolState>) -> Vec<ProtocolMessage> {
        let mut start = Vec::new();
        for n in nodes.values_mut() {
            start.extend(n.start_initiation().unwrap());
        }
        run(nodes, start)
    }

    fn intermediate_sent_by(log: &[ProtocolMessage], node: u32, receiver: &NodeProtocolState) -> KeyMaterial {
        let m = log
            .iter()
            .find(|m| m.kind == MessageKind::AuthStep3 && m.sender == NodeId(node))
            .unwrap();
        let pt = receiver
            .suite
            .decrypt(&km(), &Ciphertext(m.payload.clone()))
            .unwrap();
        KeyMaterial::from_bytes(&pt[16..32])
    }

    #[test]
    fn leaf_with_zero_share_sends_zero_intermediate() {
        let mut nodes = small([9, 0, 3, 4, 5, 6]);
        let log = initiate(&mut nodes);
        let k = intermediate_sent_by(&log, 2, &nodes[&NodeId(1)]);
        assert!(k.is_zero());
    }

    #[test]
    fn parent_folds_children_into_its_intermediate() {
        let mut nodes = small([9, 2, 0x30, 4, 0x05, 0x60]);
        let log = initiate(&mut nodes);
        let k = intermediate_sent_by(&log, 3, &nodes[&NodeId(1)]);
        assert_eq!(k, key(0x30).xor(&key(0x05)).unwrap().xor(&key(0x60)).unwrap());
        let z = nodes[&NodeId(1)].subkey().unwrap().clone();
        assert_eq!(z, xor_all(&[9, 2, 0x30, 0x05, 0x60]));
    }

    fn xor_all(bytes: &[u8]) -> KeyMaterial {
        key(bytes.iter().fold(0, |a, b| a ^ b))
    }

    #[test]
    fn replayed_auth_step1_changes_nothing() {
        let mut nodes = small([1, 2, 3, 4, 5, 6]);
        let log = initiate(&mut nodes);
        for m in log.iter().filter(|m| m.kind == MessageKind::AuthStep1) {
            let Receiver::Node(to) = m.receiver else { unreachable!() };
            let before = nodes[&to].clone();
            let (after, out) = step_node(&before, m, 1.0);
            assert_eq!(after, before);
            assert!(out.is_empty());
            assert!(nodes.get_mut(&to).unwrap().step(m, 1.0).is_err());
            assert_eq!(nodes[&to], before);
        }
    }

    #[test]
    fn replay_into_a_new_round_is_a_nonce_mismatch() {
        let mut nodes = small([1, 2, 3, 4, 5, 6]);
        let log = initiate(&mut nodes);
        for n in nodes.values_mut() {
            n.begin_full_initiation();
        }
        let m = log
            .iter()
            .find(|m| m.kind == MessageKind::AuthStep1 && m.sender == NodeId(5))
            .unwrap();
        let before = nodes[&NodeId(3)].clone();
        assert_eq!(
            nodes.get_mut(&NodeId(3)).unwrap().step(m, 2.0),
            Err(StepError::NonceMismatch)
        );
        assert_eq!(nodes[&NodeId(3)], before);
    }

    #[test]
    fn wrong_key_is_an_integrity_failure() {
        let mut nodes = small([1, 2, 3, 4, 5, 6]);
        let mut m = nodes.get_mut(&NodeId(5)).unwrap().start_initiation().unwrap().remove(0);
        m.payload[20] ^= 1;
        assert_eq!(
            nodes.get_mut(&NodeId(3)).unwrap().step(&m, 0.0),
            Err(StepError::IntegrityFailure)
        );
    }

    #[test]
    fn header_ids_must_match_plaintext() {
        let mut nodes = small([1, 2, 3, 4, 5, 6]);
        let mut m = nodes.get_mut(&NodeId(5)).unwrap().start_initiation().unwrap().remove(0);
        m.ids = vec![NodeId(6), NodeId(3)];
        m.sender = NodeId(6);
        assert_eq!(
            nodes.get_mut(&NodeId(3)).unwrap().step(&m, 0.0),
            Err(StepError::Malformed)
        );
    }

    #[test]
    fn wrong_role_is_unexpected() {
        let mut nodes = small([1, 2, 3, 4, 5, 6]);
        let m = nodes.get_mut(&NodeId(5)).unwrap().start_initiation().unwrap().remove(0);
        let mut fake = m.clone();
        fake.receiver = Receiver::Node(NodeId(2));
        assert_eq!(
            nodes.get_mut(&NodeId(2)).unwrap().step(&fake, 0.0),
            Err(StepError::UnexpectedKind(MessageKind::AuthStep1))
        );
        assert_eq!(
            nodes.get_mut(&NodeId(6)).unwrap().step(&m, 0.0),
            Err(StepError::NotAddressed)
        );
    }

    #[test]
    fn full_agreement_between_hand_built_nodes() {
        let mut nodes = small([1, 2, 3, 4, 5, 6]);
        initiate(&mut nodes);
        let start = nodes.get_mut(&NodeId(1)).unwrap().start_agreement().unwrap();
        run(&mut nodes, start);
        let gk = xor_all(&[1, 2, 3, 4, 5, 6]);
        for n in nodes.values() {
            assert_eq!(n.session_key(), Some(&gk));
        }
        assert!(nodes[&NodeId(4)].confirmations_outstanding().is_empty());
    }
}

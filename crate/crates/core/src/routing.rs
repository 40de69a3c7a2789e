//! Chord identifier ring.
//!
//! Node addresses and file names are hashed with SHA-1 into one 160-bit
//! circular identifier space. A file is owned by its successor: the first
//! member whose id is greater than or equal to the file's id, wrapping past
//! zero. Every member carries a full finger table (`finger[i]` = successor of
//! `id + 2^i`) so lookups can also be routed the way a Chord node would route
//! them, in a logarithmic number of hops.

use std::fmt;
use std::sync::{Arc, RwLock};

use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::transport::NodeAddr;

pub const ID_BITS: usize = 160;
const ID_BYTES: usize = ID_BITS / 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("cannot hash an empty name")]
    EmptyName,
    #[error("ring has no members")]
    EmptyRing,
    #[error("{0} is already a ring member")]
    DuplicateMember(NodeAddr),
    #[error("{0} hashes onto an occupied ring position")]
    IdCollision(NodeAddr),
    #[error("{0} is not a ring member")]
    UnknownMember(NodeAddr),
}

/// A 160-bit identifier, stored big-endian so byte order is numeric order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId([u8; ID_BYTES]);

impl NodeId {
    pub const ZERO: NodeId = NodeId([0; ID_BYTES]);

    pub fn from_bytes(b: [u8; ID_BYTES]) -> Self {
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; ID_BYTES] {
        &self.0
    }

    /// Small identifiers for hand-built test rings.
    pub fn from_u64(v: u64) -> Self {
        let mut b = [0u8; ID_BYTES];
        b[ID_BYTES - 8..].copy_from_slice(&v.to_be_bytes());
        Self(b)
    }

    /// `self + 2^bit (mod 2^160)`.
    pub fn add_pow2(&self, bit: usize) -> Self {
        assert!(bit < ID_BITS);
        let mut b = self.0;
        let mut idx = ID_BYTES - 1 - bit / 8;
        let mut carry = 1u16 << (bit % 8);
        loop {
            let sum = b[idx] as u16 + carry;
            b[idx] = sum as u8;
            carry = sum >> 8;
            if carry == 0 || idx == 0 {
                break;
            }
            idx -= 1;
        }
        Self(b)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fraction of the way around the ring, for drawing.
    pub fn ring_fraction(&self) -> f64 {
        let hi = u64::from_be_bytes(self.0[..8].try_into().unwrap());
        hi as f64 / 2f64.powi(64)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-1 of the UTF-8 bytes of `name`.
pub fn hash_name(name: &str) -> Result<NodeId, RoutingError> {
    if name.is_empty() {
        return Err(RoutingError::EmptyName);
    }
    let digest = Sha1::digest(name.as_bytes());
    Ok(NodeId(digest.as_slice().try_into().expect("sha1 digest is 20 bytes")))
}

/// `x ∈ (a, b]` on the circle. When `a == b` the interval is the whole circle.
pub fn in_half_open(a: &NodeId, x: &NodeId, b: &NodeId) -> bool {
    if a < b {
        a < x && x <= b
    } else {
        x > a || x <= b
    }
}

/// `x ∈ (a, b)` on the circle. When `a == b` this is everything except `a`.
pub fn in_open(a: &NodeId, x: &NodeId, b: &NodeId) -> bool {
    if a < b {
        a < x && x < b
    } else {
        x > a || x < b
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub id: NodeId,
    pub addr: NodeAddr,
}

/// Result of a finger-routed lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub owner: Member,
    /// Members that executed the lookup, in order, starting with the origin.
    pub visited: Vec<NodeAddr>,
}

impl Route {
    /// Forwarding steps between members (origin excluded).
    pub fn hops(&self) -> usize {
        self.visited.len() - 1
    }
}

/// One immutable epoch of ring membership.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RingView {
    epoch: u64,
    members: Vec<Member>,
    /// `fingers[m][i]` indexes into `members`.
    fingers: Vec<Vec<u32>>,
}

impl RingView {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from explicit ids (test rings, truncated spaces).
    pub fn from_members(members: impl IntoIterator<Item = (NodeId, NodeAddr)>) -> Result<Self, RoutingError> {
        let mut v: Vec<Member> = Vec::new();
        for (id, addr) in members {
            if v.iter().any(|m| m.addr == addr) {
                return Err(RoutingError::DuplicateMember(addr));
            }
            if v.iter().any(|m| m.id == id) {
                return Err(RoutingError::IdCollision(addr));
            }
            v.push(Member { id, addr });
        }
        Ok(Self::rebuild(0, v))
    }

    /// Build from addresses, each placed at `hash_name(addr)`.
    pub fn from_addrs<'a>(addrs: impl IntoIterator<Item = &'a NodeAddr>) -> Result<Self, RoutingError> {
        let mut ring = Self::empty();
        for a in addrs {
            ring = ring.join(a)?;
        }
        Ok(ring.with_epoch(0))
    }

    fn rebuild(epoch: u64, mut members: Vec<Member>) -> Self {
        members.sort_by_key(|a| a.id);
        let mut ring = Self { epoch, members, fingers: Vec::new() };
        ring.fingers = ring
            .members
            .iter()
            .map(|m| (0..ID_BITS).map(|i| ring.successor_index(&m.id.add_pow2(i)) as u32).collect())
            .collect();
        ring
    }

    fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn addrs(&self) -> Vec<NodeAddr> {
        self.members.iter().map(|m| m.addr.clone()).collect()
    }

    pub fn contains(&self, addr: &NodeAddr) -> bool {
        self.members.iter().any(|m| &m.addr == addr)
    }

    pub fn contains_host(&self, host: &str) -> bool {
        self.members.iter().any(|m| m.addr.host() == host)
    }

    fn index_of(&self, addr: &NodeAddr) -> Option<usize> {
        self.members.iter().position(|m| &m.addr == addr)
    }

    fn successor_index(&self, id: &NodeId) -> usize {
        let i = self.members.partition_point(|m| m.id < *id);
        if i == self.members.len() {
            0
        } else {
            i
        }
    }

    /// Owner of `id`: smallest member id `>= id`, wrapping.
    pub fn find_successor(&self, id: &NodeId) -> Result<&Member, RoutingError> {
        if self.members.is_empty() {
            return Err(RoutingError::EmptyRing);
        }
        Ok(&self.members[self.successor_index(id)])
    }

    pub fn owner_of(&self, name: &str) -> Result<&Member, RoutingError> {
        self.find_successor(&hash_name(name)?)
    }

    /// The member after `addr` in ring order.
    pub fn successor_of(&self, addr: &NodeAddr) -> Result<&Member, RoutingError> {
        let i = self.index_of(addr).ok_or_else(|| RoutingError::UnknownMember(addr.clone()))?;
        Ok(&self.members[(i + 1) % self.members.len()])
    }

    /// Finger table of a member: 160 entries, `entry[i]` = successor(id + 2^i).
    pub fn fingers_of(&self, addr: &NodeAddr) -> Result<Vec<&Member>, RoutingError> {
        let i = self.index_of(addr).ok_or_else(|| RoutingError::UnknownMember(addr.clone()))?;
        Ok(self.fingers[i].iter().map(|&f| &self.members[f as usize]).collect())
    }

    /// Route a lookup the Chord way, starting at member `from`.
    pub fn route(&self, from: &NodeAddr, id: &NodeId) -> Result<Route, RoutingError> {
        if self.members.is_empty() {
            return Err(RoutingError::EmptyRing);
        }
        let n = self.members.len();
        let mut cur = self.index_of(from).ok_or_else(|| RoutingError::UnknownMember(from.clone()))?;
        let mut visited = vec![self.members[cur].addr.clone()];
        loop {
            let me = &self.members[cur];
            let pred = &self.members[(cur + n - 1) % n];
            if in_half_open(&pred.id, id, &me.id) {
                return Ok(Route { owner: me.clone(), visited });
            }
            let succ_idx = self.fingers[cur][0] as usize;
            let succ = &self.members[succ_idx];
            if in_half_open(&me.id, id, &succ.id) {
                return Ok(Route { owner: succ.clone(), visited });
            }
            let next = self.closest_preceding_finger(cur, id);
            cur = if next == cur { succ_idx } else { next };
            visited.push(self.members[cur].addr.clone());
        }
    }

    fn closest_preceding_finger(&self, cur: usize, id: &NodeId) -> usize {
        let me = &self.members[cur].id;
        for &f in self.fingers[cur].iter().rev() {
            let f = f as usize;
            if in_open(me, &self.members[f].id, id) {
                return f;
            }
        }
        cur
    }

    /// New epoch with `addr` inserted at `hash_name(addr)`.
    pub fn join(&self, addr: &NodeAddr) -> Result<Self, RoutingError> {
        if self.contains(addr) {
            return Err(RoutingError::DuplicateMember(addr.clone()));
        }
        let id = hash_name(addr.as_str())?;
        if self.members.iter().any(|m| m.id == id) {
            return Err(RoutingError::IdCollision(addr.clone()));
        }
        let mut members = self.members.clone();
        members.push(Member { id, addr: addr.clone() });
        Ok(Self::rebuild(self.epoch + 1, members))
    }

    /// New epoch without `addr`.
    pub fn leave(&self, addr: &NodeAddr) -> Result<Self, RoutingError> {
        let i = self.index_of(addr).ok_or_else(|| RoutingError::UnknownMember(addr.clone()))?;
        let mut members = self.members.clone();
        members.remove(i);
        Ok(Self::rebuild(self.epoch + 1, members))
    }

    /// Same membership, ignoring epoch.
    pub fn same_members(&self, other: &RingView) -> bool {
        self.members == other.members
    }
}

/// Which of `ids` change owner between two epochs: `(id, old, new)`.
pub fn ownership_changes<'a>(
    old: &RingView,
    new: &RingView,
    ids: impl IntoIterator<Item = &'a NodeId>,
) -> Vec<(NodeId, Option<NodeAddr>, Option<NodeAddr>)> {
    ids.into_iter()
        .filter_map(|id| {
            let a = old.find_successor(id).ok().map(|m| m.addr.clone());
            let b = new.find_successor(id).ok().map(|m| m.addr.clone());
            (a != b).then_some((*id, a, b))
        })
        .collect()
}

/// The current epoch, swapped atomically on membership change. Readers get
/// an `Arc` snapshot and never block writers for long.
#[derive(Debug, Clone, Default)]
pub struct SharedRing(Arc<RwLock<Arc<RingView>>>);

impl SharedRing {
    pub fn new(ring: RingView) -> Self {
        Self(Arc::new(RwLock::new(Arc::new(ring))))
    }

    pub fn current(&self) -> Arc<RingView> {
        self.0.read().unwrap().clone()
    }

    pub fn install(&self, ring: RingView) {
        *self.0.write().unwrap() = Arc::new(ring);
    }
}

//! Self-destructive storage.
//!
//! A slot can be pinged by anyone without revealing its value, read exactly
//! once (the read empties it), and refilled only by the source holding the
//! slot's [`SourceCapability`] or by the single-use [`ReinsertPermit`] that
//! the read handed out.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub u64);

impl std::fmt::Display for SlotId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "slot#{}", self.0)
    }
}

/// Write authority over a fixed set of slots. Only [`DestructiveStore::grant_source`]
/// creates one.
#[derive(Debug, PartialEq, Eq)]
pub struct SourceCapability {
    store: [u8; 16],
    id: [u8; 16],
    scope: BTreeSet<SlotId>,
}

impl SourceCapability {
    pub fn scope(&self) -> &BTreeSet<SlotId> {
        &self.scope
    }
}

/// Delegated source permission to put a taken value back. Issued by `take`,
/// honoured once, for the same slot and the same value only.
#[derive(Debug)]
pub struct ReinsertPermit {
    slot: SlotId,
    permit: u64,
    digest: [u8; 32],
}

impl ReinsertPermit {
    pub fn slot(&self) -> SlotId {
        self.slot
    }

    /// Single use is enforced by the store, so this is always true.
    pub fn single_use(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Presence {
    Present,
    Absent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SlotHistory {
    pub fills: u64,
    pub takes: u64,
    pub reinserts: u64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0} is already in use")]
    SlotIdTaken(SlotId),
    #[error("capability does not cover {0}")]
    Unauthorized(SlotId),
    #[error("{0} is full")]
    SlotFull(SlotId),
    #[error("{0} is empty")]
    SlotEmpty(SlotId),
    #[error("{0} does not exist")]
    UnknownSlot(SlotId),
    #[error("reinsert permit already used")]
    PermitUsed,
    #[error("reinserted value differs from the taken value")]
    ValueMismatch,
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum JournalOp {
    Grant = 0,
    Insert = 1,
    Take = 2,
    Reinsert = 3,
}

impl JournalOp {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => JournalOp::Grant,
            1 => JournalOp::Insert,
            2 => JournalOp::Take,
            3 => JournalOp::Reinsert,
            _ => return None,
        })
    }
}

/// One journal entry. On disk: `u32` length (always 49), then sequence
/// number, op, slot id, value digest; all big-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub seq: u64,
    pub op: JournalOp,
    pub slot: SlotId,
    pub digest: [u8; 32],
}

const RECORD_LEN: u32 = 8 + 1 + 8 + 32;

impl JournalRecord {
    fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&RECORD_LEN.to_be_bytes())?;
        w.write_all(&self.seq.to_be_bytes())?;
        w.write_all(&[self.op as u8])?;
        w.write_all(&self.slot.0.to_be_bytes())?;
        w.write_all(&self.digest)
    }

    pub fn read_all(path: impl AsRef<Path>) -> io::Result<Vec<JournalRecord>> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut out = Vec::new();
        let mut rest = buf.as_slice();
        while !rest.is_empty() {
            if rest.len() < 4 {
                return Err(bad("truncated length prefix"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap());
            if len != RECORD_LEN || rest.len() < 4 + len as usize {
                return Err(bad("bad record length"));
            }
            let r = &rest[4..4 + len as usize];
            out.push(JournalRecord {
                seq: u64::from_be_bytes(r[0..8].try_into().unwrap()),
                op: JournalOp::from_u8(r[8]).ok_or_else(|| bad("unknown op"))?,
                slot: SlotId(u64::from_be_bytes(r[9..17].try_into().unwrap())),
                digest: r[17..49].try_into().unwrap(),
            });
            rest = &rest[4 + len as usize..];
        }
        Ok(out)
    }

    /// Rebuilds slot presence from a journal.
    pub fn replay(records: &[JournalRecord]) -> BTreeMap<SlotId, Presence> {
        let mut out = BTreeMap::new();
        for r in records {
            let p = match r.op {
                JournalOp::Grant | JournalOp::Take => Presence::Absent,
                JournalOp::Insert | JournalOp::Reinsert => Presence::Present,
            };
            out.insert(r.slot, p);
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    value: Option<Vec<u8>>,
    history: SlotHistory,
}

#[derive(Debug, Default)]
struct Inner {
    slots: BTreeMap<SlotId, Slot>,
    caps: HashMap<[u8; 16], BTreeSet<SlotId>>,
    live_permits: HashSet<u64>,
    next_permit: u64,
    seq: u64,
    journal: Option<BufWriter<File>>,
}

impl Inner {
    fn log(&mut self, op: JournalOp, slot: SlotId, digest: [u8; 32]) -> Result<(), StoreError> {
        self.seq += 1;
        if let Some(j) = self.journal.as_mut() {
            JournalRecord {
                seq: self.seq,
                op,
                slot,
                digest,
            }
            .write_to(j)?;
            j.flush()?;
        }
        Ok(())
    }

    fn slot_mut(&mut self, slot: SlotId) -> Result<&mut Slot, StoreError> {
        self.slots.get_mut(&slot).ok_or(StoreError::UnknownSlot(slot))
    }
}

fn digest(value: &[u8]) -> [u8; 32] {
    Sha256::digest(value).into()
}

/// In-memory destructive store. Every operation holds one lock, so `take`
/// and `insert` are atomic per slot.
#[derive(Debug)]
pub struct DestructiveStore {
    id: [u8; 16],
    inner: Mutex<Inner>,
}

impl Default for DestructiveStore {
    fn default() -> Self {
        Self::new()
    }
}

impl DestructiveStore {
    pub fn new() -> Self {
        let mut id = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut id);
        DestructiveStore {
            id,
            inner: Mutex::new(Inner::default()),
        }
    }

    /// A store that appends every mutation to `path`.
    pub fn with_journal(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let store = Self::new();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.lock().journal = Some(BufWriter::new(file));
        Ok(store)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Smallest id above every slot currently known.
    pub fn next_slot_id(&self) -> SlotId {
        let g = self.lock();
        SlotId(g.slots.keys().next_back().map_or(1, |s| s.0 + 1))
    }

    pub fn grant_source(
        &self,
        scope: impl IntoIterator<Item = SlotId>,
    ) -> Result<SourceCapability, StoreError> {
        let scope: BTreeSet<SlotId> = scope.into_iter().collect();
        let mut g = self.lock();
        if let Some(taken) = scope.iter().find(|s| g.slots.contains_key(s)) {
            return Err(StoreError::SlotIdTaken(*taken));
        }
        for s in &scope {
            g.slots.insert(*s, Slot::default());
            g.log(JournalOp::Grant, *s, [0; 32])?;
        }
        let mut id = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut id);
        g.caps.insert(id, scope.clone());
        Ok(SourceCapability {
            store: self.id,
            id,
            scope,
        })
    }

    fn authorized(&self, g: &Inner, cap: &SourceCapability, slot: SlotId) -> bool {
        cap.store == self.id
            && g.caps.get(&cap.id).is_some_and(|scope| scope.contains(&slot))
    }

    pub fn insert(&self, cap: &SourceCapability, slot: SlotId, value: Vec<u8>) -> Result<(), StoreError> {
        let mut g = self.lock();
        if !self.authorized(&g, cap, slot) {
            return Err(StoreError::Unauthorized(slot));
        }
        let d = digest(&value);
        let s = g.slot_mut(slot)?;
        if s.value.is_some() {
            return Err(StoreError::SlotFull(slot));
        }
        s.value = Some(value);
        s.history.fills += 1;
        g.log(JournalOp::Insert, slot, d)
    }

    pub fn ping(&self, slot: SlotId) -> Result<Presence, StoreError> {
        let g = self.lock();
        let s = g.slots.get(&slot).ok_or(StoreError::UnknownSlot(slot))?;
        Ok(if s.value.is_some() {
            Presence::Present
        } else {
            Presence::Absent
        })
    }

    /// Destructive read. Open to any caller; authorization of who may trigger
    /// a take lives in the protocol layer.
    pub fn take(&self, slot: SlotId) -> Result<(Vec<u8>, ReinsertPermit), StoreError> {
        let mut g = self.lock();
        let s = g.slot_mut(slot)?;
        let value = s.value.take().ok_or(StoreError::SlotEmpty(slot))?;
        s.history.takes += 1;
        let d = digest(&value);
        g.next_permit += 1;
        let permit = g.next_permit;
        g.live_permits.insert(permit);
        g.log(JournalOp::Take, slot, d)?;
        Ok((
            value,
            ReinsertPermit {
                slot,
                permit,
                digest: d,
            },
        ))
    }

    pub fn reinsert(&self, permit: &ReinsertPermit, value: Vec<u8>) -> Result<(), StoreError> {
        let mut g = self.lock();
        if !g.live_permits.contains(&permit.permit) {
            return Err(StoreError::PermitUsed);
        }
        let d = digest(&value);
        let s = g.slot_mut(permit.slot)?;
        if s.value.is_some() {
            return Err(StoreError::SlotFull(permit.slot));
        }
        if d != permit.digest {
            return Err(StoreError::ValueMismatch);
        }
        s.value = Some(value);
        s.history.fills += 1;
        s.history.reinserts += 1;
        g.live_permits.remove(&permit.permit);
        g.log(JournalOp::Reinsert, permit.slot, d)
    }

    pub fn history(&self, slot: SlotId) -> Result<SlotHistory, StoreError> {
        let g = self.lock();
        g.slots
            .get(&slot)
            .map(|s| s.history)
            .ok_or(StoreError::UnknownSlot(slot))
    }

    /// Presence bit of every slot; this is all a memory snapshot exposes.
    pub fn presence(&self) -> BTreeMap<SlotId, Presence> {
        let g = self.lock();
        g.slots
            .iter()
            .map(|(id, s)| {
                let p = if s.value.is_some() {
                    Presence::Present
                } else {
                    Presence::Absent
                };
                (*id, p)
            })
            .collect()
    }

    /// Digest over every slot's contents and history. Test hook for
    /// "this operation did not change state".
    pub fn state_digest(&self) -> [u8; 32] {
        let g = self.lock();
        let mut h = Sha256::new();
        for (id, s) in &g.slots {
            h.update(id.0.to_be_bytes());
            match &s.value {
                Some(v) => {
                    h.update([1]);
                    h.update(digest(v));
                }
                None => h.update([0]),
            }
            h.update(s.history.fills.to_be_bytes());
            h.update(s.history.takes.to_be_bytes());
            h.update(s.history.reinserts.to_be_bytes());
        }
        h.finalize().into()
    }

    /// Independent copy with the same contents and capabilities, without the
    /// journal. Used to evaluate hypothetical takes without disturbing the
    /// original.
    pub fn fork(&self) -> DestructiveStore {
        let g = self.lock();
        DestructiveStore {
            id: self.id,
            inner: Mutex::new(Inner {
                slots: g.slots.clone(),
                caps: g.caps.clone(),
                live_permits: g.live_permits.clone(),
                next_permit: g.next_permit,
                seq: g.seq,
                journal: None,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Arc, Barrier};

    fn store_with(slot: u64) -> (DestructiveStore, SourceCapability) {
        let store = DestructiveStore::new();
        let cap = store.grant_source([SlotId(slot)]).unwrap();
        (store, cap)
    }

    #[test]
    fn grant_covers_its_scope_only() {
        let store = DestructiveStore::new();
        let cap = store.grant_source([SlotId(1)]).unwrap();
        store.grant_source([SlotId(2)]).unwrap();
        store.insert(&cap, SlotId(1), b"v".to_vec()).unwrap();
        assert!(matches!(
            store.insert(&cap, SlotId(2), b"v".to_vec()),
            Err(StoreError::Unauthorized(SlotId(2)))
        ));
        assert!(matches!(
            store.grant_source([SlotId(1)]),
            Err(StoreError::SlotIdTaken(SlotId(1)))
        ));
    }

    #[test]
    fn forged_capabilities_are_rejected() {
        let (store, _cap) = store_with(1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let forged = SourceCapability {
                store: if rng.gen_bool(0.5) { store.id } else { rng.gen() },
                id: rng.gen(),
                scope: [SlotId(1)].into(),
            };
            assert!(matches!(
                store.insert(&forged, SlotId(1), b"x".to_vec()),
                Err(StoreError::Unauthorized(_))
            ));
        }
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Absent);
    }

    #[test]
    fn capability_from_another_store_is_rejected() {
        let (a, _) = store_with(1);
        let (_b, cap_b) = store_with(1);
        assert!(matches!(
            a.insert(&cap_b, SlotId(1), b"x".to_vec()),
            Err(StoreError::Unauthorized(_))
        ));
    }

    #[test]
    fn insert_ping_take_cycle() {
        let (store, cap) = store_with(1);
        store.insert(&cap, SlotId(1), b"Y".to_vec()).unwrap();
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Present);
        assert!(matches!(
            store.insert(&cap, SlotId(1), b"Z".to_vec()),
            Err(StoreError::SlotFull(_))
        ));
        let (v, _permit) = store.take(SlotId(1)).unwrap();
        assert_eq!(v, b"Y");
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Absent);
        assert!(matches!(store.take(SlotId(1)), Err(StoreError::SlotEmpty(_))));
        // The source may refill.
        store.insert(&cap, SlotId(1), b"Y2".to_vec()).unwrap();
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Present);
        assert_eq!(
            store.history(SlotId(1)).unwrap(),
            SlotHistory {
                fills: 2,
                takes: 1,
                reinserts: 0
            }
        );
    }

    #[test]
    fn unknown_slot() {
        let store = DestructiveStore::new();
        assert!(matches!(store.ping(SlotId(5)), Err(StoreError::UnknownSlot(_))));
        assert!(matches!(store.take(SlotId(5)), Err(StoreError::UnknownSlot(_))));
    }

    #[test]
    fn ping_is_idempotent() {
        let (store, cap) = store_with(1);
        store.insert(&cap, SlotId(1), b"Y".to_vec()).unwrap();
        let before = store.state_digest();
        for _ in 0..100 {
            assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Present);
        }
        assert_eq!(store.state_digest(), before);
    }

    #[test]
    fn reinsert_restores_once() {
        let (store, cap) = store_with(1);
        store.insert(&cap, SlotId(1), b"Ea".to_vec()).unwrap();
        let (v, permit) = store.take(SlotId(1)).unwrap();
        assert!(permit.single_use());
        store.reinsert(&permit, v.clone()).unwrap();
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Present);
        store.take(SlotId(1)).unwrap();
        assert!(matches!(store.reinsert(&permit, v), Err(StoreError::PermitUsed)));
    }

    #[test]
    fn reinsert_rejects_mutated_values() {
        let (store, cap) = store_with(1);
        let value: Vec<u8> = (0..64).collect();
        store.insert(&cap, SlotId(1), value.clone()).unwrap();
        let (v, permit) = store.take(SlotId(1)).unwrap();
        for i in 0..v.len() {
            let mut m = v.clone();
            m[i] ^= 0x01;
            assert!(matches!(store.reinsert(&permit, m), Err(StoreError::ValueMismatch)));
        }
        // A mismatch does not burn the permit.
        store.reinsert(&permit, value).unwrap();
    }

    #[test]
    fn reinsert_into_refilled_slot_is_rejected() {
        let (store, cap) = store_with(1);
        store.insert(&cap, SlotId(1), b"a".to_vec()).unwrap();
        let (v, permit) = store.take(SlotId(1)).unwrap();
        store.insert(&cap, SlotId(1), b"b".to_vec()).unwrap();
        assert!(matches!(store.reinsert(&permit, v), Err(StoreError::SlotFull(_))));
    }

    #[test]
    fn concurrent_takes_have_one_winner() {
        for _ in 0..50 {
            let (store, cap) = store_with(1);
            store.insert(&cap, SlotId(1), b"v".to_vec()).unwrap();
            let store = Arc::new(store);
            let n = 8;
            let barrier = Arc::new(Barrier::new(n));
            let handles: Vec<_> = (0..n)
                .map(|_| {
                    let s = Arc::clone(&store);
                    let b = Arc::clone(&barrier);
                    std::thread::spawn(move || {
                        b.wait();
                        s.take(SlotId(1)).is_ok()
                    })
                })
                .collect();
            let wins = handles
                .into_iter()
                .map(|h| h.join().unwrap())
                .filter(|won| *won)
                .count();
            assert_eq!(wins, 1);
        }
    }

    #[test]
    fn fork_is_independent() {
        let (store, cap) = store_with(1);
        store.insert(&cap, SlotId(1), b"v".to_vec()).unwrap();
        let f = store.fork();
        f.take(SlotId(1)).unwrap();
        assert_eq!(store.ping(SlotId(1)).unwrap(), Presence::Present);
        assert_eq!(f.ping(SlotId(1)).unwrap(), Presence::Absent);
    }

    #[test]
    fn journal_records_every_mutation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.journal");
        let store = DestructiveStore::with_journal(&path).unwrap();
        let cap = store.grant_source([SlotId(1), SlotId(2)]).unwrap();
        store.insert(&cap, SlotId(1), b"a".to_vec()).unwrap();
        store.insert(&cap, SlotId(2), b"b".to_vec()).unwrap();
        let (v, permit) = store.take(SlotId(1)).unwrap();
        store.reinsert(&permit, v).unwrap();
        store.take(SlotId(2)).unwrap();
        store.ping(SlotId(1)).unwrap();
        drop(store);

        let records = JournalRecord::read_all(&path).unwrap();
        let ops: Vec<_> = records.iter().map(|r| (r.op, r.slot.0)).collect();
        assert_eq!(
            ops,
            vec![
                (JournalOp::Grant, 1),
                (JournalOp::Grant, 2),
                (JournalOp::Insert, 1),
                (JournalOp::Insert, 2),
                (JournalOp::Take, 1),
                (JournalOp::Reinsert, 1),
                (JournalOp::Take, 2),
            ]
        );
        assert!(records.windows(2).all(|w| w[0].seq < w[1].seq));
        assert_eq!(records[2].digest, digest(b"a"));
        let replayed = JournalRecord::replay(&records);
        assert_eq!(replayed[&SlotId(1)], Presence::Present);
        assert_eq!(replayed[&SlotId(2)], Presence::Absent);
    }
}

//! Bounded local cache with least-recently-used eviction. Pinned entries
//! (records still waiting in the outbox) are never evicted.

use std::collections::{BTreeMap, HashMap};

use crate::id::RecordId;
use crate::store::StoredRecord;

#[derive(Debug, Clone)]
struct Slot {
    record: StoredRecord,
    touched: u64,
    pinned: bool,
}

#[derive(Debug, Clone)]
pub struct LocalCache {
    capacity: usize,
    clock: u64,
    slots: HashMap<RecordId, Slot>,
    recency: BTreeMap<u64, RecordId>,
}

impl LocalCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "local capacity must be positive");
        Self {
            capacity,
            clock: 0,
            slots: HashMap::new(),
            recency: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, id: RecordId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn get(&self, id: RecordId) -> Option<&StoredRecord> {
        self.slots.get(&id).map(|s| &s.record)
    }

    pub fn is_pinned(&self, id: RecordId) -> bool {
        self.slots.get(&id).is_some_and(|s| s.pinned)
    }

    pub fn records(&self) -> impl Iterator<Item = &StoredRecord> {
        self.slots.values().map(|s| &s.record)
    }

    /// Ids from least to most recently used.
    pub fn lru_order(&self) -> Vec<RecordId> {
        self.recency.values().copied().collect()
    }

    fn bump(&mut self, id: RecordId) {
        self.clock += 1;
        let slot = self.slots.get_mut(&id).expect("bumped id is cached");
        self.recency.remove(&slot.touched);
        slot.touched = self.clock;
        self.recency.insert(self.clock, id);
    }

    /// Inserts or refreshes a record as most recently used and returns the
    /// ids evicted to get back under capacity.
    pub fn put(&mut self, record: StoredRecord) -> Vec<RecordId> {
        let id = record.pip.record_id();
        match self.slots.get_mut(&id) {
            Some(slot) => slot.record = record,
            None => {
                self.slots.insert(
                    id,
                    Slot {
                        record,
                        touched: 0,
                        pinned: false,
                    },
                );
            }
        }
        self.bump(id);
        self.evict_over_capacity()
    }

    /// Marks a record as recently used. Returns false if it is not cached.
    pub fn touch(&mut self, id: RecordId) -> bool {
        if self.slots.contains_key(&id) {
            self.bump(id);
            true
        } else {
            false
        }
    }

    pub fn pin(&mut self, id: RecordId) -> bool {
        match self.slots.get_mut(&id) {
            Some(slot) => {
                slot.pinned = true;
                true
            }
            None => false,
        }
    }

    /// Unpinning may make the record evictable right away.
    pub fn unpin(&mut self, id: RecordId) -> Vec<RecordId> {
        if let Some(slot) = self.slots.get_mut(&id) {
            slot.pinned = false;
        }
        self.evict_over_capacity()
    }

    pub fn remove(&mut self, id: RecordId) -> Option<StoredRecord> {
        let slot = self.slots.remove(&id)?;
        self.recency.remove(&slot.touched);
        Some(slot.record)
    }

    fn evict_over_capacity(&mut self) -> Vec<RecordId> {
        let mut evicted = Vec::new();
        while self.slots.len() > self.capacity {
            let victim = self.recency.values().copied().find(|id| !self.slots[id].pinned);
            match victim {
                Some(id) => {
                    self.remove(id);
                    evicted.push(id);
                }
                None => break,
            }
        }
        evicted
    }
}

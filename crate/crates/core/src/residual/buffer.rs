//! Bounded ring replay buffer preserving insertion order, so n-step chains
//! can follow successors by slot.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    slots: Vec<T>,
    capacity: usize,
    pushes: u64,
}

impl<T> Default for ReplayBuffer<T> {
    fn default() -> Self {
        Self::new(0)
    }
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: Vec::new(),
            capacity,
            pushes: 0,
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

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, item: T) {
        assert!(self.capacity > 0, "replay buffer has zero capacity");
        if self.slots.len() < self.capacity {
            self.slots.push(item);
        } else {
            let at = (self.pushes % self.capacity as u64) as usize;
            self.slots[at] = item;
        }
        self.pushes += 1;
    }

    pub fn get(&self, slot: usize) -> &T {
        &self.slots[slot]
    }

    fn newest_slot(&self) -> Option<usize> {
        if self.slots.is_empty() {
            None
        } else {
            Some(((self.pushes - 1) % self.capacity as u64) as usize)
        }
    }

    /// Slot holding the transition pushed immediately after `slot`, if it
    /// is still resident.
    pub fn successor(&self, slot: usize) -> Option<usize> {
        let newest = self.newest_slot()?;
        if slot == newest {
            return None;
        }
        Some((slot + 1) % self.slots.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.slots.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..5u32 {
            buf.push(i);
        }
        assert_eq!(buf.len(), 5);
        for i in 0..5 {
            assert_eq!(*buf.get(i), i as u32);
        }
    }

    #[test]
    fn overwrites_oldest_when_full() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..7u32 {
            buf.push(i);
        }
        assert_eq!(buf.len(), 3);
        let mut live: Vec<u32> = buf.iter().copied().collect();
        live.sort();
        assert_eq!(live, vec![4, 5, 6]);
    }

    #[test]
    fn successor_follows_push_order() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5u32 {
            buf.push(i);
        }
        // Slots now hold [3, 4, 2]; newest is slot 1 (value 4).
        let slot_of = |v: u32| (0..buf.len()).find(|&s| *buf.get(s) == v).unwrap();
        let s2 = slot_of(2);
        let s3 = slot_of(3);
        let s4 = slot_of(4);
        assert_eq!(buf.successor(s2), Some(s3));
        assert_eq!(buf.successor(s3), Some(s4));
        assert_eq!(buf.successor(s4), None);
    }

    #[test]
    fn successor_before_wraparound() {
        let mut buf = ReplayBuffer::new(4);
        buf.push(10u32);
        buf.push(11);
        assert_eq!(buf.successor(0), Some(1));
        assert_eq!(buf.successor(1), None);
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Open-addressing index from masked chunk keys to entry positions.
//!
//! Slots hold 32 bits of the key hash and an entry index, so a probe
//! touches the full key only when the short hashes agree. Keys are always
//! compared in full before a hit is reported.

const EMPTY: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Slot {
    tag: u32,
    idx: u32,
}

const EMPTY_SLOT: Slot = Slot { tag: 0, idx: EMPTY };

/// 64-bit multiply-xorshift hash over 128-bit words plus a small salt.
pub fn hash_words(words: &[u128], salt: u8) -> u64 {
    const K: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut h = (u64::from(salt) + 1).wrapping_mul(K) ^ (words.len() as u64);
    for w in words {
        for half in [*w as u64, (*w >> 64) as u64] {
            h = (h ^ half).wrapping_mul(K);
            h ^= h >> 29;
        }
    }
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^ (h >> 32)
}

fn tag_of(hash: u64) -> u32 {
    (hash >> 32) as u32
}

/// Linear-probing index kept at most half full.
#[derive(Debug, Clone)]
pub struct KeyIndex {
    slots: Vec<Slot>,
    len: usize,
}

impl Default for KeyIndex {
    fn default() -> Self {
        KeyIndex {
            slots: vec![EMPTY_SLOT; 4],
            len: 0,
        }
    }
}

impl KeyIndex {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Finds the entry with this hash for which `is_key` holds.
    #[inline]
    pub fn find(&self, hash: u64, mut is_key: impl FnMut(usize) -> bool) -> Option<usize> {
        let tag = tag_of(hash);
        let mask = self.slots.len() - 1;
        let mut at = tag as usize & mask;
        loop {
            let s = self.slots[at];
            if s.idx == EMPTY {
                return None;
            }
            if s.tag == tag && is_key(s.idx as usize) {
                return Some(s.idx as usize);
            }
            at = (at + 1) & mask;
        }
    }

    /// Records entry `idx` under `hash`. The caller guarantees the key is
    /// not already present.
    pub fn insert(&mut self, hash: u64, idx: usize) {
        if (self.len + 1) * 2 > self.slots.len() {
            self.resize(self.slots.len() * 2);
        }
        self.place(tag_of(hash), idx as u32);
        self.len += 1;
    }

    /// Removes entry `idx` and renumbers entry `moved_from` to `idx`, the
    /// bookkeeping a `Vec::swap_remove` of the entry storage requires.
    pub fn remove_swap(&mut self, hash: u64, idx: usize, moved_from: Option<(u64, usize)>) {
        let mask = self.slots.len() - 1;
        let mut at = tag_of(hash) as usize & mask;
        while self.slots[at].idx != idx as u32 {
            debug_assert!(self.slots[at].idx != EMPTY, "entry not indexed");
            at = (at + 1) & mask;
        }
        self.slots[at] = EMPTY_SLOT;
        self.len -= 1;
        // Backward-shift deletion keeps probe chains intact.
        let mut hole = at;
        let mut next = (at + 1) & mask;
        while self.slots[next].idx != EMPTY {
            let home = self.slots[next].tag as usize & mask;
            let dist_next = next.wrapping_sub(home) & mask;
            let dist_hole = hole.wrapping_sub(home) & mask;
            if dist_hole < dist_next || home == hole {
                self.slots[hole] = self.slots[next];
                self.slots[next] = EMPTY_SLOT;
                hole = next;
            }
            next = (next + 1) & mask;
        }
        if let Some((moved_hash, from)) = moved_from {
            let mut at = tag_of(moved_hash) as usize & mask;
            while self.slots[at].idx != from as u32 {
                at = (at + 1) & mask;
            }
            self.slots[at].idx = idx as u32;
        }
    }

    fn place(&mut self, tag: u32, idx: u32) {
        let mask = self.slots.len() - 1;
        let mut at = tag as usize & mask;
        while self.slots[at].idx != EMPTY {
            at = (at + 1) & mask;
        }
        self.slots[at] = Slot { tag, idx };
    }

    fn resize(&mut self, cap: usize) {
        let old = std::mem::replace(&mut self.slots, vec![EMPTY_SLOT; cap]);
        for s in old.into_iter().filter(|s| s.idx != EMPTY) {
            self.place(s.tag, s.idx);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;

    fn weak_hash(k: u64) -> u64 {
        // Few distinct tags so probe chains collide and wrap.
        (k % 5) << 32
    }

    proptest! {
        #[test]
        fn behaves_like_a_map(ops in proptest::collection::vec((any::<bool>(), 0u64..40), 0..300)) {
            let mut index = KeyIndex::default();
            let mut keys: Vec<u64> = Vec::new();
            let mut model: HashMap<u64, ()> = HashMap::new();
            for (insert, k) in ops {
                let found = index.find(weak_hash(k), |i| keys[i] == k);
                prop_assert_eq!(found.is_some(), model.contains_key(&k));
                if insert && found.is_none() {
                    keys.push(k);
                    index.insert(weak_hash(k), keys.len() - 1);
                    model.insert(k, ());
                } else if !insert {
                    if let Some(i) = found {
                        let last = keys.len() - 1;
                        let moved = (i != last).then(|| (weak_hash(keys[last]), last));
                        index.remove_swap(weak_hash(k), i, moved);
                        keys.swap_remove(i);
                        model.remove(&k);
                    }
                }
                prop_assert_eq!(index.len(), keys.len());
                for (i, key) in keys.iter().enumerate() {
                    prop_assert_eq!(index.find(weak_hash(*key), |j| keys[j] == *key), Some(i));
                }
            }
        }
    }

    #[test]
    fn load_stays_at_most_half() {
        let mut index = KeyIndex::default();
        for i in 0..1000u64 {
            index.insert(hash_words(&[u128::from(i)], 0), i as usize);
            assert!(index.len() * 2 <= index.capacity());
        }
    }

    #[test]
    fn hash_depends_on_salt_and_words() {
        assert_ne!(hash_words(&[1], 6), hash_words(&[1], 17));
        assert_ne!(hash_words(&[1, 0], 6), hash_words(&[1], 6));
        assert_ne!(hash_words(&[1 << 64], 0), hash_words(&[1], 0));
    }
}

//! Paged key/value cache.
//!
//! A fixed pool of pages, each holding `page_size` positions of KV payload
//! (`n_layers × 2 × d_model` floats per position). Every live sequence owns
//! a [`BlockTable`] mapping logical position `p` to
//! `pages[p / page_size]` at offset `p % page_size`. Attention never reads
//! pages directly: [`KvStore::gather`] materializes the logical sequence as
//! one contiguous buffer, so the paged and contiguous layouts feed
//! bit-identical inputs into the same attention arithmetic.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub type SeqId = u64;

/// Storage the model writes new positions into and reads history from.
pub trait KvStore {
    fn payload_len(&self) -> usize;
    fn filled(&self, seq: SeqId) -> Result<usize>;
    /// Fails with [`Error::OutOfPages`] if `additional` more positions
    /// cannot be stored for `seq`.
    fn ensure_capacity(&self, seq: SeqId, additional: usize) -> Result<()>;
    fn append_kv(&mut self, seq: SeqId, payload: &[f32]) -> Result<usize>;
    fn gather(&self, seq: SeqId, upto: usize) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PageConfig {
    pub page_size: usize,
    pub num_pages: usize,
    pub payload_len: usize,
}

impl PageConfig {
    pub fn pages_for(&self, positions: usize) -> usize {
        positions.div_ceil(self.page_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockTable {
    pub seq_id: SeqId,
    pub pages: Vec<usize>,
    pub filled_tokens: usize,
}

impl BlockTable {
    /// `(page id, offset)` holding logical position `pos`.
    pub fn locate(&self, pos: usize, page_size: usize) -> Option<(usize, usize)> {
        (pos < self.filled_tokens).then(|| (self.pages[pos / page_size], pos % page_size))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub pages_total: usize,
    pub pages_free: usize,
    pub pages_per_sequence: BTreeMap<SeqId, usize>,
    pub eviction_count: u64,
}

pub struct PagedKvCache {
    config: PageConfig,
    storage: Vec<f32>,
    /// LIFO: the most recently freed page is handed out next.
    free: Vec<usize>,
    tables: BTreeMap<SeqId, BlockTable>,
    evictions: u64,
}

impl PagedKvCache {
    pub fn new(config: PageConfig) -> Result<Self> {
        if config.page_size == 0 || config.num_pages == 0 || config.payload_len == 0 {
            return Err(Error::invalid(format!(
                "page_size, num_pages and payload_len must be >= 1 (got {config:?})"
            )));
        }
        let len = config
            .num_pages
            .checked_mul(config.page_size)
            .and_then(|n| n.checked_mul(config.payload_len))
            .ok_or_else(|| Error::invalid("cache pool size overflows"))?;
        Ok(Self {
            config,
            storage: vec![0.0; len],
            // reversed so that pop() hands out page 0 first
            free: (0..config.num_pages).rev().collect(),
            tables: BTreeMap::new(),
            evictions: 0,
        })
    }

    pub fn config(&self) -> PageConfig {
        self.config
    }

    pub fn pages_free(&self) -> usize {
        self.free.len()
    }

    pub fn allocate_sequence(&mut self, seq: SeqId) -> Result<&BlockTable> {
        if self.tables.contains_key(&seq) {
            return Err(Error::DuplicateSequence(seq));
        }
        Ok(self.tables.entry(seq).or_insert(BlockTable {
            seq_id: seq,
            pages: Vec::new(),
            filled_tokens: 0,
        }))
    }

    pub fn block_table(&self, seq: SeqId) -> Result<&BlockTable> {
        self.tables.get(&seq).ok_or(Error::UnknownSequence(seq))
    }

    pub fn contains(&self, seq: SeqId) -> bool {
        self.tables.contains_key(&seq)
    }

    /// Returns the number of pages reclaimed.
    pub fn free_sequence(&mut self, seq: SeqId) -> Result<usize> {
        let table = self.tables.remove(&seq).ok_or(Error::UnknownSequence(seq))?;
        let n = table.pages.len();
        self.free.extend(table.pages);
        Ok(n)
    }

    /// Free a sequence as a preemption victim.
    pub fn evict(&mut self, seq: SeqId) -> Result<usize> {
        let n = self.free_sequence(seq)?;
        self.evictions += 1;
        Ok(n)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            pages_total: self.config.num_pages,
            pages_free: self.free.len(),
            pages_per_sequence: self
                .tables
                .iter()
                .map(|(id, t)| (*id, t.pages.len()))
                .collect(),
            eviction_count: self.evictions,
        }
    }

    fn slot(&self, page: usize, offset: usize) -> std::ops::Range<usize> {
        let p = self.config.payload_len;
        let start = (page * self.config.page_size + offset) * p;
        start..start + p
    }

    /// Pages a sequence would need to claim to grow by `additional`.
    pub fn pages_needed(&self, seq: SeqId, additional: usize) -> Result<usize> {
        let t = self.block_table(seq)?;
        let want = self.config.pages_for(t.filled_tokens + additional);
        Ok(want.saturating_sub(t.pages.len()))
    }
}

impl KvStore for PagedKvCache {
    fn payload_len(&self) -> usize {
        self.config.payload_len
    }

    fn filled(&self, seq: SeqId) -> Result<usize> {
        Ok(self.block_table(seq)?.filled_tokens)
    }

    fn ensure_capacity(&self, seq: SeqId, additional: usize) -> Result<()> {
        let needed = self.pages_needed(seq, additional)?;
        if needed > self.free.len() {
            return Err(Error::OutOfPages {
                needed,
                free: self.free.len(),
            });
        }
        Ok(())
    }

    fn append_kv(&mut self, seq: SeqId, payload: &[f32]) -> Result<usize> {
        if payload.len() != self.config.payload_len {
            return Err(Error::CacheInconsistency(format!(
                "payload has {} floats, cache expects {}",
                payload.len(),
                self.config.payload_len
            )));
        }
        let page_size = self.config.page_size;
        let table = self.tables.get(&seq).ok_or(Error::UnknownSequence(seq))?;
        let pos = table.filled_tokens;
        if pos % page_size == 0 {
            let page = self.free.pop().ok_or(Error::OutOfPages { needed: 1, free: 0 })?;
            self.tables.get_mut(&seq).unwrap().pages.push(page);
        }
        let table = self.tables.get_mut(&seq).unwrap();
        let page = table.pages[pos / page_size];
        table.filled_tokens += 1;
        let range = self.slot(page, pos % page_size);
        self.storage[range].copy_from_slice(payload);
        Ok(pos)
    }

    fn gather(&self, seq: SeqId, upto: usize) -> Result<Vec<f32>> {
        let table = self.block_table(seq)?;
        if upto > table.filled_tokens {
            return Err(Error::PositionOverflow {
                position: upto,
                max: table.filled_tokens,
            });
        }
        let p = self.config.payload_len;
        let mut out = Vec::with_capacity(upto * p);
        let mut pos = 0;
        for &page in &table.pages {
            if pos >= upto {
                break;
            }
            let take = (upto - pos).min(self.config.page_size);
            let start = self.slot(page, 0).start;
            out.extend_from_slice(&self.storage[start..start + take * p]);
            pos += take;
        }
        Ok(out)
    }
}

/// Unpaged reference store: one growable buffer per sequence.
#[derive(Debug, Default)]
pub struct ContiguousKvCache {
    payload_len: usize,
    seqs: BTreeMap<SeqId, Vec<f32>>,
}

impl ContiguousKvCache {
    pub fn new(payload_len: usize) -> Self {
        Self {
            payload_len,
            seqs: BTreeMap::new(),
        }
    }

    pub fn allocate_sequence(&mut self, seq: SeqId) -> Result<()> {
        if self.seqs.contains_key(&seq) {
            return Err(Error::DuplicateSequence(seq));
        }
        self.seqs.insert(seq, Vec::new());
        Ok(())
    }

    pub fn free_sequence(&mut self, seq: SeqId) -> Result<()> {
        self.seqs
            .remove(&seq)
            .map(|_| ())
            .ok_or(Error::UnknownSequence(seq))
    }
}

impl KvStore for ContiguousKvCache {
    fn payload_len(&self) -> usize {
        self.payload_len
    }

    fn filled(&self, seq: SeqId) -> Result<usize> {
        self.seqs
            .get(&seq)
            .map(|b| b.len() / self.payload_len)
            .ok_or(Error::UnknownSequence(seq))
    }

    fn ensure_capacity(&self, seq: SeqId, _additional: usize) -> Result<()> {
        self.filled(seq).map(|_| ())
    }

    fn append_kv(&mut self, seq: SeqId, payload: &[f32]) -> Result<usize> {
        if payload.len() != self.payload_len {
            return Err(Error::CacheInconsistency(format!(
                "payload has {} floats, cache expects {}",
                payload.len(),
                self.payload_len
            )));
        }
        let buf = self.seqs.get_mut(&seq).ok_or(Error::UnknownSequence(seq))?;
        let pos = buf.len() / self.payload_len;
        buf.extend_from_slice(payload);
        Ok(pos)
    }

    fn gather(&self, seq: SeqId, upto: usize) -> Result<Vec<f32>> {
        let buf = self.seqs.get(&seq).ok_or(Error::UnknownSequence(seq))?;
        let filled = buf.len() / self.payload_len;
        if upto > filled {
            return Err(Error::PositionOverflow {
                position: upto,
                max: filled,
            });
        }
        Ok(buf[..upto * self.payload_len].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn cache(page_size: usize, num_pages: usize) -> PagedKvCache {
        PagedKvCache::new(PageConfig {
            page_size,
            num_pages,
            payload_len: 3,
        })
        .unwrap()
    }

    fn payload(i: usize) -> [f32; 3] {
        [i as f32, i as f32 + 0.5, -(i as f32)]
    }

    #[test]
    fn allocate_free_cycle() {
        let mut c = cache(16, 4);
        assert!(c.allocate_sequence(1).unwrap().pages.is_empty());
        assert!(matches!(c.allocate_sequence(1), Err(Error::DuplicateSequence(1))));
        assert_eq!(c.free_sequence(1).unwrap(), 0);
        assert!(matches!(c.free_sequence(1), Err(Error::UnknownSequence(1))));
        c.allocate_sequence(1).unwrap();
    }

    #[test]
    fn page_claimed_on_boundary() {
        let mut c = cache(16, 4);
        c.allocate_sequence(7).unwrap();
        for i in 0..16 {
            assert_eq!(c.append_kv(7, &payload(i)).unwrap(), i);
        }
        assert_eq!(c.block_table(7).unwrap().pages.len(), 1);
        c.append_kv(7, &payload(16)).unwrap();
        assert_eq!(c.block_table(7).unwrap().pages.len(), 2);
    }

    #[test]
    fn pool_exhaustion() {
        let mut c = cache(4, 1);
        c.allocate_sequence(0).unwrap();
        for i in 0..4 {
            c.append_kv(0, &payload(i)).unwrap();
        }
        assert!(matches!(c.append_kv(0, &payload(4)), Err(Error::OutOfPages { .. })));
        assert!(matches!(c.ensure_capacity(0, 1), Err(Error::OutOfPages { .. })));
        c.ensure_capacity(0, 0).unwrap();
    }

    #[test]
    fn readback_and_gather() {
        let mut c = cache(4, 8);
        c.allocate_sequence(0).unwrap();
        for i in 0..3 {
            c.append_kv(0, &payload(i)).unwrap();
        }
        // single page: view equals the raw page slice
        let page = c.block_table(0).unwrap().pages[0];
        let raw = c.storage[c.slot(page, 0).start..c.slot(page, 2).end].to_vec();
        assert_eq!(c.gather(0, 3).unwrap(), raw);
        assert!(c.gather(0, 0).unwrap().is_empty());
        assert!(matches!(c.gather(0, 4), Err(Error::PositionOverflow { .. })));
        let (pg, off) = c.block_table(0).unwrap().locate(2, 4).unwrap();
        assert_eq!(&c.storage[c.slot(pg, off)], &payload(2));
    }

    #[test]
    fn free_reclaims_pages() {
        let mut c = cache(16, 8);
        c.allocate_sequence(3).unwrap();
        for i in 0..33 {
            c.append_kv(3, &payload(i)).unwrap();
        }
        assert_eq!(c.free_sequence(3).unwrap(), 3);
        let s = c.stats();
        assert_eq!(s.pages_free, 8);
        assert!(s.pages_per_sequence.is_empty());
    }

    #[test]
    fn lifo_reuse() {
        let mut c = cache(1, 4);
        c.allocate_sequence(0).unwrap();
        c.allocate_sequence(1).unwrap();
        c.append_kv(0, &payload(0)).unwrap();
        c.append_kv(1, &payload(0)).unwrap();
        assert_eq!(c.block_table(0).unwrap().pages, vec![0]);
        assert_eq!(c.block_table(1).unwrap().pages, vec![1]);
        c.free_sequence(0).unwrap();
        c.append_kv(1, &payload(1)).unwrap();
        assert_eq!(c.block_table(1).unwrap().pages, vec![1, 0]);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u64),
        Append(u64),
        Free(u64),
        Gather(u64, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            1 => (0u64..5).prop_map(Op::Alloc),
            5 => (0u64..5).prop_map(Op::Append),
            1 => (0u64..5).prop_map(Op::Free),
            1 => (0u64..5, 0usize..40).prop_map(|(s, u)| Op::Gather(s, u)),
        ]
    }

    proptest! {
        // random traces against the contiguous reference; checks
        // conservation, no aliasing and gather equivalence after every op
        #[test]
        fn fuzz_trace(ops in prop::collection::vec(op(), 1..300), ps in 1usize..6, np in 1usize..12) {
            let mut paged = cache(ps, np);
            let mut reference = ContiguousKvCache::new(3);
            let mut rng = SplitMix64::new(ops.len() as u64);
            for op in ops {
                match op {
                    Op::Alloc(s) => {
                        prop_assert_eq!(paged.allocate_sequence(s).is_ok(), reference.allocate_sequence(s).is_ok());
                    }
                    Op::Append(s) => {
                        let p = [rng.uniform_f32(-1.0, 1.0), rng.uniform_f32(-1.0, 1.0), rng.uniform_f32(-1.0, 1.0)];
                        match paged.append_kv(s, &p) {
                            Ok(pos) => prop_assert_eq!(reference.append_kv(s, &p).unwrap(), pos),
                            Err(Error::OutOfPages { .. }) => {}
                            Err(Error::UnknownSequence(_)) => prop_assert!(reference.filled(s).is_err()),
                            Err(e) => prop_assert!(false, "{e}"),
                        }
                    }
                    Op::Free(s) => {
                        prop_assert_eq!(paged.free_sequence(s).is_ok(), reference.free_sequence(s).is_ok());
                    }
                    Op::Gather(s, upto) => {
                        let a = paged.gather(s, upto).ok();
                        let b = reference.gather(s, upto).ok();
                        prop_assert_eq!(a, b);
                    }
                }
                let st = paged.stats();
                prop_assert_eq!(st.pages_free + st.pages_per_sequence.values().sum::<usize>(), st.pages_total);
                let mut seen = std::collections::HashSet::new();
                for t in paged.tables.values() {
                    prop_assert!(t.filled_tokens <= t.pages.len() * ps);
                    for p in &t.pages {
                        prop_assert!(seen.insert(*p), "page {} aliased", p);
                    }
                }
                for p in &paged.free {
                    prop_assert!(seen.insert(*p), "free page {} also live", p);
                }
            }
        }
    }
}

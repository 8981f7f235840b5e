//! An open-addressing hash table whose every byte lives in heap objects.
//!
//! ```text
//! header   magic u64 | capacity u64 | len u64 | tombstones u64 | buckets ref u64
//! buckets  capacity x u64 slot: 0 empty, 1 tombstone, else entry ref
//! entry    hash u64 | key_len u32 | value_len u32 | key | value
//! ```

use std::sync::Arc;

use thiserror::Error;

use crate::heap::{HeapError, HeapSpace, ManagedHeap, ObjectRef};

pub const MAX_KEY_LEN: usize = 256;

const MAGIC: u64 = u64::from_le_bytes(*b"KVTABLE1");
const HEADER_LEN: u64 = 40;
const H_CAP: u64 = 8;
const H_LEN: u64 = 16;
const H_TOMBS: u64 = 24;
const H_BUCKETS: u64 = 32;
const ENTRY_HEAD: u64 = 16;
const EMPTY: u64 = 0;
const TOMBSTONE: u64 = 1;
const INITIAL_CAPACITY: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("key of {0} bytes exceeds the {MAX_KEY_LEN}-byte limit")]
    KeyTooLong(usize),
    #[error("no table at {0:#x}")]
    NotATable(u64),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

/// FNV-1a, 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Handle to a table rooted at a header object. Operations take the heap
/// explicitly so several tables can be updated under one heap lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Table {
    root: ObjectRef,
}

enum Probe {
    Found(u64, ObjectRef),
    Vacant(u64),
}

impl Table {
    pub fn create(h: &mut HeapSpace) -> Result<Table, TableError> {
        let root = h.alloc(HEADER_LEN)?;
        let buckets = h.alloc(INITIAL_CAPACITY * 8)?;
        h.write_u64(root, 0, MAGIC)?;
        h.write_u64(root, H_CAP, INITIAL_CAPACITY)?;
        h.write_u64(root, H_BUCKETS, buckets.offset())?;
        Ok(Table { root })
    }

    pub fn open(h: &HeapSpace, root: ObjectRef) -> Result<Table, TableError> {
        match h.read_u64(root, 0) {
            Ok(MAGIC) => Ok(Table { root }),
            _ => Err(TableError::NotATable(root.offset())),
        }
    }

    pub fn root(&self) -> ObjectRef {
        self.root
    }

    fn field(&self, h: &HeapSpace, at: u64) -> Result<u64, TableError> {
        Ok(h.read_u64(self.root, at)?)
    }

    pub fn len(&self, h: &HeapSpace) -> Result<u64, TableError> {
        self.field(h, H_LEN)
    }

    pub fn is_empty(&self, h: &HeapSpace) -> Result<bool, TableError> {
        Ok(self.len(h)? == 0)
    }

    pub fn capacity(&self, h: &HeapSpace) -> Result<u64, TableError> {
        self.field(h, H_CAP)
    }

    fn entry_key<'h>(h: &'h HeapSpace, e: ObjectRef) -> Result<&'h [u8], TableError> {
        let klen = u32::from_le_bytes(h.read(e, 8, 4)?.try_into().unwrap()) as u64;
        Ok(h.read(e, ENTRY_HEAD, klen)?)
    }

    fn entry_value<'h>(h: &'h HeapSpace, e: ObjectRef) -> Result<&'h [u8], TableError> {
        let head = h.read(e, 8, 8)?;
        let klen = u32::from_le_bytes(head[0..4].try_into().unwrap()) as u64;
        let vlen = u32::from_le_bytes(head[4..8].try_into().unwrap()) as u64;
        Ok(h.read(e, ENTRY_HEAD + klen, vlen)?)
    }

    fn probe(&self, h: &HeapSpace, key: &[u8], hash: u64) -> Result<Probe, TableError> {
        let cap = self.field(h, H_CAP)?;
        let buckets = ObjectRef::from_offset(self.field(h, H_BUCKETS)?);
        let mut vacant = None;
        let mut i = hash & (cap - 1);
        for _ in 0..cap {
            match h.read_u64(buckets, i * 8)? {
                EMPTY => return Ok(Probe::Vacant(vacant.unwrap_or(i))),
                TOMBSTONE => {
                    vacant.get_or_insert(i);
                }
                r => {
                    let e = ObjectRef::from_offset(r);
                    if h.read_u64(e, 0)? == hash && Self::entry_key(h, e)? == key {
                        return Ok(Probe::Found(i, e));
                    }
                }
            }
            i = (i + 1) & (cap - 1);
        }
        Ok(Probe::Vacant(vacant.expect("a full table always has a tombstone")))
    }

    pub fn get(&self, h: &HeapSpace, key: &[u8]) -> Result<Option<Vec<u8>>, TableError> {
        match self.probe(h, key, fnv1a(key))? {
            Probe::Found(_, e) => Ok(Some(Self::entry_value(h, e)?.to_vec())),
            Probe::Vacant(_) => Ok(None),
        }
    }

    fn new_entry(h: &mut HeapSpace, hash: u64, key: &[u8], value: &[u8]) -> Result<ObjectRef, TableError> {
        let e = h.alloc(ENTRY_HEAD + key.len() as u64 + value.len() as u64)?;
        let mut head = [0u8; ENTRY_HEAD as usize];
        head[0..8].copy_from_slice(&hash.to_le_bytes());
        head[8..12].copy_from_slice(&(key.len() as u32).to_le_bytes());
        head[12..16].copy_from_slice(&(value.len() as u32).to_le_bytes());
        h.write(e, 0, &head)?;
        h.write(e, ENTRY_HEAD, key)?;
        h.write(e, ENTRY_HEAD + key.len() as u64, value)?;
        Ok(e)
    }

    pub fn put(&self, h: &mut HeapSpace, key: &[u8], value: &[u8]) -> Result<(), TableError> {
        if key.len() > MAX_KEY_LEN {
            return Err(TableError::KeyTooLong(key.len()));
        }
        let hash = fnv1a(key);
        let buckets = ObjectRef::from_offset(self.field(h, H_BUCKETS)?);
        match self.probe(h, key, hash)? {
            Probe::Found(slot, e) => {
                if Self::entry_value(h, e)?.len() == value.len() {
                    h.write(e, ENTRY_HEAD + key.len() as u64, value)?;
                } else {
                    let fresh = Self::new_entry(h, hash, key, value)?;
                    h.write_u64(buckets, slot * 8, fresh.offset())?;
                    h.free(e)?;
                }
                Ok(())
            }
            Probe::Vacant(slot) => {
                let len = self.field(h, H_LEN)?;
                let tombs = self.field(h, H_TOMBS)?;
                let cap = self.field(h, H_CAP)?;
                if (len + tombs + 1) * 10 > cap * 7 {
                    let new_cap = if (len + 1) * 20 > cap * 7 { cap * 2 } else { cap };
                    self.rehash(h, new_cap)?;
                    return self.put(h, key, value);
                }
                let fresh = Self::new_entry(h, hash, key, value)?;
                if h.read_u64(buckets, slot * 8)? == TOMBSTONE {
                    h.write_u64(self.root, H_TOMBS, tombs - 1)?;
                }
                h.write_u64(buckets, slot * 8, fresh.offset())?;
                h.write_u64(self.root, H_LEN, len + 1)?;
                Ok(())
            }
        }
    }

    /// Remove `key`. Returns whether it was present.
    pub fn delete(&self, h: &mut HeapSpace, key: &[u8]) -> Result<bool, TableError> {
        match self.probe(h, key, fnv1a(key))? {
            Probe::Found(slot, e) => {
                let buckets = ObjectRef::from_offset(self.field(h, H_BUCKETS)?);
                h.write_u64(buckets, slot * 8, TOMBSTONE)?;
                h.free(e)?;
                let len = self.field(h, H_LEN)?;
                let tombs = self.field(h, H_TOMBS)?;
                h.write_u64(self.root, H_LEN, len - 1)?;
                h.write_u64(self.root, H_TOMBS, tombs + 1)?;
                Ok(true)
            }
            Probe::Vacant(_) => Ok(false),
        }
    }

    fn entry_refs(&self, h: &HeapSpace) -> Result<Vec<ObjectRef>, TableError> {
        let cap = self.field(h, H_CAP)?;
        let buckets = ObjectRef::from_offset(self.field(h, H_BUCKETS)?);
        let slots = h.read(buckets, 0, cap * 8)?;
        Ok(slots
            .chunks_exact(8)
            .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
            .filter(|&r| r > TOMBSTONE)
            .map(ObjectRef::from_offset)
            .collect())
    }

    fn rehash(&self, h: &mut HeapSpace, new_cap: u64) -> Result<(), TableError> {
        let entries = self.entry_refs(h)?;
        let old = ObjectRef::from_offset(self.field(h, H_BUCKETS)?);
        let fresh = h.alloc(new_cap * 8)?;
        for e in entries {
            let mut i = h.read_u64(e, 0)? & (new_cap - 1);
            while h.read_u64(fresh, i * 8)? != EMPTY {
                i = (i + 1) & (new_cap - 1);
            }
            h.write_u64(fresh, i * 8, e.offset())?;
        }
        h.free(old)?;
        h.write_u64(self.root, H_CAP, new_cap)?;
        h.write_u64(self.root, H_TOMBS, 0)?;
        h.write_u64(self.root, H_BUCKETS, fresh.offset())?;
        Ok(())
    }

    /// Every (key, value) pair, in bucket order.
    pub fn entries(&self, h: &HeapSpace) -> Result<Vec<(Vec<u8>, Vec<u8>)>, TableError> {
        self.entry_refs(h)?
            .into_iter()
            .map(|e| Ok((Self::entry_key(h, e)?.to_vec(), Self::entry_value(h, e)?.to_vec())))
            .collect()
    }
}

/// A [`Table`] bound to a shared heap; each call is one heap critical
/// section.
#[derive(Clone)]
pub struct HeapHashTable {
    heap: Arc<ManagedHeap>,
    table: Table,
}

impl HeapHashTable {
    pub fn create(heap: Arc<ManagedHeap>) -> Result<Self, TableError> {
        let table = heap.mutate(Table::create)?;
        Ok(HeapHashTable { heap, table })
    }

    pub fn open(heap: Arc<ManagedHeap>, root: ObjectRef) -> Result<Self, TableError> {
        let table = heap.mutate(|h| Table::open(h, root))?;
        Ok(HeapHashTable { heap, table })
    }

    pub fn table(&self) -> Table {
        self.table
    }

    pub fn heap(&self) -> &Arc<ManagedHeap> {
        &self.heap
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, TableError> {
        self.heap.mutate(|h| self.table.get(h, key))
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<(), TableError> {
        self.heap.mutate(|h| self.table.put(h, key, value))
    }

    pub fn delete(&self, key: &[u8]) -> Result<bool, TableError> {
        self.heap.mutate(|h| self.table.delete(h, key))
    }

    pub fn len(&self) -> Result<u64, TableError> {
        self.heap.mutate(|h| self.table.len(h))
    }

    pub fn is_empty(&self) -> Result<bool, TableError> {
        Ok(self.len()? == 0)
    }

    pub fn entries(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, TableError> {
        self.heap.mutate(|h| self.table.entries(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::HeapConfig;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn table() -> HeapHashTable {
        let heap = ManagedHeap::new(HeapConfig::new(4096, 16, 4096).unwrap()).unwrap();
        HeapHashTable::create(Arc::new(heap)).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn put_get_delete() {
        let t = table();
        t.put(b"k", b"v").unwrap();
        assert_eq!(t.get(b"k").unwrap(), Some(b"v".to_vec()));
        assert!(t.delete(b"k").unwrap());
        assert!(!t.delete(b"k").unwrap());
        assert_eq!(t.get(b"k").unwrap(), None);
        assert!(t.is_empty().unwrap());
        assert_eq!(
            t.put(&[0; MAX_KEY_LEN + 1], b"").unwrap_err(),
            TableError::KeyTooLong(MAX_KEY_LEN + 1)
        );
        t.put(&[0; MAX_KEY_LEN], b"").unwrap();
    }

    #[test]
    fn same_size_overwrite_stays_in_place() {
        let t = table();
        t.put(b"k", &[1; 1000]).unwrap();
        let objs = t.heap().mutate(|h| h.objects().collect::<Vec<_>>());
        t.heap().stop_world().unwrap().reset_dirty();
        t.put(b"k", &[2; 1000]).unwrap();
        assert_eq!(t.heap().mutate(|h| h.objects().collect::<Vec<_>>()), objs);
        // only the value bytes were written
        assert!(t.heap().dirty_pages().len() <= 2);
        t.put(b"k", &[3; 10]).unwrap();
        assert_eq!(t.get(b"k").unwrap(), Some(vec![3; 10]));
    }

    #[test]
    fn open_checks_magic() {
        let t = table();
        let root = t.table().root();
        HeapHashTable::open(t.heap().clone(), root).unwrap();
        let other = t.heap().alloc(64).unwrap();
        assert!(matches!(
            HeapHashTable::open(t.heap().clone(), other),
            Err(TableError::NotATable(_))
        ));
    }

    #[test]
    fn growth_keeps_load_factor() {
        let t = table();
        for i in 0..5000u32 {
            t.put(&i.to_le_bytes(), &i.to_be_bytes()).unwrap();
            let (len, cap) = t.heap().mutate(|h| (t.table().len(h).unwrap(), t.table().capacity(h).unwrap()));
            assert!(len * 10 <= cap * 7);
        }
        for i in 0..5000u32 {
            assert_eq!(t.get(&i.to_le_bytes()).unwrap(), Some(i.to_be_bytes().to_vec()));
        }
    }

    #[derive(Debug, Clone)]
    enum Op {
        Put(u8, Vec<u8>),
        Delete(u8),
        Get(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            3 => (any::<u8>(), proptest::collection::vec(any::<u8>(), 0..300)).prop_map(|(k, v)| Op::Put(k, v)),
            1 => any::<u8>().prop_map(Op::Delete),
            1 => any::<u8>().prop_map(Op::Get),
        ]
    }

    proptest! {
        #[test]
        fn matches_btreemap_model(ops in proptest::collection::vec(op(), 1..400)) {
            let t = table();
            let mut model = BTreeMap::new();
            let key = |k: u8| vec![k; 1 + k as usize % 7];
            for op in ops {
                match op {
                    Op::Put(k, v) => {
                        t.put(&key(k), &v).unwrap();
                        model.insert(key(k), v);
                    }
                    Op::Delete(k) => {
                        prop_assert_eq!(t.delete(&key(k)).unwrap(), model.remove(&key(k)).is_some());
                    }
                    Op::Get(k) => prop_assert_eq!(t.get(&key(k)).unwrap(), model.get(&key(k)).cloned()),
                }
            }
            let mut entries = t.entries().unwrap();
            entries.sort();
            prop_assert_eq!(entries, model.into_iter().collect::<Vec<_>>());
        }
    }
}

use std::collections::BTreeMap;

/// Sparse block index -> payload map holding the blocks written at one image
/// layer. Blocks absent here resolve through the parent chain.
#[derive(Debug, Clone, Default)]
pub struct BlockMap {
    block_size: u64,
    entries: BTreeMap<u64, Box<[u8]>>,
}

impl BlockMap {
    pub fn new(block_size: u64) -> Self {
        Self {
            block_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn get(&self, index: u64) -> Option<&[u8]> {
        self.entries.get(&index).map(|b| &b[..])
    }

    pub fn get_mut(&mut self, index: u64) -> Option<&mut [u8]> {
        self.entries.get_mut(&index).map(|b| &mut b[..])
    }

    pub fn contains(&self, index: u64) -> bool {
        self.entries.contains_key(&index)
    }

    /// Panics if `payload` is not exactly one block long.
    pub fn insert(&mut self, index: u64, payload: Box<[u8]>) {
        assert_eq!(payload.len() as u64, self.block_size, "block payload size");
        self.entries.insert(index, payload);
    }

    pub fn remove(&mut self, index: u64) -> Option<Box<[u8]>> {
        self.entries.remove(&index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.entries.iter().map(|(i, b)| (*i, &b[..]))
    }
}

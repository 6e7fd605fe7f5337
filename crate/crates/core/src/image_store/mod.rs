//! Tenant-aware copy-on-write block image repository.
//!
//! Every image is a layer holding a sparse [`BlockMap`] of the blocks written
//! at that layer. A linked clone starts with an empty map and a parent link;
//! reads resolve each block through the chain (own layer, then nearest
//! ancestor, then zeros). Writes materialize whole blocks in the written
//! layer by read-modify-write from the chain, so ancestors are never touched.
//!
//! Locking: a catalog `RwLock` guards metadata, each layer has its own
//! `RwLock`. Layer locks are always taken descendant first, then ancestors.
//! Bulk copies (flatten, deep copy) hold the catalog's upgradable read lock
//! while copying, release all layer locks, then upgrade to commit.

mod block_map;
mod files;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockUpgradableReadGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use block_map::BlockMap;
use files::BlockFiles;

use crate::journal::{Journal, JournalError, Record};
use crate::types::{now_millis, ImageId, TenantId};

pub const DEFAULT_BLOCK_SIZE: u64 = 4 << 20;
pub const DEFAULT_MAX_CHAIN_DEPTH: usize = 8;
pub const MIN_BLOCK_SIZE: u64 = 4096;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("image {0} not found")]
    NotFound(ImageId),
    #[error("tenant {tenant} may not access image {image}")]
    AccessDenied { tenant: TenantId, image: ImageId },
    #[error("image name {0:?} already in use by this tenant")]
    DuplicateName(String),
    #[error("invalid image name {0:?}")]
    InvalidName(String),
    #[error("image size must be positive")]
    InvalidSize,
    #[error("invalid store config: {0}")]
    InvalidConfig(String),
    #[error("clone chain depth {depth} exceeds maximum {max}")]
    ChainTooDeep { depth: usize, max: usize },
    #[error("range {offset}+{len} outside image of {size} bytes")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error("image {0} is immutable")]
    ImmutableImage(ImageId),
    #[error("image {0} is not a linked clone")]
    NotAClone(ImageId),
    #[error("image {0} still has {1} linked clones")]
    HasChildren(ImageId, u64),
    #[error("image {0} is exported by a live target")]
    ImageInUse(ImageId),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("inconsistent journal: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreConfig {
    pub block_size: u64,
    pub max_chain_depth: usize,
    /// Persistence root; `None` keeps blocks in memory only.
    pub root: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            max_chain_depth: DEFAULT_MAX_CHAIN_DEPTH,
            root: None,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < MIN_BLOCK_SIZE || !self.block_size.is_power_of_two() {
            return Err(StoreError::InvalidConfig(format!(
                "block_size {} must be a power of two >= {MIN_BLOCK_SIZE}",
                self.block_size
            )));
        }
        if self.max_chain_depth < 2 {
            return Err(StoreError::InvalidConfig("max_chain_depth must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Golden,
    Clone,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub name: String,
    pub tenant: TenantId,
    pub kind: ImageKind,
    pub parent: Option<ImageId>,
    pub virtual_size: u64,
    pub block_size: u64,
    pub created_at: u64,
    pub child_count: u64,
    #[serde(default)]
    pub shared_with: BTreeSet<TenantId>,
}

impl ImageRecord {
    pub fn readable_by(&self, tenant: &TenantId) -> bool {
        &self.tenant == tenant || self.shared_with.contains(tenant)
    }

    fn writable(&self) -> bool {
        self.kind != ImageKind::Snapshot && self.child_count == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StoreEvent {
    Created {
        record: ImageRecord,
        present: Vec<u64>,
    },
    BlocksMaterialized {
        image: ImageId,
        indices: Vec<u64>,
    },
    Flattened {
        image: ImageId,
        rename: Option<String>,
        indices: Vec<u64>,
    },
    Renamed {
        image: ImageId,
        name: String,
    },
    Shared {
        image: ImageId,
        tenant: TenantId,
    },
    Deleted {
        image: ImageId,
    },
}

/// Instrumentation counters. `blocks_copied` counts blocks duplicated from
/// one layer into another by bulk operations (flatten, deep copy);
/// `cow_fills` counts blocks pulled up from an ancestor by a partial write.
#[derive(Debug, Default)]
struct Stats {
    blocks_copied: AtomicU64,
    blocks_written: AtomicU64,
    cow_fills: AtomicU64,
    flattens: AtomicU64,
    deep_copies: AtomicU64,
    clones: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub blocks_copied: u64,
    pub blocks_written: u64,
    pub cow_fills: u64,
    pub flattens: u64,
    pub deep_copies: u64,
    pub clones: u64,
}

impl std::ops::Sub for StoreStats {
    type Output = StoreStats;
    fn sub(self, o: StoreStats) -> StoreStats {
        StoreStats {
            blocks_copied: self.blocks_copied - o.blocks_copied,
            blocks_written: self.blocks_written - o.blocks_written,
            cow_fills: self.cow_fills - o.cow_fills,
            flattens: self.flattens - o.flattens,
            deep_copies: self.deep_copies - o.deep_copies,
            clones: self.clones - o.clones,
        }
    }
}

type Layer = Arc<RwLock<BlockMap>>;

struct Entry {
    record: ImageRecord,
    layer: Layer,
}

#[derive(Default)]
struct Catalog {
    images: BTreeMap<ImageId, Entry>,
    names: HashMap<(TenantId, String), ImageId>,
    next_seq: u64,
}

impl Catalog {
    fn entry(&self, id: &ImageId) -> Result<&Entry> {
        self.images.get(id).ok_or_else(|| StoreError::NotFound(id.clone()))
    }

    fn entry_mut(&mut self, id: &ImageId) -> Result<&mut Entry> {
        self.images.get_mut(id).ok_or_else(|| StoreError::NotFound(id.clone()))
    }

    /// Layers from `id` up to the root of its chain.
    fn chain(&self, id: &ImageId) -> Result<Vec<Layer>> {
        let mut out = Vec::new();
        let mut cur = Some(id.clone());
        while let Some(c) = cur {
            let e = self.entry(&c)?;
            out.push(e.layer.clone());
            cur = e.record.parent.clone();
        }
        Ok(out)
    }

    fn depth(&self, id: &ImageId) -> usize {
        let mut n = 0;
        let mut cur = Some(id.clone());
        while let Some(c) = cur {
            n += 1;
            cur = self.images.get(&c).and_then(|e| e.record.parent.clone());
        }
        n
    }

    fn check_name_free(&self, tenant: &TenantId, name: &str) -> Result<()> {
        if self.names.contains_key(&(tenant.clone(), name.to_string())) {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    fn insert(&mut self, mut record: ImageRecord, map: BlockMap) {
        record.child_count = 0;
        if let Some(p) = &record.parent {
            if let Some(pe) = self.images.get_mut(p) {
                pe.record.child_count += 1;
            }
        }
        if let Some(seq) = record.id.seq() {
            self.next_seq = self.next_seq.max(seq + 1);
        }
        self.names
            .insert((record.tenant.clone(), record.name.clone()), record.id.clone());
        self.images.insert(
            record.id.clone(),
            Entry {
                record,
                layer: Arc::new(RwLock::new(map)),
            },
        );
    }

    fn remove(&mut self, id: &ImageId) -> Option<ImageRecord> {
        let e = self.images.remove(id)?;
        self.names.remove(&(e.record.tenant.clone(), e.record.name.clone()));
        if let Some(p) = &e.record.parent {
            if let Some(pe) = self.images.get_mut(p) {
                pe.record.child_count -= 1;
            }
        }
        Some(e.record)
    }

    fn rename(&mut self, id: &ImageId, name: String) -> Result<()> {
        let e = self.entry_mut(id)?;
        let key = (e.record.tenant.clone(), e.record.name.clone());
        e.record.name = name.clone();
        let tenant = e.record.tenant.clone();
        self.names.remove(&key);
        self.names.insert((tenant, name), id.clone());
        Ok(())
    }

    fn detach_from_parent(&mut self, id: &ImageId) -> Result<()> {
        let parent = {
            let e = self.entry_mut(id)?;
            e.record.kind = ImageKind::Snapshot;
            e.record.parent.take()
        };
        if let Some(p) = parent {
            if let Some(pe) = self.images.get_mut(&p) {
                pe.record.child_count -= 1;
            }
        }
        Ok(())
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > 255 || name.chars().any(|c| c.is_control() || c == '/') {
        return Err(StoreError::InvalidName(name.to_string()));
    }
    Ok(())
}

fn check_bounds(offset: u64, len: u64, size: u64) -> Result<()> {
    match offset.checked_add(len) {
        Some(end) if end <= size => Ok(()),
        _ => Err(StoreError::OutOfBounds { offset, len, size }),
    }
}

/// First layer holding `index`, searching descendant to ancestor.
fn resolve<G: std::ops::Deref<Target = BlockMap>>(layers: &[G], index: u64) -> Option<&[u8]> {
    layers.iter().find_map(|l| l.get(index))
}

/// Splits `[offset, offset+len)` into per-block pieces:
/// `(block index, offset in block, offset in buffer, piece length)`.
fn block_pieces(offset: u64, len: u64, block_size: u64) -> impl Iterator<Item = (u64, u64, u64, u64)> {
    let end = offset + len;
    let mut pos = offset;
    std::iter::from_fn(move || {
        if pos >= end {
            return None;
        }
        let index = pos / block_size;
        let in_block = pos % block_size;
        let n = (block_size - in_block).min(end - pos);
        let piece = (index, in_block, pos - offset, n);
        pos += n;
        Some(piece)
    })
}

pub struct ImageStore {
    config: StoreConfig,
    journal: Arc<Journal>,
    files: Option<BlockFiles>,
    catalog: RwLock<Catalog>,
    in_use: Mutex<HashMap<ImageId, u32>>,
    replay_presence: Mutex<HashMap<ImageId, BTreeSet<u64>>>,
    stats: Stats,
}

impl std::fmt::Debug for ImageStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageStore")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ImageStore {
    pub fn new(config: StoreConfig, journal: Arc<Journal>) -> Result<Self> {
        config.validate()?;
        let files = config.root.as_deref().map(BlockFiles::open).transpose()?;
        Ok(Self {
            config,
            journal,
            files,
            catalog: RwLock::new(Catalog::default()),
            in_use: Mutex::new(HashMap::new()),
            replay_presence: Mutex::new(HashMap::new()),
            stats: Stats::default(),
        })
    }

    /// Memory-only store with its own journal, for tests and tooling.
    pub fn in_memory(config: StoreConfig) -> Result<Self> {
        Self::new(StoreConfig { root: None, ..config }, Arc::new(Journal::in_memory()))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn block_size(&self) -> u64 {
        self.config.block_size
    }

    fn commit(&self, ev: StoreEvent) -> Result<()> {
        self.journal.append(&Record::Store(ev))?;
        Ok(())
    }

    pub fn create_image(&self, tenant: &TenantId, name: &str, virtual_size: u64) -> Result<ImageId> {
        validate_name(name)?;
        if virtual_size == 0 {
            return Err(StoreError::InvalidSize);
        }
        let mut cat = self.catalog.write();
        cat.check_name_free(tenant, name)?;
        let record = ImageRecord {
            id: ImageId::from_seq(cat.next_seq),
            name: name.to_string(),
            tenant: tenant.clone(),
            kind: ImageKind::Golden,
            parent: None,
            virtual_size,
            block_size: self.config.block_size,
            created_at: now_millis(),
            child_count: 0,
            shared_with: BTreeSet::new(),
        };
        self.commit(StoreEvent::Created {
            record: record.clone(),
            present: Vec::new(),
        })?;
        let id = record.id.clone();
        cat.insert(record, BlockMap::new(self.config.block_size));
        Ok(id)
    }

    /// Imports a golden image from a byte stream. The virtual size is the
    /// stream length rounded up to whole blocks; all-zero blocks stay sparse.
    pub fn import_image(&self, tenant: &TenantId, name: &str, stream: &mut dyn Read) -> Result<ImageId> {
        validate_name(name)?;
        let bs = self.config.block_size;
        let id = {
            let mut cat = self.catalog.write();
            cat.check_name_free(tenant, name)?;
            let id = ImageId::from_seq(cat.next_seq);
            cat.next_seq += 1;
            id
        };
        if let Some(files) = &self.files {
            files.create_fresh(&id)?;
        }
        let mut map = BlockMap::new(bs);
        let mut total = 0u64;
        let mut index = 0u64;
        loop {
            let mut buf = vec![0u8; bs as usize];
            let n = read_full(stream, &mut buf)?;
            if n == 0 {
                break;
            }
            total += n as u64;
            if buf.iter().any(|&b| b != 0) {
                if let Some(files) = &self.files {
                    files.write(&id, bs, &[(index, 0, &buf)])?;
                }
                map.insert(index, buf.into_boxed_slice());
            }
            index += 1;
            if (n as u64) < bs {
                break;
            }
        }
        let cleanup = |e: StoreError| {
            if let Some(files) = &self.files {
                let _ = files.remove(&id);
            }
            e
        };
        if total == 0 {
            return Err(cleanup(StoreError::InvalidSize));
        }
        let record = ImageRecord {
            id: id.clone(),
            name: name.to_string(),
            tenant: tenant.clone(),
            kind: ImageKind::Golden,
            parent: None,
            virtual_size: total.div_ceil(bs) * bs,
            block_size: bs,
            created_at: now_millis(),
            child_count: 0,
            shared_with: BTreeSet::new(),
        };
        let mut cat = self.catalog.write();
        // first committed record wins a same-name race
        cat.check_name_free(tenant, name).map_err(cleanup)?;
        self.commit(StoreEvent::Created {
            record: record.clone(),
            present: map.indices().collect(),
        })
        .map_err(cleanup)?;
        self.stats.blocks_written.fetch_add(map.len() as u64, Ordering::Relaxed);
        cat.insert(record, map);
        Ok(id)
    }

    /// Creates a writable linked clone of `parent`. Metadata only: no data
    /// block is read or written.
    pub fn linked_clone(&self, tenant: &TenantId, parent: &ImageId, name: &str) -> Result<ImageId> {
        validate_name(name)?;
        let mut cat = self.catalog.write();
        let prec = &cat.entry(parent)?.record;
        if !prec.readable_by(tenant) {
            return Err(StoreError::AccessDenied {
                tenant: tenant.clone(),
                image: parent.clone(),
            });
        }
        let virtual_size = prec.virtual_size;
        let depth = cat.depth(parent) + 1;
        if depth > self.config.max_chain_depth {
            return Err(StoreError::ChainTooDeep {
                depth,
                max: self.config.max_chain_depth,
            });
        }
        cat.check_name_free(tenant, name)?;
        let record = ImageRecord {
            id: ImageId::from_seq(cat.next_seq),
            name: name.to_string(),
            tenant: tenant.clone(),
            kind: ImageKind::Clone,
            parent: Some(parent.clone()),
            virtual_size,
            block_size: self.config.block_size,
            created_at: now_millis(),
            child_count: 0,
            shared_with: BTreeSet::new(),
        };
        self.commit(StoreEvent::Created {
            record: record.clone(),
            present: Vec::new(),
        })?;
        let id = record.id.clone();
        cat.insert(record, BlockMap::new(self.config.block_size));
        self.stats.clones.fetch_add(1, Ordering::Relaxed);
        Ok(id)
    }

    pub fn read_range(&self, image: &ImageId, offset: u64, len: u64) -> Result<Vec<u8>> {
        let layers = {
            let cat = self.catalog.read();
            let rec = &cat.entry(image)?.record;
            check_bounds(offset, len, rec.virtual_size)?;
            cat.chain(image)?
        };
        let guards: Vec<_> = layers.iter().map(|l| l.read()).collect();
        let mut out = vec![0u8; len as usize];
        for (index, in_block, at, n) in block_pieces(offset, len, self.config.block_size) {
            if let Some(block) = resolve(&guards, index) {
                out[at as usize..(at + n) as usize].copy_from_slice(&block[in_block as usize..(in_block + n) as usize]);
            }
        }
        Ok(out)
    }

    pub fn write_range(&self, image: &ImageId, offset: u64, data: &[u8]) -> Result<()> {
        let bs = self.config.block_size;
        let cat = self.catalog.read();
        let rec = &cat.entry(image)?.record;
        check_bounds(offset, data.len() as u64, rec.virtual_size)?;
        if !rec.writable() {
            return Err(StoreError::ImmutableImage(image.clone()));
        }
        if data.is_empty() {
            return Ok(());
        }
        let layers = cat.chain(image)?;
        let mut own = layers[0].write();
        let mut fresh: Vec<(u64, Box<[u8]>)> = Vec::new();
        let mut patches: Vec<(u64, u64, &[u8])> = Vec::new();
        let mut fills = 0;
        {
            let ancestors: Vec<_> = layers[1..].iter().map(|l| l.read()).collect();
            for (index, in_block, at, n) in block_pieces(offset, data.len() as u64, bs) {
                let piece = &data[at as usize..(at + n) as usize];
                if own.contains(index) {
                    patches.push((index, in_block, piece));
                    continue;
                }
                let mut block = match resolve(&ancestors, index) {
                    Some(b) => {
                        fills += 1;
                        b.to_vec().into_boxed_slice()
                    }
                    None => vec![0u8; bs as usize].into_boxed_slice(),
                };
                block[in_block as usize..(in_block + n) as usize].copy_from_slice(piece);
                fresh.push((index, block));
            }
        }
        if let Some(files) = &self.files {
            let mut writes: Vec<(u64, u64, &[u8])> = patches.clone();
            writes.extend(fresh.iter().map(|(i, b)| (*i, 0, &b[..])));
            files.write(image, bs, &writes)?;
        }
        if !fresh.is_empty() {
            self.commit(StoreEvent::BlocksMaterialized {
                image: image.clone(),
                indices: fresh.iter().map(|(i, _)| *i).collect(),
            })?;
        }
        let touched = (patches.len() + fresh.len()) as u64;
        for (index, in_block, piece) in patches {
            let block = own.get_mut(index).expect("present block");
            block[in_block as usize..in_block as usize + piece.len()].copy_from_slice(piece);
        }
        for (index, block) in fresh {
            own.insert(index, block);
        }
        self.stats.blocks_written.fetch_add(touched, Ordering::Relaxed);
        self.stats.cow_fills.fetch_add(fills, Ordering::Relaxed);
        Ok(())
    }

    pub fn flatten(&self, image: &ImageId) -> Result<()> {
        self.flatten_as(image, None)
    }

    /// Materializes every ancestor-resolved block into `image`, severs the
    /// parent link and turns it into a snapshot, optionally renaming it in
    /// the same commit. Readable content is unchanged.
    pub fn flatten_as(&self, image: &ImageId, rename: Option<&str>) -> Result<()> {
        let bs = self.config.block_size;
        let cat = self.catalog.upgradable_read();
        let rec = &cat.entry(image)?.record;
        if rec.kind != ImageKind::Clone {
            return Err(StoreError::NotAClone(image.clone()));
        }
        if let Some(name) = rename {
            validate_name(name)?;
            if name != rec.name {
                cat.check_name_free(&rec.tenant, name)?;
            }
        }
        let layers = cat.chain(image)?;
        let indices = {
            let mut own = layers[0].write();
            let ancestors: Vec<_> = layers[1..].iter().map(|l| l.read()).collect();
            let wanted: BTreeSet<u64> = ancestors
                .iter()
                .flat_map(|a| a.indices().collect::<Vec<_>>())
                .filter(|i| !own.contains(*i))
                .collect();
            let mut copied = Vec::with_capacity(wanted.len());
            for index in wanted {
                let block = resolve(&ancestors, index).expect("indexed block").to_vec();
                if let Some(files) = &self.files {
                    files.write(image, bs, &[(index, 0, &block)])?;
                }
                // Identical to the resolved view, so inserting before commit never changes content.
                own.insert(index, block.into_boxed_slice());
                copied.push(index);
            }
            copied
        };
        let mut cat = RwLockUpgradableReadGuard::upgrade(cat);
        self.commit(StoreEvent::Flattened {
            image: image.clone(),
            rename: rename.map(str::to_string),
            indices: indices.clone(),
        })?;
        cat.detach_from_parent(image)?;
        if let Some(name) = rename {
            cat.rename(image, name.to_string())?;
        }
        self.stats.flattens.fetch_add(1, Ordering::Relaxed);
        self.stats
            .blocks_copied
            .fetch_add(indices.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    /// Independent golden copy of `source`'s resolved content.
    pub fn deep_copy(&self, tenant: &TenantId, source: &ImageId, name: &str) -> Result<ImageId> {
        validate_name(name)?;
        let bs = self.config.block_size;
        let cat = self.catalog.upgradable_read();
        let src = cat.entry(source)?.record.clone();
        if !src.readable_by(tenant) {
            return Err(StoreError::AccessDenied {
                tenant: tenant.clone(),
                image: source.clone(),
            });
        }
        cat.check_name_free(tenant, name)?;
        let id = ImageId::from_seq(cat.next_seq);
        let layers = cat.chain(source)?;
        let map = {
            let guards: Vec<_> = layers.iter().map(|l| l.read()).collect();
            let indices: BTreeSet<u64> = guards.iter().flat_map(|g| g.indices().collect::<Vec<_>>()).collect();
            if let Some(files) = &self.files {
                files.create_fresh(&id)?;
            }
            let mut map = BlockMap::new(bs);
            for index in indices {
                let block = resolve(&guards, index).expect("indexed block").to_vec();
                if let Some(files) = &self.files {
                    files.write(&id, bs, &[(index, 0, &block)])?;
                }
                map.insert(index, block.into_boxed_slice());
            }
            map
        };
        let record = ImageRecord {
            id: id.clone(),
            name: name.to_string(),
            tenant: tenant.clone(),
            kind: ImageKind::Golden,
            parent: None,
            virtual_size: src.virtual_size,
            block_size: bs,
            created_at: now_millis(),
            child_count: 0,
            shared_with: BTreeSet::new(),
        };
        let mut cat = RwLockUpgradableReadGuard::upgrade(cat);
        self.commit(StoreEvent::Created {
            record: record.clone(),
            present: map.indices().collect(),
        })?;
        let copied = map.len() as u64;
        cat.insert(record, map);
        self.stats.deep_copies.fetch_add(1, Ordering::Relaxed);
        self.stats.blocks_copied.fetch_add(copied, Ordering::Relaxed);
        Ok(id)
    }

    pub fn delete_image(&self, tenant: &TenantId, image: &ImageId) -> Result<()> {
        let mut cat = self.catalog.write();
        let rec = &cat.entry(image)?.record;
        if &rec.tenant != tenant {
            return Err(StoreError::AccessDenied {
                tenant: tenant.clone(),
                image: image.clone(),
            });
        }
        if rec.child_count > 0 {
            return Err(StoreError::HasChildren(image.clone(), rec.child_count));
        }
        if self.in_use.lock().get(image).copied().unwrap_or(0) > 0 {
            return Err(StoreError::ImageInUse(image.clone()));
        }
        self.commit(StoreEvent::Deleted { image: image.clone() })?;
        cat.remove(image);
        drop(cat);
        if let Some(files) = &self.files {
            files.remove(image)?;
        }
        Ok(())
    }

    fn owned_record(&self, cat: &Catalog, tenant: &TenantId, image: &ImageId) -> Result<ImageRecord> {
        let rec = &cat.entry(image)?.record;
        if &rec.tenant != tenant {
            return Err(StoreError::AccessDenied {
                tenant: tenant.clone(),
                image: image.clone(),
            });
        }
        Ok(rec.clone())
    }

    pub fn rename_image(&self, tenant: &TenantId, image: &ImageId, name: &str) -> Result<()> {
        validate_name(name)?;
        let mut cat = self.catalog.write();
        let rec = self.owned_record(&cat, tenant, image)?;
        if rec.name == name {
            return Ok(());
        }
        cat.check_name_free(tenant, name)?;
        self.commit(StoreEvent::Renamed {
            image: image.clone(),
            name: name.to_string(),
        })?;
        cat.rename(image, name.to_string())
    }

    /// Grants `with` read and clone access to `image`.
    pub fn share_image(&self, tenant: &TenantId, image: &ImageId, with: &TenantId) -> Result<()> {
        let mut cat = self.catalog.write();
        let rec = self.owned_record(&cat, tenant, image)?;
        if with == tenant || rec.shared_with.contains(with) {
            return Ok(());
        }
        self.commit(StoreEvent::Shared {
            image: image.clone(),
            tenant: with.clone(),
        })?;
        cat.entry_mut(image)?.record.shared_with.insert(with.clone());
        Ok(())
    }

    /// Images owned by or shared with `tenant`.
    pub fn list_images(&self, tenant: &TenantId) -> Vec<ImageRecord> {
        self.catalog
            .read()
            .images
            .values()
            .filter(|e| e.record.readable_by(tenant))
            .map(|e| e.record.clone())
            .collect()
    }

    pub fn all_images(&self) -> Vec<ImageRecord> {
        self.catalog.read().images.values().map(|e| e.record.clone()).collect()
    }

    pub fn get(&self, image: &ImageId) -> Option<ImageRecord> {
        self.catalog.read().images.get(image).map(|e| e.record.clone())
    }

    /// Record lookup with a read-access check.
    pub fn get_for(&self, tenant: &TenantId, image: &ImageId) -> Result<ImageRecord> {
        let cat = self.catalog.read();
        let rec = &cat.entry(image)?.record;
        if !rec.readable_by(tenant) {
            return Err(StoreError::AccessDenied {
                tenant: tenant.clone(),
                image: image.clone(),
            });
        }
        Ok(rec.clone())
    }

    pub fn find_by_name(&self, tenant: &TenantId, name: &str) -> Option<ImageId> {
        self.catalog
            .read()
            .names
            .get(&(tenant.clone(), name.to_string()))
            .cloned()
    }

    /// Number of layers in the image's chain (a golden image has depth 1).
    pub fn chain_depth(&self, image: &ImageId) -> Result<usize> {
        let cat = self.catalog.read();
        cat.entry(image)?;
        Ok(cat.depth(image))
    }

    /// Blocks materialized in this layer alone.
    pub fn layer_blocks(&self, image: &ImageId) -> Result<usize> {
        let cat = self.catalog.read();
        let n = cat.entry(image)?.layer.read().len();
        Ok(n)
    }

    /// Streams the resolved view of `image`.
    pub fn export_image(&self, tenant: &TenantId, image: &ImageId, out: &mut dyn Write) -> Result<u64> {
        let rec = self.get_for(tenant, image)?;
        let bs = self.config.block_size;
        let mut offset = 0;
        while offset < rec.virtual_size {
            let n = bs.min(rec.virtual_size - offset);
            let chunk = self.read_range(image, offset, n)?;
            out.write_all(&chunk)?;
            offset += n;
        }
        Ok(rec.virtual_size)
    }

    pub fn export_bytes(&self, tenant: &TenantId, image: &ImageId) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.export_image(tenant, image, &mut out)?;
        Ok(out)
    }

    /// Marks the image as exported; delete is refused while marked.
    pub fn acquire_export(&self, image: &ImageId) -> Result<()> {
        let cat = self.catalog.read();
        cat.entry(image)?;
        *self.in_use.lock().entry(image.clone()).or_default() += 1;
        Ok(())
    }

    pub fn release_export(&self, image: &ImageId) {
        let mut in_use = self.in_use.lock();
        if let Some(n) = in_use.get_mut(image) {
            *n -= 1;
            if *n == 0 {
                in_use.remove(image);
            }
        }
    }

    pub fn export_count(&self, image: &ImageId) -> u32 {
        self.in_use.lock().get(image).copied().unwrap_or(0)
    }

    pub fn stats(&self) -> StoreStats {
        let s = &self.stats;
        StoreStats {
            blocks_copied: s.blocks_copied.load(Ordering::Relaxed),
            blocks_written: s.blocks_written.load(Ordering::Relaxed),
            cow_fills: s.cow_fills.load(Ordering::Relaxed),
            flattens: s.flattens.load(Ordering::Relaxed),
            deep_copies: s.deep_copies.load(Ordering::Relaxed),
            clones: s.clones.load(Ordering::Relaxed),
        }
    }

    /// Checks the refcount invariant: every `child_count` equals the number
    /// of live images naming that image as parent.
    pub fn check_refcounts(&self) -> std::result::Result<(), String> {
        let cat = self.catalog.read();
        let mut counts: HashMap<&ImageId, u64> = HashMap::new();
        for e in cat.images.values() {
            if let Some(p) = &e.record.parent {
                if !cat.images.contains_key(p) {
                    return Err(format!("{} has missing parent {p}", e.record.id));
                }
                *counts.entry(p).or_default() += 1;
            }
        }
        for e in cat.images.values() {
            let want = counts.get(&e.record.id).copied().unwrap_or(0);
            if e.record.child_count != want {
                return Err(format!(
                    "{} child_count {} but {want} live children",
                    e.record.id, e.record.child_count
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn replay(&self, ev: &StoreEvent) -> Result<()> {
        let mut cat = self.catalog.write();
        let mut presence = self.replay_presence.lock();
        match ev {
            StoreEvent::Created { record, present } => {
                if let Some(p) = &record.parent {
                    cat.entry(p)
                        .map_err(|_| StoreError::Corrupt(format!("clone {} of missing {p}", record.id)))?;
                }
                cat.insert(record.clone(), BlockMap::new(record.block_size));
                presence.insert(record.id.clone(), present.iter().copied().collect());
            }
            StoreEvent::BlocksMaterialized { image, indices } => {
                cat.entry(image)?;
                presence
                    .entry(image.clone())
                    .or_default()
                    .extend(indices.iter().copied());
            }
            StoreEvent::Flattened { image, rename, indices } => {
                presence
                    .entry(image.clone())
                    .or_default()
                    .extend(indices.iter().copied());
                cat.detach_from_parent(image)?;
                if let Some(name) = rename {
                    cat.rename(image, name.clone())?;
                }
            }
            StoreEvent::Renamed { image, name } => cat.rename(image, name.clone())?,
            StoreEvent::Shared { image, tenant } => {
                cat.entry_mut(image)?.record.shared_with.insert(tenant.clone());
            }
            StoreEvent::Deleted { image } => {
                cat.remove(image)
                    .ok_or_else(|| StoreError::Corrupt(format!("delete of missing {image}")))?;
                presence.remove(image);
            }
        }
        Ok(())
    }

    /// Loads committed block payloads and removes layer files that belong to
    /// no live image.
    pub(crate) fn finish_replay(&self) -> Result<()> {
        let presence = std::mem::take(&mut *self.replay_presence.lock());
        let cat = self.catalog.read();
        let Some(files) = &self.files else {
            if presence.values().any(|p| !p.is_empty()) {
                return Err(StoreError::Corrupt("memory-only store cannot reload block data".into()));
            }
            return Ok(());
        };
        for (id, indices) in presence {
            let entry = cat.entry(&id)?;
            let mut layer = entry.layer.write();
            for index in indices {
                let block = files.read_block(&id, entry.record.block_size, index)?;
                layer.insert(index, block);
            }
        }
        for id in files.list()? {
            if !cat.images.contains_key(&id) {
                files.remove(&id)?;
            }
        }
        Ok(())
    }
}

fn read_full(stream: &mut dyn Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

//! Flat-buffer reference model of the layered image store. Every image is
//! a plain byte vector; clone copies the parent's bytes. Metadata rules
//! (who is writable, who may be deleted) are tracked separately so the
//! model predicts which calls must fail.

use std::collections::BTreeMap;

use metalforge::image_store::{ImageStore, StoreConfig, StoreError};
use metalforge::{ImageId, TenantId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Golden,
    Clone,
    Snapshot,
}

struct Model {
    bytes: Vec<u8>,
    kind: Kind,
    parent: Option<usize>,
    children: usize,
    exported: bool,
}

pub struct CowOracle {
    images: BTreeMap<usize, Model>,
    max_depth: usize,
}

impl CowOracle {
    fn depth(&self, i: usize) -> usize {
        let mut d = 1;
        let mut cur = self.images[&i].parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.images[&p].parent;
        }
        d
    }

    fn writable(&self, i: usize) -> bool {
        let m = &self.images[&i];
        m.kind != Kind::Snapshot && m.children == 0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Write { img: usize, off: u64, data: Vec<u8> },
    Read { img: usize, off: u64, len: u64 },
    Clone { parent: usize },
    Flatten { img: usize },
    DeepCopy { img: usize },
    Delete { img: usize },
    Export { img: usize, on: bool },
}

pub struct Sizes {
    pub block_size: u64,
    pub image_size: u64,
}

/// Picks an image size and block size for `seed`. Sizes stay ≤ 16 MiB.
pub fn sizes_for(seed: u64) -> Sizes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let block_size = [4096u64, 16384, 65536][rng.random_range(0..3)];
    let image_size = match seed % 10 {
        0 => 16 << 20,
        1..=3 => 4 << 20,
        _ => 1 << 20,
    };
    // odd tails exercise the last partial block
    let image_size = image_size - rng.random_range(0..block_size / 2);
    Sizes { block_size, image_size }
}

/// Runs `ops` random operations against a fresh store and the oracle,
/// comparing every read and the full content of every image at the end.
pub fn run_sequence(seed: u64, ops: usize) -> Result<usize, String> {
    let Sizes { block_size, image_size } = sizes_for(seed);
    let store = ImageStore::in_memory(StoreConfig {
        block_size,
        max_chain_depth: 6,
        root: None,
    })
    .map_err(|e| e.to_string())?;
    let tenant = TenantId::new("t").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut seed_bytes = vec![0u8; image_size as usize];
    for chunk in seed_bytes.chunks_mut(block_size as usize) {
        // leave some blocks sparse
        if rng.random_bool(0.7) {
            rng.fill(chunk);
        }
    }
    let g = store
        .import_image(&tenant, "g0", &mut seed_bytes.as_slice())
        .map_err(|e| e.to_string())?;
    let virtual_size = store.get(&g).unwrap().virtual_size;
    seed_bytes.resize(virtual_size as usize, 0);

    let mut oracle = CowOracle {
        images: BTreeMap::new(),
        max_depth: 6,
    };
    oracle.images.insert(
        0,
        Model {
            bytes: seed_bytes,
            kind: Kind::Golden,
            parent: None,
            children: 0,
            exported: false,
        },
    );
    let mut ids: BTreeMap<usize, ImageId> = BTreeMap::from([(0, g)]);
    let mut next = 1usize;
    let mut checked = 0usize;

    for step in 0..ops {
        let live: Vec<usize> = oracle.images.keys().copied().collect();
        let pick = |rng: &mut ChaCha8Rng| live[rng.random_range(0..live.len())];
        let op = match rng.random_range(0..100) {
            0..=39 => {
                let img = pick(&mut rng);
                let len = rng.random_range(1..=(3 * block_size).min(virtual_size));
                let off = rng.random_range(0..=virtual_size - len);
                let mut data = vec![0u8; len as usize];
                rng.fill(&mut data[..]);
                Op::Write { img, off, data }
            }
            40..=64 => {
                let img = pick(&mut rng);
                let len = rng.random_range(0..=(4 * block_size).min(virtual_size));
                let off = rng.random_range(0..=virtual_size - len);
                Op::Read { img, off, len }
            }
            65..=77 if live.len() < 14 => Op::Clone { parent: pick(&mut rng) },
            78..=83 => Op::Flatten { img: pick(&mut rng) },
            84..=86 if live.len() < 14 => Op::DeepCopy { img: pick(&mut rng) },
            87..=94 => Op::Delete { img: pick(&mut rng) },
            _ => Op::Export {
                img: pick(&mut rng),
                on: rng.random_bool(0.5),
            },
        };
        let ctx = |what: &str| format!("seed {seed} step {step} {op_name}: {what}", op_name = op_name(&op));
        match &op {
            Op::Write { img, off, data } => {
                let expect_ok = oracle.writable(*img);
                let got = store.write_range(&ids[img], *off, data);
                match (expect_ok, got) {
                    (true, Ok(())) => {
                        let m = oracle.images.get_mut(img).unwrap();
                        m.bytes[*off as usize..*off as usize + data.len()].copy_from_slice(data);
                    }
                    (false, Err(StoreError::ImmutableImage(_))) => {}
                    (e, g) => return Err(ctx(&format!("expected ok={e}, got {g:?}"))),
                }
            }
            Op::Read { img, off, len } => {
                let got = store
                    .read_range(&ids[img], *off, *len)
                    .map_err(|e| ctx(&e.to_string()))?;
                let want = &oracle.images[img].bytes[*off as usize..(*off + *len) as usize];
                if got != want {
                    return Err(ctx("content mismatch"));
                }
                checked += 1;
            }
            Op::Clone { parent } => {
                let depth = oracle.depth(*parent) + 1;
                let got = store.linked_clone(&tenant, &ids[parent], &format!("i{next}"));
                match got {
                    Ok(id) if depth <= oracle.max_depth => {
                        let bytes = oracle.images[parent].bytes.clone();
                        oracle.images.get_mut(parent).unwrap().children += 1;
                        oracle.images.insert(
                            next,
                            Model {
                                bytes,
                                kind: Kind::Clone,
                                parent: Some(*parent),
                                children: 0,
                                exported: false,
                            },
                        );
                        ids.insert(next, id);
                        next += 1;
                    }
                    Err(StoreError::ChainTooDeep { .. }) if depth > oracle.max_depth => {}
                    g => return Err(ctx(&format!("depth {depth}, got {g:?}"))),
                }
            }
            Op::Flatten { img } => {
                let is_clone = oracle.images[img].kind == Kind::Clone;
                match (is_clone, store.flatten(&ids[img])) {
                    (true, Ok(())) => {
                        let m = oracle.images.get_mut(img).unwrap();
                        m.kind = Kind::Snapshot;
                        let parent = m.parent.take().unwrap();
                        oracle.images.get_mut(&parent).unwrap().children -= 1;
                    }
                    (false, Err(StoreError::NotAClone(_))) => {}
                    (e, g) => return Err(ctx(&format!("expected ok={e}, got {g:?}"))),
                }
            }
            Op::DeepCopy { img } => {
                let id = store
                    .deep_copy(&tenant, &ids[img], &format!("i{next}"))
                    .map_err(|e| ctx(&e.to_string()))?;
                let bytes = oracle.images[img].bytes.clone();
                oracle.images.insert(
                    next,
                    Model {
                        bytes,
                        kind: Kind::Golden,
                        parent: None,
                        children: 0,
                        exported: false,
                    },
                );
                ids.insert(next, id);
                next += 1;
            }
            Op::Delete { img } => {
                let m = &oracle.images[img];
                let got = store.delete_image(&tenant, &ids[img]);
                match got {
                    Ok(()) if m.children == 0 && !m.exported => {
                        let m = oracle.images.remove(img).unwrap();
                        if let Some(p) = m.parent {
                            oracle.images.get_mut(&p).unwrap().children -= 1;
                        }
                        ids.remove(img);
                    }
                    Err(StoreError::HasChildren(_, n)) if m.children > 0 && n == m.children as u64 => {}
                    Err(StoreError::ImageInUse(_)) if m.children == 0 && m.exported => {}
                    g => return Err(ctx(&format!("children {}, got {g:?}", m.children))),
                }
                if oracle.images.is_empty() {
                    break;
                }
            }
            Op::Export { img, on } => {
                let m = oracle.images.get_mut(img).unwrap();
                if *on && !m.exported {
                    store.acquire_export(&ids[img]).map_err(|e| ctx(&e.to_string()))?;
                    m.exported = true;
                } else if !*on && m.exported {
                    store.release_export(&ids[img]);
                    m.exported = false;
                }
            }
        }
    }

    for (i, m) in &oracle.images {
        let got = store
            .read_range(&ids[i], 0, virtual_size)
            .map_err(|e| format!("seed {seed} final read: {e}"))?;
        if got != m.bytes {
            return Err(format!("seed {seed}: final content of image {i} differs"));
        }
        let rec = store.get(&ids[i]).unwrap();
        if rec.child_count != m.children as u64 {
            return Err(format!("seed {seed}: child_count of image {i} differs"));
        }
    }
    store.check_refcounts().map_err(|e| format!("seed {seed}: {e}"))?;
    Ok(checked)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Write { .. } => "write",
        Op::Read { .. } => "read",
        Op::Clone { .. } => "clone",
        Op::Flatten { .. } => "flatten",
        Op::DeepCopy { .. } => "deep_copy",
        Op::Delete { .. } => "delete",
        Op::Export { .. } => "export",
    }
}

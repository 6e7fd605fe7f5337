//! One sparse file per image layer: block `i` lives at byte offset
//! `i * block_size`; unwritten blocks are holes. Which blocks are live is
//! recorded in the journal, never inferred from the file.

use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::types::ImageId;

#[derive(Debug)]
pub(crate) struct BlockFiles {
    dir: PathBuf,
}

impl BlockFiles {
    pub fn open(root: &Path) -> io::Result<Self> {
        let dir = root.join("blocks");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, id: &ImageId) -> PathBuf {
        self.dir.join(format!("{id}.sparse"))
    }

    fn open_rw(&self, id: &ImageId) -> io::Result<File> {
        OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(self.path(id))
    }

    /// Writes `data` at `block_offset` inside block `index`.
    pub fn write(&self, id: &ImageId, block_size: u64, writes: &[(u64, u64, &[u8])]) -> io::Result<()> {
        if writes.is_empty() {
            return Ok(());
        }
        let f = self.open_rw(id)?;
        for (index, block_offset, data) in writes {
            f.write_all_at(data, index * block_size + block_offset)?;
        }
        Ok(())
    }

    /// Creates (or truncates) the layer file. Used for brand-new layers so a
    /// stale file from an uncommitted earlier attempt cannot leak data.
    pub fn create_fresh(&self, id: &ImageId) -> io::Result<()> {
        File::create(self.path(id)).map(|_| ())
    }

    pub fn read_block(&self, id: &ImageId, block_size: u64, index: u64) -> io::Result<Box<[u8]>> {
        let f = File::open(self.path(id))?;
        let mut buf = vec![0u8; block_size as usize];
        f.read_exact_at(&mut buf, index * block_size)?;
        Ok(buf.into_boxed_slice())
    }

    pub fn remove(&self, id: &ImageId) -> io::Result<()> {
        match fs::remove_file(self.path(id)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            r => r,
        }
    }

    /// Image ids with a layer file on disk.
    pub fn list(&self) -> io::Result<Vec<ImageId>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".sparse")) {
                out.push(ImageId::from(stem));
            }
        }
        out.sort();
        Ok(out)
    }
}

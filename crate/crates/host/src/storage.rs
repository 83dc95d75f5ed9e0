//! Sealed-object backends for the host: a directory tree on the REE
//! filesystem, or memory.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use teeod_core::internal_api::{MemoryBackend, ObjectBackend, ObjectDigest, StorageError};
use teeod_core::protocol::Uuid;

/// Blobs at `<root>/<hex uuid>/<hex sha256(object id)>`. Every store goes
/// through a temporary file and a rename, so a crash leaves either the old
/// or the new blob.
#[derive(Debug, Clone)]
pub struct FileBackend {
    root: PathBuf,
}

fn backend_err(e: io::Error) -> StorageError {
    StorageError::Backend(e.to_string())
}

impl FileBackend {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FileBackend { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ta_dir(&self, ta: &Uuid) -> PathBuf {
        self.root.join(hex::encode(ta.as_bytes()))
    }

    pub fn blob_path(&self, ta: &Uuid, id: &ObjectDigest) -> PathBuf {
        self.ta_dir(ta).join(hex::encode(id))
    }
}

impl ObjectBackend for FileBackend {
    fn load(&self, ta: &Uuid, id: &ObjectDigest) -> Result<Option<Vec<u8>>, StorageError> {
        match fs::read(self.blob_path(ta, id)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(backend_err(e)),
        }
    }

    fn store(&self, ta: &Uuid, id: &ObjectDigest, blob: &[u8]) -> Result<(), StorageError> {
        let dir = self.ta_dir(ta);
        fs::create_dir_all(&dir).map_err(backend_err)?;
        let final_path = self.blob_path(ta, id);
        let tmp = dir.join(format!(".{}.tmp", hex::encode(id)));
        let mut f = fs::File::create(&tmp).map_err(backend_err)?;
        f.write_all(blob).map_err(backend_err)?;
        f.sync_all().map_err(backend_err)?;
        fs::rename(&tmp, &final_path).map_err(backend_err)
    }

    fn remove(&self, ta: &Uuid, id: &ObjectDigest) -> Result<bool, StorageError> {
        match fs::remove_file(self.blob_path(ta, id)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(backend_err(e)),
        }
    }

    fn list(&self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError> {
        let entries = match fs::read_dir(self.ta_dir(ta)) {
            Ok(entries) => entries,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(backend_err(e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let name = entry.map_err(backend_err)?.file_name();
            let Some(name) = name.to_str() else { continue };
            let mut id = [0u8; 32];
            if hex::decode_to_slice(name, &mut id).is_ok() {
                out.push(id);
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Backend chosen by configuration.
#[derive(Debug)]
pub enum Backend {
    Memory(MemoryBackend),
    File(FileBackend),
}

impl ObjectBackend for Backend {
    fn load(&self, ta: &Uuid, id: &ObjectDigest) -> Result<Option<Vec<u8>>, StorageError> {
        match self {
            Backend::Memory(b) => b.load(ta, id),
            Backend::File(b) => b.load(ta, id),
        }
    }

    fn store(&self, ta: &Uuid, id: &ObjectDigest, blob: &[u8]) -> Result<(), StorageError> {
        match self {
            Backend::Memory(b) => b.store(ta, id, blob),
            Backend::File(b) => b.store(ta, id, blob),
        }
    }

    fn remove(&self, ta: &Uuid, id: &ObjectDigest) -> Result<bool, StorageError> {
        match self {
            Backend::Memory(b) => b.remove(ta, id),
            Backend::File(b) => b.remove(ta, id),
        }
    }

    fn list(&self, ta: &Uuid) -> Result<Vec<ObjectDigest>, StorageError> {
        match self {
            Backend::Memory(b) => b.list(ta),
            Backend::File(b) => b.list(ta),
        }
    }
}

//! Cached preprocessed-tensor archive.
//!
//! Optional artifact written by `prepare --cache`: every augmented sample
//! materialized once and stored so training does not re-decode and re-rotate
//! images each epoch. Entries use the same tensor encoding as checkpoints
//! (name, rank, dims, little-endian f32 values) under a `FNTA` magic, with a
//! trailing CRC-32. Entry names are `<filename>#<aug-tag>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::SampleRef;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FNTA";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    height: usize,
    width: usize,
    channels: usize,
}

/// Canonical entry name for a sample.
pub fn entry_name(r: &SampleRef) -> String {
    format!("{}#{}", r.file, r.aug.as_str())
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::CheckpointFormat {
        reason: format!("archive: {}", reason.into()),
    }
}

/// Stream `(name, [H,W,C] tensor)` entries into an archive file.
pub fn write_archive(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
    entries: impl IntoIterator<Item = Result<(String, Tensor)>>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: crc32fast::Hasher::new(),
        path,
    };

    let header = serde_json::to_vec(&ArchiveHeader {
        height,
        width,
        channels,
    })
    .map_err(|e| format_err(format!("header encode: {e}")))?;
    w.write(ARCHIVE_MAGIC)?;
    w.write(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write(&(header.len() as u32).to_le_bytes())?;
    w.write(&header)?;

    for entry in entries {
        let (name, tensor) = entry?;
        if tensor.dims() != [height, width, channels] {
            return Err(format_err(format!(
                "entry {name}: expected [{height},{width},{channels}], got {}",
                tensor.shape()
            )));
        }
        w.write(&(name.len() as u32).to_le_bytes())?;
        w.write(name.as_bytes())?;
        w.write(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write(&buf)?;
    }

    let crc = w.hasher.clone().finalize();
    w.write_unhashed(&crc.to_le_bytes())?;
    w.inner.flush().map_err(|e| Error::io(path, e))
}

struct HashingWriter<'a> {
    inner: BufWriter<File>,
    hasher: crc32fast::Hasher,
    path: &'a Path,
}

impl HashingWriter<'_> {
    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        self.write_unhashed(bytes)
    }

    fn write_unhashed(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(self.path, e))
    }
}

/// Random-access reader over an archive. Opening verifies the checksum and
/// indexes every entry; `load` seeks. Safe to share behind `&self`.
pub struct ArchiveReader {
    file: Mutex<BufReader<File>>,
    index: std::collections::HashMap<String, (u64, Shape)>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ArchiveReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len < 16 {
            return Err(format_err("file too short"));
        }
        let mut reader = BufReader::new(file);

        // pass 1: checksum everything but the trailer
        let mut hasher = crc32fast::Hasher::new();
        let mut remaining = len - 4;
        let mut buf = vec![0u8; 1 << 16];
        while remaining > 0 {
            let take = remaining.min(buf.len() as u64) as usize;
            reader
                .read_exact(&mut buf[..take])
                .map_err(|e| Error::io(path, e))?;
            hasher.update(&buf[..take]);
            remaining -= take as u64;
        }
        let mut trailer = [0u8; 4];
        reader
            .read_exact(&mut trailer)
            .map_err(|e| Error::io(path, e))?;
        if hasher.finalize() != u32::from_le_bytes(trailer) {
            return Err(Error::CheckpointIntegrity);
        }

        // pass 2: parse headers and index entry offsets
        reader
            .seek(SeekFrom::Start(0))
            .map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != ARCHIVE_MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = read_u32(&mut reader, path)?;
        if version > ARCHIVE_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: ARCHIVE_VERSION,
            });
        }
        let header_len = read_u32(&mut reader, path)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        reader
            .read_exact(&mut header_bytes)
            .map_err(|e| Error::io(path, e))?;
        let header: ArchiveHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| format_err(format!("header decode: {e}")))?;

        let mut index = std::collections::HashMap::new();
        let mut pos = 12 + header_len as u64;
        let end = len - 4;
        while pos < end {
            let name_len = read_u32(&mut reader, path)? as u64;
            let mut name_bytes = vec![0u8; name_len as usize];
            reader
                .read_exact(&mut name_bytes)
                .map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| format_err("entry name is not utf-8"))?;
            let rank = read_u32(&mut reader, path)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut reader, path)? as usize);
            }
            let shape = Shape::new(dims)?;
            let data_len = shape.element_count() as u64 * 4;
            let data_offset = pos + 4 + name_len + 4 + rank as u64 * 4;
            index.insert(name, (data_offset, shape));
            pos = data_offset + data_len;
            reader
                .seek(SeekFrom::Start(pos))
                .map_err(|e| Error::io(path, e))?;
        }

        Ok(ArchiveReader {
            file: Mutex::new(reader),
            index,
            height: header.height,
            width: header.width,
            channels: header.channels,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Target image shape the archive was built for.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn load(&self, name: &str) -> Result<Tensor> {
        let (offset, shape) = self
            .index
            .get(name)
            .ok_or_else(|| format_err(format!("no entry named {name}")))?;
        let mut file = self.file.lock().expect("archive reader poisoned");
        file.seek(SeekFrom::Start(*offset))
            .map_err(|e| format_err(format!("seek: {e}")))?;
        let count = shape.element_count();
        let mut raw = vec![0u8; count * 4];
        file.read_exact(&mut raw)
            .map_err(|e| format_err(format!("read: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Tensor::from_values(shape.clone(), data)
    }
}

fn read_u32(r: &mut BufReader<File>, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

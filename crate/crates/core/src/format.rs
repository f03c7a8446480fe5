//! `EVOL` / `ELBL` binary files.
//!
//! Both formats are little-endian with a fixed-width header:
//!
//! ```text
//! EVOL: "EVOL" u16 version | u32 nx ny nz C | f32 sx sy sz | f32 payload
//! ELBL: "ELBL" u16 version | u32 nx ny nz N | f32 sx sy sz | u16 labels
//!       | N x (u32 byte length, UTF-8 name)
//! ```
//!
//! Payload order matches the in-memory layout of [`Volume`] and [`LabelMap`].

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Volume};

pub const VOLUME_MAGIC: [u8; 4] = *b"EVOL";
pub const LABELMAP_MAGIC: [u8; 4] = *b"ELBL";
pub const FORMAT_VERSION: u16 = 1;

/// Bytes before the payload: magic, version, four u32 and three f32.
pub const HEADER_LEN: usize = 4 + 2 + 16 + 12;

struct Header {
    dims: Dims,
    count: usize,
    voxel_size: [f32; 3],
}

fn encode_header(out: &mut Vec<u8>, magic: [u8; 4], h: &Header) {
    out.extend_from_slice(&magic);
    out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    for v in [h.dims.nx, h.dims.ny, h.dims.nz, h.count] {
        out.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    for s in h.voxel_size {
        out.write_f32::<LittleEndian>(s).unwrap();
    }
}

fn decode_header(bytes: &[u8], magic: [u8; 4], path: &Path) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(truncated(path, HEADER_LEN, bytes.len()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(path, HEADER_LEN, bytes.len()));
    }
    let mut cur = Cursor::new(&bytes[4..HEADER_LEN]);
    let version = cur.read_u16::<LittleEndian>().unwrap();
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let mut u = [0usize; 4];
    for v in &mut u {
        *v = cur.read_u32::<LittleEndian>().unwrap() as usize;
    }
    let mut voxel_size = [0f32; 3];
    for s in &mut voxel_size {
        *s = cur.read_f32::<LittleEndian>().unwrap();
    }
    Ok(Header {
        dims: Dims::new(u[0], u[1], u[2]),
        count: u[3],
        voxel_size,
    })
}

pub(crate) fn truncated(path: &Path, needed: usize, found: usize) -> Error {
    Error::Truncated {
        path: path.to_path_buf(),
        needed,
        found,
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_volume(v: &Volume<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.data().len());
    encode_header(
        &mut out,
        VOLUME_MAGIC,
        &Header {
            dims: v.dims(),
            count: v.channels(),
            voxel_size: v.voxel_size(),
        },
    );
    for &x in v.data() {
        out.write_f32::<LittleEndian>(x).unwrap();
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume<f32>> {
    let h = decode_header(bytes, VOLUME_MAGIC, path)?;
    let n = h.dims.voxels() * h.count;
    let needed = HEADER_LEN + 4 * n;
    if bytes.len() < needed {
        return Err(truncated(path, needed, bytes.len()));
    }
    if bytes.len() > needed {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - needed
        )));
    }
    let mut data = vec![0f32; n];
    Cursor::new(&bytes[HEADER_LEN..needed])
        .read_f32_into::<LittleEndian>(&mut data)
        .unwrap();
    Volume::new(h.dims, h.count, h.voxel_size, data)
}

pub fn save_volume(v: &Volume<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    let path = path.as_ref();
    decode_volume(&read_file(path)?, path)
}

pub fn encode_labelmap(lm: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * lm.labels().len());
    encode_header(
        &mut out,
        LABELMAP_MAGIC,
        &Header {
            dims: lm.dims(),
            count: lm.num_classes(),
            voxel_size: lm.voxel_size(),
        },
    );
    for &l in lm.labels() {
        out.write_u16::<LittleEndian>(l).unwrap();
    }
    for name in lm.names() {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
    }
    out
}

pub fn decode_labelmap(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let h = decode_header(bytes, LABELMAP_MAGIC, path)?;
    let n = h.dims.voxels();
    let labels_end = HEADER_LEN + 2 * n;
    if bytes.len() < labels_end {
        return Err(truncated(path, labels_end, bytes.len()));
    }
    let mut labels = vec![0u16; n];
    Cursor::new(&bytes[HEADER_LEN..labels_end])
        .read_u16_into::<LittleEndian>(&mut labels)
        .unwrap();

    let mut pos = labels_end;
    let mut names = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        if bytes.len() < pos + 4 {
            return Err(truncated(path, pos + 4, bytes.len()));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() < pos + len {
            return Err(truncated(path, pos + len, bytes.len()));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|e| Error::Format(format!("{}: label name: {e}", path.display())))?;
        names.push(name.to_owned());
        pos += len;
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after label table",
            path.display(),
            bytes.len() - pos
        )));
    }
    LabelMap::with_voxel_size(h.dims, h.voxel_size, labels, names)
}

pub fn save_labelmap(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_labelmap(lm))
}

pub fn load_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_labelmap(&read_file(path)?, path)
}

/// Which of the two formats a file holds, judged by its magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Volume,
    LabelMap,
}

pub fn sniff(path: impl AsRef<Path>) -> Result<FileKind> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    match bytes.get(..4) {
        Some(m) if m == VOLUME_MAGIC => Ok(FileKind::Volume),
        Some(m) if m == LABELMAP_MAGIC => Ok(FileKind::LabelMap),
        Some(m) => Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: VOLUME_MAGIC,
            found: m.try_into().unwrap(),
        }),
        None => Err(truncated(path, 4, bytes.len())),
    }
}

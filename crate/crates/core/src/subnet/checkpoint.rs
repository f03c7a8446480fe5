//! `EPRM` checkpoints: little-endian, config echo followed by raw weights.
//!
//! ```text
//! "EPRM" u16 version | u32 input_channels | u32 num_classes | u64 seed
//!   | u32 L | L x (u32 out_channels, u32 kernel)
//!   | u32 len, UTF-8 subnet id | u32 N | N x (u32 len, UTF-8 class name)
//!   | f64 input mean | f64 input scale | u32 P | P x f32 parameters
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{InputNorm, LayerSpec, SubnetConfig, SubnetParams};
use crate::error::{Error, Result};
use crate::evidential::SubnetId;
use crate::format::{read_file, truncated, write_file};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EPRM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(net: &SubnetParams) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::with_capacity(64 + 4 * net.num_params());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(cfg.input_channels as u32)
        .unwrap();
    out.write_u32::<LittleEndian>(cfg.num_classes as u32)
        .unwrap();
    out.write_u64::<LittleEndian>(cfg.seed).unwrap();
    out.write_u32::<LittleEndian>(cfg.layers.len() as u32)
        .unwrap();
    for l in &cfg.layers {
        out.write_u32::<LittleEndian>(l.out_channels as u32)
            .unwrap();
        out.write_u32::<LittleEndian>(l.kernel as u32).unwrap();
    }
    put_str(&mut out, net.subnet_id().as_str());
    out.write_u32::<LittleEndian>(net.class_names().len() as u32)
        .unwrap();
    for name in net.class_names() {
        put_str(&mut out, name);
    }
    let norm = net.input_norm();
    out.write_f64::<LittleEndian>(norm.mean).unwrap();
    out.write_f64::<LittleEndian>(norm.scale).unwrap();
    out.write_u32::<LittleEndian>(net.num_params() as u32)
        .unwrap();
    for &p in net.params() {
        out.write_f32::<LittleEndian>(p).unwrap();
    }
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn eof(&self, need: usize) -> Error {
        let len = self.cur.get_ref().len();
        truncated(self.path, self.cur.position() as usize + need, len)
    }

    fn u32(&mut self) -> Result<usize> {
        self.cur
            .read_u32::<LittleEndian>()
            .map(|v| v as usize)
            .map_err(|_| self.eof(4))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        let remaining = self.cur.get_ref().len() - self.cur.position() as usize;
        if len > remaining {
            return Err(self.eof(len));
        }
        let mut buf = vec![0u8; len];
        self.cur.read_exact(&mut buf).map_err(|_| self.eof(len))?;
        String::from_utf8(buf)
            .map_err(|_| Error::Format(format!("{}: name is not UTF-8", self.path.display())))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<SubnetParams> {
    if bytes.len() < 6 {
        return Err(truncated(path, 6, bytes.len()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    let mut r = Reader {
        cur: Cursor::new(bytes),
        path,
    };
    r.cur.set_position(4);
    let version = r.cur.read_u16::<LittleEndian>().unwrap();
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let input_channels = r.u32()?;
    let num_classes = r.u32()?;
    let seed = r.cur.read_u64::<LittleEndian>().map_err(|_| r.eof(8))?;
    let n_layers = r.u32()?;
    if n_layers > bytes.len() {
        return Err(r.eof(8 * n_layers));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let out_channels = r.u32()?;
        let kernel = r.u32()?;
        layers.push(LayerSpec {
            out_channels,
            kernel,
        });
    }
    let id = r.string()?;
    let n_names = r.u32()?;
    if n_names > bytes.len() {
        return Err(r.eof(4 * n_names));
    }
    let names = (0..n_names)
        .map(|_| r.string())
        .collect::<Result<Vec<_>>>()?;
    let mean = r.cur.read_f64::<LittleEndian>().map_err(|_| r.eof(8))?;
    let scale = r.cur.read_f64::<LittleEndian>().map_err(|_| r.eof(8))?;
    let count = r.u32()?;
    let start = r.cur.position() as usize;
    let need = start + 4 * count;
    if bytes.len() < need {
        return Err(truncated(path, need, bytes.len()));
    }
    if bytes.len() > need {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after checkpoint",
            path.display(),
            bytes.len() - need
        )));
    }
    let params = bytes[start..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let config = SubnetConfig {
        input_channels,
        num_classes,
        layers,
        seed,
    };
    SubnetParams::from_parts(config, SubnetId::new(id), names, params)?
        .with_input_norm(InputNorm { mean, scale })
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(net: &SubnetParams, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(net))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SubnetParams> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelMap;

    fn net() -> SubnetParams {
        SubnetParams::init(
            SubnetConfig::with_hidden(3, &[4, 5], 77),
            SubnetId::new("md"),
            vec!["bg".into(), "".into(), "white matter".into()],
        )
        .unwrap()
        .with_input_norm(InputNorm {
            mean: 7.5e-4,
            scale: 1.0 / 3.3e-4,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode_checkpoint(&n);
        let back = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, n);
        let a: Vec<u32> = n.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u32> = back.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn on_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.eprm");
        let n = net();
        save_checkpoint(&n, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), n);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&net());
        let p = Path::new("c");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, p),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad, p),
            Err(Error::UnsupportedVersion { .. })
        ));
        for cut in [3, 10, 30, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], p).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long, p), Err(Error::Format(_))));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&nan, p),
            Err(Error::NonFinite { .. })
        ));
        // The input scale sits 12 bytes before the parameter count.
        let at = bytes.len() - 4 * net().num_params() - 12;
        let mut zero_scale = bytes.clone();
        zero_scale[at..at + 8].copy_from_slice(&0f64.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&zero_scale, p),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn default_names_survive() {
        let n = SubnetParams::init(
            SubnetConfig::new(4, 1),
            SubnetId::new("fa"),
            LabelMap::default_names(4),
        )
        .unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&n), Path::new("x")).unwrap();
        assert_eq!(back.class_names(), n.class_names());
        assert_eq!(back.config(), n.config());
    }
}

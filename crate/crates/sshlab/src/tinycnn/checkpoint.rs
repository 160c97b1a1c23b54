//! Bit-exact model persistence.
//!
//! Layout (little-endian): magic "SSHW", u16 version = 1, u16 flags, then
//! u32 in_channels, height, width, three channel widths, three kernel sizes,
//! u64 training seed, all tensors as f64 in declaration order, and a CRC32
//! of everything preceding it.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Architecture, CnnModel, Params, KERNELS, N_CONV};
use crate::error::{Result, SshError};

const MAGIC: &[u8; 4] = b"SSHW";
const VERSION: u16 = 1;

pub fn save_checkpoint(model: &CnnModel, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LittleEndian>(VERSION)?;
    buf.write_u16::<LittleEndian>(0)?;
    let arch = &model.arch;
    for x in [arch.in_channels, arch.height, arch.width] {
        buf.write_u32::<LittleEndian>(x as u32)?;
    }
    for x in arch.widths {
        buf.write_u32::<LittleEndian>(x as u32)?;
    }
    for k in KERNELS {
        buf.write_u32::<LittleEndian>(k as u32)?;
    }
    buf.write_u64::<LittleEndian>(model.seed)?;
    let mut err = None;
    model.params.for_each(|x| {
        if let Err(e) = buf.write_f64::<LittleEndian>(x) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CnnModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 56 {
        return Err(SshError::Format("checkpoint shorter than header".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = (&crc_bytes[..]).read_u32::<LittleEndian>()?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(SshError::Checksum { stored, computed });
    }

    let mut rd = body;
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SshError::Format(format!("bad magic {magic:?}")));
    }
    let version = rd.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(SshError::Format(format!("unsupported version {version}")));
    }
    let _flags = rd.read_u16::<LittleEndian>()?;
    let in_channels = rd.read_u32::<LittleEndian>()? as usize;
    let height = rd.read_u32::<LittleEndian>()? as usize;
    let width = rd.read_u32::<LittleEndian>()? as usize;
    let mut widths = [0usize; N_CONV];
    for w in widths.iter_mut() {
        *w = rd.read_u32::<LittleEndian>()? as usize;
    }
    for expected in KERNELS {
        let k = rd.read_u32::<LittleEndian>()? as usize;
        if k != expected {
            return Err(SshError::Format(format!(
                "kernel size {k} does not match the fixed architecture"
            )));
        }
    }
    let seed = rd.read_u64::<LittleEndian>()?;

    let arch = Architecture::new(in_channels, height, width, widths)?;
    let mut params = Params::zeros(&arch);
    if rd.len() != arch.n_params() * 8 {
        return Err(SshError::Format(format!(
            "tensor payload {} bytes, expected {}",
            rd.len(),
            arch.n_params() * 8
        )));
    }
    let mut flat = vec![0.0f64; arch.n_params()];
    rd.read_f64_into::<LittleEndian>(&mut flat)?;
    params.set_flat(&flat);
    Ok(CnnModel { arch, params, seed })
}

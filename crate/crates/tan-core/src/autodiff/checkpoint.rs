//! Parameter checkpoint format: little-endian binary, `TANCKPT1` header,
//! then per-tensor records of name length (u32), name bytes, rows (u32),
//! cols (u32) and row-major 64-bit floats.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, TanError};

const MAGIC: &[u8; 8] = b"TANCKPT1";

pub fn save_checkpoint(path: &Path, params: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    for (name, value) in params {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(value.nrows() as u32).to_le_bytes())?;
        out.write_all(&(value.ncols() as u32).to_le_bytes())?;
        for &v in value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TanError::InvalidInput(format!(
            "{}: not a TANCKPT1 checkpoint",
            path.display()
        )));
    }
    let mut params = BTreeMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match file.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TanError::InvalidInput("checkpoint name is not UTF-8".into()))?;
        let mut dim = [0u8; 4];
        file.read_exact(&mut dim)?;
        let rows = u32::from_le_bytes(dim) as usize;
        file.read_exact(&mut dim)?;
        let cols = u32::from_le_bytes(dim) as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let array = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| TanError::InvalidInput(format!("checkpoint shape: {e}")))?;
        params.insert(name, array);
    }
    Ok(params)
}

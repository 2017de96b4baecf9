//! Binary model checkpoints: magic, format version, table shapes, then the
//! raw f64 tables in little-endian order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::encoder::ModelParams;
use crate::error::{EalignError, Result};

const MAGIC: &[u8; 4] = b"EALN";
const VERSION: u32 = 1;

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| EalignError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EalignError::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(params.dim as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(params.depth as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(params.entity.nrows() as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(params.relation.nrows() as u64).map_err(io)?;
    for &x in params.entity.iter() {
        w.write_f64::<LittleEndian>(x).map_err(io)?;
    }
    for &x in params.relation.iter() {
        w.write_f64::<LittleEndian>(x).map_err(io)?;
    }
    for v in &params.attention {
        for &x in v.iter() {
            w.write_f64::<LittleEndian>(x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| EalignError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| EalignError::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(EalignError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(EalignError::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let dim = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let depth = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let num_entities = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let num_relations = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    if dim == 0 || depth == 0 {
        return Err(EalignError::Checkpoint("degenerate shapes".into()));
    }

    let mut read_table = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut buf = vec![0.0f64; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut buf).map_err(io)?;
        Array2::from_shape_vec((rows, cols), buf)
            .map_err(|_| EalignError::Checkpoint("table shape".into()))
    };
    let entity = read_table(num_entities, dim)?;
    let relation = read_table(num_relations, dim)?;
    let mut attention = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut buf = vec![0.0f64; 3 * dim];
        r.read_f64_into::<LittleEndian>(&mut buf).map_err(io)?;
        attention.push(Array1::from(buf));
    }

    let params = ModelParams {
        entity,
        relation,
        attention,
        dim,
        depth,
    };
    params.validate()?;
    Ok(params)
}

const TARGET_MAGIC: &[u8; 4] = b"EALT";

/// Persists the frozen alignment targets alongside a model checkpoint so
/// evaluation can rebuild the scorer without re-deriving the initial model.
pub fn save_targets(targets: &crate::trainer::InitTargets, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| EalignError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EalignError::io(path, e);
    let m = targets.matrix();
    w.write_all(TARGET_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(m.nrows() as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64).map_err(io)?;
    for &x in m.iter() {
        w.write_f64::<LittleEndian>(x).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_targets(path: &Path) -> Result<crate::trainer::InitTargets> {
    let file = std::fs::File::open(path).map_err(|e| EalignError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| EalignError::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TARGET_MAGIC {
        return Err(EalignError::Checkpoint("not a target file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(EalignError::Checkpoint(format!(
            "unsupported target file version {version}, expected {VERSION}"
        )));
    }
    let rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut buf = vec![0.0f64; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut buf).map_err(io)?;
    let m = Array2::from_shape_vec((rows, cols), buf)
        .map_err(|_| EalignError::Checkpoint("target shape".into()))?;
    Ok(crate::trainer::InitTargets::from_matrix(m))
}

//! `TWRK` checkpoints: a stack of adapted layers sharing one team geometry.
//!
//! Layout (little-endian): magic `TWRK\0\0\0\x01`; u32 layer_count, u32 T,
//! u32 r; then per layer u32 m, u32 n, u8 mode tag, followed by W, the T
//! A-factors and the T B-factors, each as an embedded `TNSR` record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapter::{AdapterMode, TeamworkAdapter};
use crate::error::{Error, Result};
use crate::tensor::tnsr::{read_u32, Tensor};

pub const MAGIC: [u8; 8] = *b"TWRK\0\0\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub team_size: usize,
    pub rank: usize,
    pub layers: Vec<TeamworkAdapter>,
}

impl Checkpoint {
    pub fn new(layers: Vec<TeamworkAdapter>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::param("checkpoint needs at least one layer"))?;
        let (team_size, rank) = (first.team_size(), first.rank());
        if layers.iter().any(|l| l.team_size() != team_size || l.rank() != rank) {
            return Err(Error::shape("all layers of a checkpoint must share team size and rank"));
        }
        Ok(Checkpoint { team_size, rank, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(&mut BufReader::new(file))
    }
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(ckpt.layers.len() as u32).to_le_bytes())?;
    w.write_all(&(ckpt.team_size as u32).to_le_bytes())?;
    w.write_all(&(ckpt.rank as u32).to_le_bytes())?;
    for layer in &ckpt.layers {
        w.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
        w.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
        w.write_all(&[layer.mode().tag()])?;
        Tensor::from_matrix(layer.weight()).write_to(w)?;
        for a in layer.factors_a() {
            Tensor::from_matrix(a).write_to(w)?;
        }
        for b in layer.factors_b() {
            Tensor::from_matrix(b).write_to(w)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad TWRK magic {magic:?}")));
    }
    let layer_count = read_u32(r)? as usize;
    let team_size = read_u32(r)? as usize;
    let rank = read_u32(r)? as usize;
    if layer_count == 0 || team_size == 0 || rank == 0 {
        return Err(Error::format("TWRK header has a zero count"));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let m = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let mode = AdapterMode::from_tag(tag[0])?;
        let mut next = |want: (usize, usize), what: &str| -> Result<_> {
            let mat = Tensor::read_from(r)?.into_matrix()?;
            if mat.shape() != want {
                return Err(Error::format(format!(
                    "layer {l}: {what} is {}x{}, expected {}x{}",
                    mat.rows(),
                    mat.cols(),
                    want.0,
                    want.1
                )));
            }
            Ok(mat)
        };
        let weight = next((m, n), "W")?;
        let a = (0..team_size).map(|_| next((m, rank), "A")).collect::<Result<Vec<_>>>()?;
        let b = (0..team_size).map(|_| next((rank, n), "B")).collect::<Result<Vec<_>>>()?;
        layers.push(TeamworkAdapter::new(weight, a, b, mode)?);
    }
    Ok(Checkpoint { team_size, rank, layers })
}

//! Binary checkpoint format: named f64 arrays with shape headers plus the
//! sampler RNG state, enough to restore a run deterministically. Writes go
//! through a temp file and an atomic rename.

use std::collections::BTreeMap;
use std::io::{Error, ErrorKind::InvalidData, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: u32,
    pub rng: RngSnapshot,
    /// Sorted by name so the byte layout is canonical.
    pub arrays: BTreeMap<String, Tensor>,
}

/// Enough of a ChaCha8 stream to restore it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed);
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, tensor) in &self.arrays {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&buf)?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::new(InvalidData, "bad checkpoint magic"));
        }
        let version = read_u32(&mut f)?;
        if version != VERSION {
            return Err(Error::new(InvalidData, format!("unsupported version {version}")));
        }
        let seed = read_u64(&mut f)?;
        let epoch = read_u32(&mut f)?;
        let mut rng_seed = [0u8; 32];
        f.read_exact(&mut rng_seed)?;
        let mut wp = [0u8; 16];
        f.read_exact(&mut wp)?;
        let word_pos = u128::from_le_bytes(wp);
        let stream = read_u64(&mut f)?;
        let count = read_u32(&mut f)? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::new(InvalidData, "non-utf8 array name"))?;
            let rank = read_u32(&mut f)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut f)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0.0f64; len];
            let mut cell = [0u8; 8];
            for v in &mut data {
                f.read_exact(&mut cell)?;
                *v = f64::from_le_bytes(cell);
            }
            arrays.insert(name, Tensor::new(shape, data));
        }
        Ok(Self {
            seed,
            epoch,
            rng: RngSnapshot { seed: rng_seed, word_pos, stream },
            arrays,
        })
    }
}

fn read_u32(f: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

//! Binary checkpoint container and atomic file writes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTFC" | version u32 | precision bits u32
//! encoder: depth, heads, dim, mlp_dim, n_max as u64
//! rng seed u64 | rng word position u128
//! tensor count u64, then per tensor:
//!   name len u32 | name bytes | trainable u8 | rank u32 | dims u64.. | values
//! optimizer flag u8, then if 1:
//!   lr, beta1, beta2, eps as f64 | step u64 | entry count u64, then per entry:
//!   name len u32 | name bytes | len u64 | first f64.. | second f64..
//! ```
//!
//! Tensor values use the checkpoint precision; optimizer moments are always
//! f64 so a resumed run continues exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};
use crate::tensor::{ParamSet, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"MTFC";
pub const VERSION: u32 = 1;

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Every named tensor; trainable flags double as freeze flags.
    pub tensors: ParamSet,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    /// Gathers the encoder and any further parameter sets into one table.
    pub fn capture<'a>(
        precision: Precision,
        encoder: &'a Encoder,
        others: impl IntoIterator<Item = &'a ParamSet>,
        optimizer: Option<&Adam>,
        rng_seed: u64,
    ) -> Result<Self> {
        let mut tensors = ParamSet::new();
        for set in std::iter::once(&encoder.params).chain(others) {
            for p in set.iter() {
                let mut v = Tensor::new(p.value.shape().to_vec(), p.value.data().to_vec())?;
                for x in v.data_mut() {
                    *x = precision.round(*x);
                }
                let id = tensors.add(p.name.clone(), v)?;
                tensors.param_mut(id).trainable = p.trainable;
            }
        }
        Ok(Self {
            precision,
            encoder: encoder.config().clone(),
            rng_seed,
            rng_word_pos: 0,
            tensors,
            optimizer: optimizer.cloned(),
        })
    }

    /// The backbone held in this checkpoint.
    pub fn build_encoder(&self) -> Result<Encoder> {
        let mut subset = ParamSet::new();
        for p in self
            .tensors
            .iter()
            .filter(|p| p.name.starts_with("encoder."))
        {
            let id = subset.add(p.name.clone(), p.value.clone())?;
            subset.param_mut(id).trainable = p.trainable;
        }
        Encoder::from_params(self.encoder.clone(), &subset)
    }

    /// Overwrites every parameter of `target` with its stored counterpart.
    pub fn restore(&self, target: &mut ParamSet) -> Result<()> {
        target.load_values(&self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.precision.bits().to_le_bytes());
        let e = &self.encoder;
        for v in [e.depth, e.heads, e.dim, e.mlp_dim, e.n_max] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        b.extend_from_slice(&self.rng_seed.to_le_bytes());
        b.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for p in self.tensors.iter() {
            put_name(&mut b, &p.name);
            b.push(p.trainable as u8);
            b.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            b.extend_from_slice(&p.value.to_le_bytes(self.precision));
        }
        match &self.optimizer {
            None => b.push(0),
            Some(opt) => {
                b.push(1);
                for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                b.extend_from_slice(&opt.step.to_le_bytes());
                b.extend_from_slice(&(opt.moments.len() as u64).to_le_bytes());
                for (name, m) in &opt.moments {
                    put_name(&mut b, name);
                    b.extend_from_slice(&(m.first.len() as u64).to_le_bytes());
                    for v in m.first.iter().chain(&m.second) {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint: bad magic bytes".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let precision = Precision::from_bits(r.u32("precision")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let encoder = EncoderConfig {
            depth: r.usize("encoder.depth")?,
            heads: r.usize("encoder.heads")?,
            dim: r.usize("encoder.dim")?,
            mlp_dim: r.usize("encoder.mlp_dim")?,
            n_max: r.usize("encoder.n_max")?,
        };
        encoder
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored encoder config invalid: {e}")))?;
        let rng_seed = r.u64("rng seed")?;
        let rng_word_pos =
            u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let count = r.usize("tensor count")?;
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let name = r.name()?;
            let trainable = match r.take(1, "trainable flag")?[0] {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: bad trainable flag {other}"
                    )))
                }
            };
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.usize("extent")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let width = precision.bits() as usize / 8;
            let raw = r.take(
                len.checked_mul(width)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?,
                &name,
            )?;
            let data: Vec<f64> = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let t =
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            let id = tensors
                .add(name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.param_mut(id).trainable = trainable;
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let mut opt = Adam::new(r.f64("lr")?).with_precision(precision);
                opt.beta1 = r.f64("beta1")?;
                opt.beta2 = r.f64("beta2")?;
                opt.eps = r.f64("eps")?;
                opt.step = r.u64("step")?;
                let n = r.usize("moment count")?;
                let mut moments = BTreeMap::new();
                for _ in 0..n {
                    let name = r.name()?;
                    let len = r.usize("moment length")?;
                    let first = r.f64s(len, &name)?;
                    let second = r.f64s(len, &name)?;
                    moments.insert(name, Moments { first, second });
                }
                opt.moments = moments;
                Some(opt)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            precision,
            encoder,
            rng_seed,
            rng_word_pos,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_name(b: &mut Vec<u8>, name: &str) {
    b.extend_from_slice(&(name.len() as u32).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} too large")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("{what}: length overflows")))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32("name length")? as usize;
        let raw = self.take(n, "name")?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Encoder {
        Encoder::new(
            EncoderConfig {
                depth: 1,
                heads: 2,
                dim: 4,
                mlp_dim: 8,
                n_max: 4,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let ck = Checkpoint::capture(Precision::F64, &tiny(), [], None, 1).unwrap();
        let mut b = ck.to_bytes();
        b[0] = b'X';
        assert!(
            matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("magic"))
        );
        let mut b = ck.to_bytes();
        b[4] = 9;
        assert!(
            matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
    }

    #[test]
    fn truncation_rejected() {
        let b = Checkpoint::capture(Precision::F32, &tiny(), [], None, 1)
            .unwrap()
            .to_bytes();
        for cut in [3, 20, b.len() - 1] {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err());
        }
    }

    #[test]
    fn f32_round_trip_is_byte_identical() {
        let mut enc = tiny();
        enc.params
            .by_name_mut("encoder.final_ln.beta")
            .unwrap()
            .value
            .data_mut()[0] = 0.1;
        let ck = Checkpoint::capture(Precision::F32, &enc, [], Some(&Adam::new(0.5)), 11).unwrap();
        let b = ck.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes(), b);
        assert_eq!(back.optimizer.unwrap().lr, 0.5);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}

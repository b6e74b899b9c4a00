//! Single-file model archive.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic       8 bytes  "GSAVCKPT"
//! version     u32
//! iterations  u64      optimizer steps taken
//! config      u64 length + UTF-8 TOML (fully resolved)
//! template    u64 length + UTF-8 JSON
//! tensors     u32 count, then per tensor:
//!             u32 name length + UTF-8 name
//!             u8  parameter class index
//!             u64 row width
//!             u64 element count + that many f64 values
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Avatar;
use crate::params::{ParamClass, ParamStore};
use crate::template::SkinnedTemplate;

pub const MAGIC: &[u8; 8] = b"GSAVCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub template: SkinnedTemplate,
    pub store: ParamStore,
    pub iterations: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn from_avatar(avatar: &Avatar, config: &Config, iterations: u64) -> Self {
        Self {
            config: config.clone(),
            template: avatar.template.clone(),
            store: avatar.store.clone(),
            iterations,
        }
    }

    pub fn into_avatar(self) -> Result<Avatar> {
        Avatar::attach(self.template, self.config.model, self.store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iterations.to_le_bytes());
        for text in [self.config.to_toml_string(), self.template.to_json_string()] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let class = ParamClass::ALL
                .iter()
                .position(|c| *c == p.class)
                .expect("known class");
            out.push(class as u8);
            out.extend_from_slice(&(p.row_width as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
            for v in &p.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let iterations = r.u64()?;
        let n = r.len()?;
        let config = Config::from_toml_str(&r.string(n)?)?;
        let n = r.len()?;
        let template = SkinnedTemplate::from_json_str(&r.string(n)?)?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let class = *ParamClass::ALL
                .get(r.u8()? as usize)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: unknown class")))?;
            let row_width = r.len()?;
            let len = r.len()?;
            let bytes = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
            )?;
            let value = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if store.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            store.register(name, class, value, row_width);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            template,
            store,
            iterations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulation::PoseParams;
    use crate::scene::GaussianSet;
    use crate::template::CapsuleChain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Avatar, Config) {
        let mut cfg = Config::default();
        cfg.model.skinning_width = 8;
        cfg.model.skinning_depth = 1;
        cfg.model.nonrigid.width = 8;
        cfg.model.nonrigid.depth = 1;
        cfg.model.hashgrid.log2_table_size = 6;
        cfg.model.hashgrid.levels = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = CapsuleChain::default().build().unwrap();
        let set = GaussianSet::init_from_template(&t, 20, cfg.model.feature_dim, &mut rng).unwrap();
        let a = Avatar::new(t, cfg.model, &set, &[PoseParams::identity(2)], &mut rng).unwrap();
        (a, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (a, cfg) = tiny();
        let c = Checkpoint::from_avatar(&a, &cfg, 7);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.iterations, 7);
        assert_eq!(back.config, cfg);
        let b = back.into_avatar().unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.class, q.class);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let (a, cfg) = tiny();
        let mut bytes = Checkpoint::from_avatar(&a, &cfg, 0).to_bytes();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion {
                found: 99,
                expected: VERSION
            })
        ));
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let (a, cfg) = tiny();
        let bytes = Checkpoint::from_avatar(&a, &cfg, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn hash_is_sha256_of_bytes() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

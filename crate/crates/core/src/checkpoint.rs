//! Binary containers: training checkpoints and raw rasters.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! b"DSEGCKPT" u32 version
//! u32 len, config TOML (utf-8)
//! [u8; 32] sha256 of the model section of the config
//! u64 epochs completed
//! u32 channels, then channels × (f64 mean, f64 std)
//! u32 count, then per parameter:
//!     u16 name len, name, u8 tag code, u8 rank, rank × u32 dims, f32 values
//! u8 has_optimizer; if 1: u64 step, u32 count, then per entry:
//!     u16 name len, name, u32 len, len × f32 m, len × f32 v
//! ```
//!
//! Raster layout: `b"DSEGRAST" u32 version, u32 height, u32 width,
//! u32 channels`, then row-major channels-last f32 values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::optim::AdamState;
use crate::params::ParamTag;
use crate::raster::Raster;

const CKPT_MAGIC: &[u8; 8] = b"DSEGCKPT";
const RASTER_MAGIC: &[u8; 8] = b"DSEGRAST";
const VERSION: u32 = 1;

/// Hex sha256 of the canonical JSON form of a model configuration.
pub fn model_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("model config serialises");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub model_hash: String,
    pub epoch: u64,
    pub norm: NormStats,
    pub params: Vec<StoredParam>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(
        cfg: &RunConfig,
        model: &SegModel,
        norm: &NormStats,
        epoch: u64,
        optimizer: Option<AdamState>,
    ) -> Result<Self> {
        let mut params = Vec::with_capacity(model.params().len());
        for p in model.params().iter() {
            params.push(StoredParam {
                name: p.name.clone(),
                tag: p.tag,
                shape: p.var.dims().to_vec(),
                values: p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
            });
        }
        Ok(Self {
            config_text: cfg.to_toml(),
            model_hash: model_hash(model.config()),
            epoch,
            norm: norm.clone(),
            params,
            optimizer,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
    }

    /// Fails with both hashes when `cfg` describes a different model.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let h = model_hash(cfg);
        if h != self.model_hash {
            return Err(Error::ConfigMismatch {
                config_hash: h,
                checkpoint_hash: self.model_hash.clone(),
            });
        }
        Ok(())
    }

    /// Copies the stored weights into `model`.
    pub fn restore(&self, model: &SegModel) -> Result<()> {
        self.check_compatible(model.config())?;
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let t = Tensor::from_slice(&p.values, p.shape.as_slice(), store.device())?;
            store.assign(&p.name, &t)?;
            if store.get(&p.name).map(|q| q.tag) != Some(p.tag) {
                return Err(Error::Checkpoint(format!("tag of '{}' differs from the model", p.name)));
            }
        }
        Ok(())
    }

    /// Rebuilds the checkpointed model (f32, CPU) with its stored weights.
    pub fn load_model(&self) -> Result<(RunConfig, SegModel)> {
        let cfg = self.config()?;
        let model = SegModel::new(&cfg.model(), cfg.seed, DType::F32, &candle_core::Device::Cpu)?;
        self.restore(&model)?;
        Ok((cfg, model))
    }

    pub fn tag_census(&self) -> BTreeMap<ParamTag, (usize, usize)> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(p.tag).or_insert((0, 0));
            e.0 += 1;
            e.1 += p.values.len();
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_bytes32(w, self.config_text.as_bytes())?;
        let hash = hex::decode(&self.model_hash).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(&hash)?;
        w.write_u64::<LE>(self.epoch)?;
        w.write_u32::<LE>(self.norm.mean.len() as u32)?;
        for (m, s) in self.norm.mean.iter().zip(&self.norm.std) {
            w.write_f64::<LE>(*m)?;
            w.write_f64::<LE>(*s)?;
        }
        w.write_u32::<LE>(self.params.len() as u32)?;
        for p in &self.params {
            write_name(w, &p.name)?;
            w.write_u8(p.tag.code())?;
            w.write_u8(p.shape.len() as u8)?;
            for &d in &p.shape {
                w.write_u32::<LE>(d as u32)?;
            }
            write_f32s(w, &p.values)?;
        }
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(st) => {
                w.write_u8(1)?;
                w.write_u64::<LE>(st.step)?;
                w.write_u32::<LE>(st.moments.len() as u32)?;
                for (name, (m, v)) in &st.moments {
                    write_name(w, name)?;
                    w.write_u32::<LE>(m.len() as u32)?;
                    write_f32s(w, m)?;
                    write_f32s(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_text = String::from_utf8(read_bytes32(r)?).map_err(|_| bad("config is not utf-8"))?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let epoch = r.read_u64::<LE>()?;
        let c = r.read_u32::<LE>()? as usize;
        let mut norm = NormStats {
            mean: Vec::with_capacity(c),
            std: Vec::with_capacity(c),
        };
        for _ in 0..c {
            norm.mean.push(r.read_f64::<LE>()?);
            norm.std.push(r.read_f64::<LE>()?);
        }
        let n = r.read_u32::<LE>()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_name(r)?;
            let tag = ParamTag::from_code(r.read_u8()?).ok_or_else(|| bad("unknown parameter tag"))?;
            let rank = r.read_u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let values = read_f32s(r, shape.iter().product())?;
            params.push(StoredParam {
                name,
                tag,
                shape,
                values,
            });
        }
        let optimizer = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LE>()?;
                let k = r.read_u32::<LE>()? as usize;
                let mut moments = BTreeMap::new();
                for _ in 0..k {
                    let name = read_name(r)?;
                    let len = r.read_u32::<LE>()? as usize;
                    let m = read_f32s(r, len)?;
                    let v = read_f32s(r, len)?;
                    moments.insert(name, (m, v));
                }
                Some(AdamState { step, moments })
            }
            _ => return Err(bad("corrupt optimizer flag")),
        };
        Ok(Self {
            config_text,
            model_hash: hex::encode(hash),
            epoch,
            norm,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::at_path(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::at_path(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn write_bytes32(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_u32::<LE>(b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes32(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = r.read_u32::<LE>()? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_u16::<LE>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let n = r.read_u16::<LE>()? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    for &x in v {
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LE>(&mut v)?;
    Ok(v)
}

pub fn write_raster<D>(path: &Path, img: &Raster<D>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(RASTER_MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let (h, wd, c) = img.shape();
    for d in [h, wd, c] {
        w.write_u32::<LE>(d as u32)?;
    }
    write_f32s(&mut w, img.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_raster<D>(path: &Path) -> Result<Raster<D>> {
    let f = File::open(path).map_err(|e| Error::at_path(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != RASTER_MAGIC {
        return Err(Error::invalid(format!("{} is not a raster container", path.display())));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported raster version {version}")));
    }
    let h = r.read_u32::<LE>()? as usize;
    let w = r.read_u32::<LE>()? as usize;
    let c = r.read_u32::<LE>()? as usize;
    let data = read_f32s(&mut r, h * w * c)?;
    Raster::from_vec(h, w, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CartesianRaster;
    use candle_core::Device;

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = RunConfig::tiny();
        let model = SegModel::new(&cfg.model(), 3, DType::F32, &Device::Cpu).unwrap();
        let ck = Checkpoint::capture(&cfg, &model, &NormStats::identity(3), 2, None).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config().unwrap(), cfg);

        let other = RunConfig {
            use_cbam: false,
            ..RunConfig::tiny()
        };
        match back.check_compatible(&other.model()) {
            Err(Error::ConfigMismatch {
                config_hash,
                checkpoint_hash,
            }) => {
                assert_eq!(checkpoint_hash, ck.model_hash);
                assert_ne!(config_hash, checkpoint_hash);
            }
            r => panic!("expected mismatch, got {r:?}"),
        }
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT"[..]).is_err());
    }

    #[test]
    fn restore_copies_weights() {
        let cfg = RunConfig::tiny();
        let a = SegModel::new(&cfg.model(), 1, DType::F32, &Device::Cpu).unwrap();
        let b = SegModel::new(&cfg.model(), 2, DType::F32, &Device::Cpu).unwrap();
        assert_ne!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
        Checkpoint::capture(&cfg, &a, &NormStats::identity(3), 0, None)
            .unwrap()
            .restore(&b)
            .unwrap();
        assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
    }

    #[test]
    fn raster_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        let img = CartesianRaster::from_fn(3, 5, 2, |i, j, c| (i * 10 + j) as f32 / 100.0 + c as f32);
        write_raster(&p, &img).unwrap();
        let back: CartesianRaster = read_raster(&p).unwrap();
        assert_eq!(back, img);
    }
}

//! Binary weight files and the bundle of all three networks they hold.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FDSN"                 magic
//! u32                    format version (1)
//! u64                    training steps taken
//! u32, bytes             dataset tag (length-prefixed UTF-8)
//! u32                    tensor count
//! per tensor:
//!   u32, bytes           name (length-prefixed UTF-8)
//!   u32                  rank
//!   u64 x rank           extents
//!   f32 x product        values, row-major
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dc::DcNet;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::net::{Module, NetConfig, StereoNet};

pub const MAGIC: &[u8; 4] = b"FDSN";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus training metadata, exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub steps: u64,
    pub dataset: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {} at byte {}", what, self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::format("checkpoint", format!("{} is not UTF-8", what)))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.steps.to_le_bytes());
        put_str(&mut out, &self.dataset);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("checkpoint", "missing FDSN magic"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {}", version)));
        }
        let steps = r.u64("step count")?;
        let dataset = r.string("dataset tag")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 4 {
                return Err(Error::format("checkpoint", format!("{} has rank {}", name, rank)));
            }
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, e| a.checked_mul(*e));
            let len = len
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::format("checkpoint", format!("{} has impossible shape {:?}", name, shape)))?;
            let raw = r.take(4 * len, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes after tensor table"));
        }
        Ok(Checkpoint {
            steps,
            dataset,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.shape())
    }
}

/// Trainable scalars per sub-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub features: usize,
    pub similarity: usize,
    pub completion: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.features + self.similarity + self.completion
    }
}

/// Stereo network, completion network and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub stereo: StereoNet<f32>,
    pub dc: DcNet<f32>,
    pub steps: u64,
    pub dataset: String,
}

impl Model {
    pub fn new(config: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stereo = StereoNet::new(config, &mut rng);
        let dc = DcNet::new(config.dc_widths, &mut rng);
        Model {
            config: config.clone(),
            stereo,
            dc,
            steps: 0,
            dataset: String::new(),
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            features: self.stereo.features.param_count(),
            similarity: self.stereo.similarity.param_count(),
            completion: self.dc.param_count(),
        }
    }

    /// Largest rank among all parameter tensors.
    pub fn max_param_rank(&self) -> usize {
        self.stereo
            .named_params()
            .iter()
            .chain(self.dc.named_params().iter())
            .map(|(_, t)| t.rank())
            .max()
            .unwrap_or(0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .stereo
            .named_params()
            .into_iter()
            .chain(self.dc.named_params())
            .map(|(n, t)| (n, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape")))
            .collect();
        Checkpoint {
            steps: self.steps,
            dataset: self.dataset.clone(),
            tensors,
        }
    }

    /// Rebuilds the networks; widths are read off the stored shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = infer_config(ck)?;
        let mut model = Model::new(&config, 0);
        let mut slots: Vec<(String, &mut Tensor<f32>)> = {
            let names: Vec<String> = model
                .stereo
                .named_params()
                .into_iter()
                .chain(model.dc.named_params())
                .map(|(n, _)| n)
                .collect();
            let params = model.stereo.params_mut().into_iter().chain(model.dc.params_mut());
            names.into_iter().zip(params).collect()
        };
        if slots.len() != ck.tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", slots.len(), ck.tensors.len()),
            ));
        }
        for (name, slot) in slots.iter_mut() {
            let (_, t) = ck
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", name)))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{} has shape {:?}, expected {:?}", name, t.shape(), slot.shape()),
                ));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        model.steps = ck.steps;
        model.dataset = ck.dataset.clone();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn infer_config(ck: &Checkpoint) -> Result<NetConfig> {
    let missing = |n: &str| Error::format("checkpoint", format!("missing tensor {}", n));
    let count_layers = |prefix: &str| {
        (0..)
            .take_while(|i| ck.shape_of(&format!("{}.{}.weight", prefix, i)).is_some())
            .count()
    };
    let fe = count_layers("features");
    let feature_widths = (0..fe)
        .map(|i| ck.shape_of(&format!("features.{}.weight", i)).unwrap()[0])
        .collect();
    let similarity_layers = count_layers("similarity");
    let similarity_growth = ck.shape_of("similarity.0.weight").ok_or_else(|| missing("similarity.0.weight"))?[0];
    let deformable = ck.shape_of("similarity.offsets.weight").is_some();
    let dc0 = ck.shape_of("dc.0.weight").ok_or_else(|| missing("dc.0.weight"))?[0];
    let dc1 = ck.shape_of("dc.1.weight").ok_or_else(|| missing("dc.1.weight"))?[0];
    Ok(NetConfig {
        feature_widths,
        similarity_growth,
        similarity_layers,
        deformable,
        dc_widths: [dc0, dc1],
    })
}

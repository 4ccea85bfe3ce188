//! Versioned checkpoint container: model configuration, all parameters and
//! running buffers, plus optimizer state for resumable training.
//!
//! Layout: an 8-byte magic, a JSON metadata blob (config, step), then a
//! table of named little-endian `f32` tensors.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GLFFCKP\x01";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: ModelConfig,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Param = 0,
    Buffer = 1,
    Optimizer = 2,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Kind> {
        match v {
            0 => Ok(Kind::Param),
            1 => Ok(Kind::Buffer),
            2 => Ok(Kind::Optimizer),
            other => Err(Error::Checkpoint(format!("unknown tensor kind {other}"))),
        }
    }
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: BTreeMap<String, ArrayD<f32>>,
    pub buffers: BTreeMap<String, ArrayD<f32>>,
    pub optimizer: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    /// Captures a model (and optional optimizer tensors) into a container.
    pub fn capture(model: &Model, step: u64, optimizer: BTreeMap<String, ArrayD<f32>>) -> Self {
        let mut params = BTreeMap::new();
        for (_, e) in model.params.iter() {
            params.insert(e.name.clone(), e.value.to_owned());
        }
        let mut buffers = BTreeMap::new();
        for (id, name) in model.params.buffers() {
            buffers.insert(name.to_string(), model.params.read_buffer(id));
        }
        Checkpoint {
            config: model.cfg.clone(),
            step,
            params,
            buffers,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        let meta = serde_json::to_vec(&Meta {
            version: VERSION,
            config: self.config.clone(),
            step: self.step,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_u64::<LittleEndian>(meta.len() as u64).map_err(io_err)?;
        w.write_all(&meta).map_err(io_err)?;

        let total = self.params.len() + self.buffers.len() + self.optimizer.len();
        w.write_u64::<LittleEndian>(total as u64).map_err(io_err)?;
        let mut write_tensor = |name: &str, kind: Kind, t: &ArrayD<f32>| -> Result<()> {
            w.write_u16::<LittleEndian>(name.len() as u16).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_u8(kind as u8).map_err(io_err)?;
            w.write_u8(t.ndim() as u8).map_err(io_err)?;
            for d in t.shape() {
                w.write_u64::<LittleEndian>(*d as u64).map_err(io_err)?;
            }
            let owned;
            let slice = match t.as_slice() {
                Some(s) => s,
                None => {
                    owned = t.as_standard_layout().to_owned();
                    owned.as_slice().unwrap()
                }
            };
            for v in slice {
                w.write_f32::<LittleEndian>(*v).map_err(io_err)?;
            }
            Ok(())
        };
        for (name, t) in &self.params {
            write_tensor(name, Kind::Param, t)?;
        }
        for (name, t) in &self.buffers {
            write_tensor(name, Kind::Buffer, t)?;
        }
        for (name, t) in &self.optimizer {
            write_tensor(name, Kind::Optimizer, t)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "not a checkpoint file: {}",
                path.display()
            )));
        }
        let meta_len = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes).map_err(io_err)?;
        let meta: Meta =
            serde_json::from_slice(&meta_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                meta.version
            )));
        }
        let count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(io_err)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io_err)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
            let kind = Kind::from_u8(r.read_u8().map_err(io_err)?)?;
            let ndim = r.read_u8().map_err(io_err)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u64::<LittleEndian>().map_err(io_err)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io_err)?;
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
            match kind {
                Kind::Param => params.insert(name, tensor),
                Kind::Buffer => buffers.insert(name, tensor),
                Kind::Optimizer => optimizer.insert(name, tensor),
            };
        }
        Ok(Checkpoint {
            config: meta.config,
            step: meta.step,
            params,
            buffers,
            optimizer,
        })
    }

    /// Rebuilds a model with this checkpoint's configuration and tensors.
    pub fn restore(&self) -> Result<Model> {
        let model = Model::new(self.config.clone())?;
        self.restore_into(model)
    }

    fn restore_into(&self, mut model: Model) -> Result<Model> {
        let ids: Vec<(crate::tensor::ParamId, String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
            .collect();
        for (id, name, shape) in ids {
            let stored = self.params.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
            })?;
            if stored.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    shape
                )));
            }
            model.params.set(id, stored.clone());
        }
        let buffer_ids: Vec<(crate::tensor::BufferId, String)> = model
            .params
            .buffers()
            .map(|(id, n)| (id, n.to_string()))
            .collect();
        for (id, name) in buffer_ids {
            let stored = self
                .buffers
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing buffer {name}")))?;
            model.params.write_buffer(id, stored.clone());
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::image::ImageTensor;
    use ndarray::Array3;

    #[test]
    fn save_load_roundtrip_preserves_scores() {
        let model = Model::new(ModelConfig::tiny(11)).unwrap();
        let img = ImageTensor::from_pixels(Array3::from_shape_fn((96, 96, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 29) as f32 / 29.0
        }));
        let s0 = model.score(&img).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut opt = BTreeMap::new();
        opt.insert("adam.step".to_string(), ArrayD::from_elem(IxDyn(&[1]), 42.0));
        Checkpoint::capture(&model, 7, opt).save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 7);
        assert_eq!(loaded.optimizer["adam.step"][[0]], 42.0);
        let restored = loaded.restore().unwrap();
        let s1 = restored.score(&img).unwrap();
        assert_eq!(s0.fake_probability, s1.fake_probability);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

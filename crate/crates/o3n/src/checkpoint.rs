//! Named-tensor checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "O3NC" | u32 version=1 | u32 tensor_count
//! per tensor:  u16 name_len | name bytes | u8 ndims | u32 dims... | f32 payload
//! trailer:     u32 metadata_len | UTF-8 key=value lines
//! ```

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"O3NC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights plus run metadata, in a stable tensor order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, metadata: Vec<(String, String)>) -> Self {
        let mut tensors = ParamSet::new();
        for (name, t) in params.iter() {
            let clean = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
            tensors.insert(name, clean).expect("names unique in source set");
        }
        Self { tensors, metadata }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in self.tensors.iter() {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::ConfigError(format!("tensor name too long: {name:?}")));
            }
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(tensor.shape().len() as u8);
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::MalformedContainer("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::MalformedContainer(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::MalformedContainer("tensor name is not UTF-8".into()))?;
            let ndims = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors
                .insert(&name, Tensor::new(shape, data)?)
                .map_err(|_| Error::MalformedContainer(format!("duplicate tensor {name:?}")))?;
        }
        let meta_len = cur.u32()? as usize;
        let meta_text = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|_| Error::MalformedContainer("metadata is not UTF-8".into()))?;
        if cur.pos != bytes.len() {
            return Err(Error::MalformedContainer("trailing bytes after metadata".into()));
        }
        let metadata = meta_text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|line| match line.split_once('=') {
                Some((k, v)) => Ok((k.to_string(), v.to_string())),
                None => Err(Error::MalformedContainer(format!(
                    "metadata line without '=': {line:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::MalformedContainer("checkpoint truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

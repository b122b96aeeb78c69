//! Checkpoint container: a text header followed by raw little-endian f32 data.
//!
//! ```text
//! CTXMT-CHECKPOINT 1
//! d_model=64
//! ...
//! meta.step=500
//! param src.emb 120x64
//! ...
//! end
//! <binary payload, one block per param line, in order>
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::Tensor;

pub const MAGIC: &str = "CTXMT-CHECKPOINT 1";

/// A named tensor list behind a key=value header. Used for model checkpoints
/// and for optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&self.header);
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("param {name} {}\n", dims.join("x")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut pos = 0;
        let mut line_no = 0;
        let mut header = String::new();
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(Error::parse(source, line_no + 1, "truncated header"));
            };
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| Error::parse(source, line_no + 1, "header is not UTF-8"))?;
            pos += nl + 1;
            line_no += 1;
            if line_no == 1 {
                if line != MAGIC {
                    return Err(Error::parse(source, 1, format!("expected `{MAGIC}`")));
                }
                continue;
            }
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("param ") {
                let mut it = rest.split(' ');
                let (Some(name), Some(dims), None) = (it.next(), it.next(), it.next()) else {
                    return Err(Error::parse(source, line_no, "expected `param NAME DIMS`"));
                };
                let shape = dims
                    .split('x')
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(source, line_no, format!("bad shape `{dims}`: {e}")))?;
                manifest.push((name.to_string(), shape));
            } else {
                header.push_str(line);
                header.push('\n');
            }
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(Error::parse(source, line_no, format!("payload truncated in `{name}`")));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos = end;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::parse(source, line_no, "trailing bytes after payload"));
        }
        Ok(Container { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Extra `meta.*` header entries stored alongside a model.
pub type Meta = Vec<(String, String)>;

pub fn model_to_container(model: &Model, meta: &[(String, String)]) -> Container {
    let mut header = String::new();
    model.cfg.write_kv(&mut header);
    for (k, v) in meta {
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    Container {
        header,
        tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    }
}

pub fn model_from_container(c: Container, source: &str) -> Result<(Model, Meta)> {
    let mut kv = KvFile::parse(&c.header, source)?;
    let meta = kv.take_prefixed("meta.");
    let cfg = ModelConfig::read_kv(&mut kv, None)?;
    kv.finish()?;
    let mut params = ParamStore::new();
    for (n, t) in c.tensors {
        params.insert(n, t);
    }
    Ok((Model::from_params(cfg, params)?, meta))
}

pub fn save_model(model: &Model, meta: &[(String, String)], path: &Path) -> Result<()> {
    model_to_container(model, meta).save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, Meta)> {
    let c = Container::load(path)?;
    model_from_container(c, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::IntegrationMode;

    #[test]
    fn bytes_roundtrip_bit_exact() {
        let cfg = ModelConfig::desk(12, 14).with_mode(IntegrationMode::MultiInsideSeq).with_context_layers(1);
        let mut m = Model::new(cfg, 9).unwrap();
        m.params.get_mut("out.b").unwrap().data_mut()[0] = f32::from_bits(0x0000_0001);
        let meta = vec![("step".to_string(), "12".to_string())];
        let bytes = model_to_container(&m, &meta).to_bytes();
        let (back, meta_back) = model_from_container(Container::from_bytes(&bytes, "t").unwrap(), "t").unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.cfg, m.cfg);
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn corrupt_inputs_are_parse_errors() {
        let m = Model::new(ModelConfig::desk(8, 8), 0).unwrap();
        let bytes = model_to_container(&m, &[]).to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], "t").is_err());
        assert!(Container::from_bytes(b"NOPE\nend\n", "t").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra, "t").is_err());
    }
}

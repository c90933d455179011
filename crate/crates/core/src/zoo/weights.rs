//! Binary weights: `MSYW`, u32 version, u32 config length + config text,
//! then records of (u16 key length, key, u32 count, count x f32), all
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig, Result, ZooError};
use crate::tensor::{Element, Tensor};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MSYW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub config_text: String,
    pub records: Vec<(String, Vec<f32>)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ZooError + '_ {
    move |source| ZooError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl WeightsFile {
    pub fn from_model<T: Element>(model: &Model<T>) -> Self {
        let config_text = model
            .config
            .as_ref()
            .map(ModelConfig::to_text)
            .unwrap_or_default();
        let records = model
            .store
            .iter()
            .map(|(k, p)| {
                (
                    k.to_string(),
                    p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect();
        WeightsFile {
            config_text,
            records,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.config_text.as_bytes());
        for (key, data) in &self.records {
            let klen = u16::try_from(key.len())
                .map_err(|_| ZooError::Malformed(format!("key too long: {key}")))?;
            buf.extend_from_slice(&klen.to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Atomic write: sibling temporary file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }
}

pub fn encode<T: Element>(model: &Model<T>) -> Result<Vec<u8>> {
    WeightsFile::from_model(model).to_bytes()
}

pub fn save_weights<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    WeightsFile::from_model(model).save(path)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ZooError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightsFile> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = match c.take(4, "magic") {
        Ok(m) => m.try_into().expect("4 bytes"),
        Err(_) => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(ZooError::BadMagic(m));
        }
    };
    if magic != WEIGHTS_MAGIC {
        return Err(ZooError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(ZooError::VersionMismatch {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let clen = c.u32("config length")? as usize;
    let config_text = std::str::from_utf8(c.take(clen, "config text")?)
        .map_err(|e| ZooError::Malformed(format!("config text: {e}")))?
        .to_string();
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let klen = c.u16("key length")? as usize;
        let key = std::str::from_utf8(c.take(klen, "key")?)
            .map_err(|e| ZooError::Malformed(format!("key: {e}")))?
            .to_string();
        let count = c.u32("element count")? as usize;
        let raw = c.take(count * 4, &format!("payload of {key}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push((key, data));
    }
    Ok(WeightsFile {
        config_text,
        records,
    })
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

impl<T: Element> Model<T> {
    /// Replaces every parameter from `file`. The key sequence and element
    /// counts must match exactly; nothing is modified on mismatch.
    pub fn assign(&mut self, file: &WeightsFile) -> Result<()> {
        let ours: Vec<(&str, usize)> = self
            .store
            .iter()
            .map(|(k, p)| (k, p.tensor.numel()))
            .collect();
        if ours.len() != file.records.len() {
            return Err(ZooError::KeyMismatch(format!(
                "model has {} tensors, file has {}",
                ours.len(),
                file.records.len()
            )));
        }
        for ((k, n), (fk, data)) in ours.iter().zip(&file.records) {
            if k != fk {
                return Err(ZooError::KeyMismatch(format!(
                    "expected key {k}, found {fk}"
                )));
            }
            if *n != data.len() {
                return Err(ZooError::KeyMismatch(format!(
                    "{k}: model has {n} elements, file has {}",
                    data.len()
                )));
            }
        }
        for (key, data) in &file.records {
            let p = self.store.get_mut(key).expect("checked above");
            let shape = p.tensor.shape();
            p.tensor =
                Tensor::from_vec(shape, data.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        }
        Ok(())
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let file = read_weights(path)?;
        self.assign(&file)
    }
}

/// Rebuilds the model named by the file's config echo and fills it.
pub fn load_weights(path: &Path) -> Result<Model<f32>> {
    let file = read_weights(path)?;
    let cfg = ModelConfig::from_text(&file.config_text)?;
    let mut model = Model::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.assign(&file)?;
    Ok(model)
}

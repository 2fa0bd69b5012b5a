//! Checkpoint format shared by the generator, discriminator and optimizers:
//! a `key = value` text manifest listing each tensor's name, shape and byte
//! offset, next to a flat binary file of little-endian f64 values laid out in
//! manifest order. Scalar state (iteration counters, config echo) rides along
//! as plain manifest keys.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// In-memory checkpoint contents.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub scalars: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn insert_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: impl ToString) {
        self.scalars.insert(name.into(), value.to_string());
    }

    pub fn tensor(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<&str> {
        self.scalars
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar `{name}`")))
    }

    pub fn scalar_parsed<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        self.scalar(name)?.parse().map_err(|_| {
            Error::Checkpoint(format!(
                "scalar `{name}` = `{}` failed to parse",
                self.scalars[name]
            ))
        })
    }

    /// Writes `<stem>.manifest` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let (manifest_path, bin_path) = Self::paths(stem);
        let mut manifest = String::new();
        manifest.push_str("format = specgan-checkpoint-v1\n");
        for (k, v) in &self.scalars {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        let mut bin = Vec::new();
        let mut offset = 0usize;
        manifest.push_str(&format!("tensor.count = {}\n", self.tensors.len()));
        for (i, (name, (shape, data))) in self.tensors.iter().enumerate() {
            let shape_str = shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!("tensor.{i}.name = {name}\n"));
            manifest.push_str(&format!("tensor.{i}.shape = {shape_str}\n"));
            manifest.push_str(&format!("tensor.{i}.offset = {offset}\n"));
            for v in data {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            offset += data.len() * 8;
        }
        std::fs::write(manifest_path, manifest)?;
        let mut f = std::fs::File::create(bin_path)?;
        f.write_all(&bin)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest_path, bin_path) = Self::paths(stem);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let mut kv = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Checkpoint(format!("manifest line {} is not key = value", lineno + 1))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut bin = Vec::new();
        std::fs::File::open(&bin_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", bin_path.display())))?
            .read_to_end(&mut bin)?;

        let count: usize = kv
            .remove("tensor.count")
            .ok_or_else(|| Error::Checkpoint("manifest missing tensor.count".into()))?
            .parse()
            .map_err(|_| Error::Checkpoint("bad tensor.count".into()))?;
        let mut ckpt = Checkpoint::default();
        for i in 0..count {
            let name = kv
                .remove(&format!("tensor.{i}.name"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor.{i}.name")))?;
            let shape_str = kv
                .remove(&format!("tensor.{i}.shape"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor.{i}.shape")))?;
            let offset: usize = kv
                .remove(&format!("tensor.{i}.offset"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor.{i}.offset")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset for tensor {i}")))?;
            let shape: Vec<usize> = shape_str
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::Checkpoint(format!("bad shape `{shape_str}`")))
                })
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > bin.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` extends past binary payload ({} > {})",
                    end,
                    bin.len()
                )));
            }
            let data: Vec<f64> = bin[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            ckpt.insert_tensor(name, shape, data);
        }
        kv.remove("format");
        ckpt.scalars = kv;
        Ok(ckpt)
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (
            stem.with_extension("manifest"),
            stem.with_extension("bin"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bitwise() {
        let dir = std::env::temp_dir().join(format!("specgan-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("test");

        let mut c = Checkpoint::default();
        c.insert_tensor("b.weight", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 7e300]);
        c.insert_tensor("a.bias", vec![2], vec![0.125, -0.0]);
        c.insert_scalar("iter", 42u64);
        c.save(&stem).unwrap();

        let loaded = Checkpoint::load(&stem).unwrap();
        assert_eq!(loaded.scalar("iter").unwrap(), "42");
        let (shape, data) = loaded.tensor("b.weight").unwrap();
        assert_eq!(shape, &vec![2, 3]);
        let (orig_shape, orig_data) = c.tensor("b.weight").unwrap();
        assert_eq!(shape, orig_shape);
        for (a, b) in data.iter().zip(orig_data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let (_, bias) = loaded.tensor("a.bias").unwrap();
        assert_eq!(bias[1].to_bits(), (-0.0f64).to_bits());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_tensor_is_reported() {
        let c = Checkpoint::default();
        assert!(matches!(c.tensor("nope"), Err(Error::Checkpoint(_))));
    }
}

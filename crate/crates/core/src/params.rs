//! Named parameter sets and the checkpoint directory format.
//!
//! A checkpoint directory holds `tensors.cpxt` (concatenated CPXT records) and
//! `manifest.txt`, whose lines are either `meta <key>=<value>` or
//! `tensor <name> <d0>x<d1>... <byte offset>`.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{encode_tensor, read_tensor};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.txt";
pub const TENSORS: &str = "tensors.cpxt";

/// A model whose parameters are an ordered list of named tensors.
pub trait Module<T: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Puts every parameter on the tape, in `named()` order.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Overwrites parameters from `tensors`, matching by name and shape.
    fn load_named(&mut self, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::shape("load_named", slot.shape(), src.shape()));
            }
            *slot = src.cast();
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Loaded checkpoint contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint meta lacks {key}")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta_value(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint meta {key}={raw} is malformed")))
    }

    /// Tensors whose names start with `prefix`.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `tensors` (stored as f32) and `meta` into directory `dir`.
/// Each file is written to a temporary name first and renamed into place,
/// the manifest last.
pub fn save_checkpoint<T: Scalar>(dir: &Path, meta: &[(String, String)], tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# pixcorr checkpoint v1\n");
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("meta entry {k} is not single-line key=value")));
        }
        manifest.push_str(&format!("meta {k}={v}\n"));
    }
    let mut blob = Vec::new();
    for (name, t) in tensors {
        if name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("tensor name {name:?} contains whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
        manifest.push_str(&format!("tensor {name} {dims} {}\n", blob.len()));
        blob.extend(encode_tensor(&t.cast::<f32>()));
    }
    write_atomic(&dir.join(TENSORS), &blob)?;
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let tpath = dir.join(TENSORS);
    let blob = std::fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut ck = Checkpoint::default();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::format(&mpath, format!("line {}: {msg}", lineno + 1));
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once('=').ok_or_else(|| bad("meta without '='"))?;
            ck.meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad("expected: tensor <name> <shape> <offset>"));
            }
            let shape: Vec<usize> = if parts[1] == "scalar" {
                Vec::new()
            } else {
                parts[1]
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad("bad extent")))
                    .collect::<Result<_>>()?
            };
            let offset: usize = parts[2].parse().map_err(|_| bad("bad offset"))?;
            if offset > blob.len() {
                return Err(bad("offset past end of tensor file"));
            }
            let mut cur = Cursor::new(&blob[offset..]);
            let t: Tensor<f32> = read_tensor(&mut cur, &tpath)?;
            if t.shape() != shape.as_slice() {
                return Err(bad("manifest shape disagrees with stored tensor"));
            }
            ck.tensors.insert(parts[0].to_string(), t);
        } else {
            return Err(bad("unknown manifest entry"));
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_manifest_layout() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5);
        let b = Tensor::from_fn(&[4], |i| -(i as f32));
        let meta = vec![("kind".to_string(), "encoder".to_string())];
        save_checkpoint(dir.path(), &meta, &[("x.a".into(), &a), ("x.b".into(), &b)]).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("tensor x.a 2x3 0\n"));
        // CPXT record of a rank-2 tensor: 4 magic + 4 rank + 8 extents + 24 payload
        assert!(manifest.contains("tensor x.b 4 40\n"));
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.meta_value("kind").unwrap(), "encoder");
        assert_eq!(ck.tensors["x.a"], a);
        assert_eq!(ck.tensors["x.b"], b);
        assert_eq!(ck.section("x.").len(), 2);
        assert!(!dir.path().join("manifest.txt.tmp").exists());
    }

    #[test]
    fn corrupt_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_fn(&[2], |i| i as f32);
        save_checkpoint(dir.path(), &[], &[("a".into(), &a)]).unwrap();
        std::fs::write(dir.path().join(MANIFEST), "tensor a 3 0\n").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}

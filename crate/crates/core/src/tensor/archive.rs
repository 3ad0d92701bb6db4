//! Flat tensor archive used for checkpoints.
//!
//! Binary layout, repeated until end of file (all integers little-endian u32):
//!
//! ```text
//! name_len | name bytes (utf-8) | rank | dim_0 .. dim_{rank-1} | f32 values
//! ```
//!
//! A text manifest (`<archive>.manifest`) lists one `name<TAB>d0xd1x..` line
//! per record, preceded by optional `# key=value` header lines.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Tensor<f32>)>,
    /// `# key=value` lines of the manifest.
    pub meta: Vec<(String, String)>,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut p = archive.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl Archive {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Archive {
            path: path.to_path_buf(),
            reason,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        let mut entries = Vec::new();
        while !cur.done() {
            let name_len = cur.u32().ok_or_else(|| bad("truncated record".into()))?;
            let name = cur
                .take(name_len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| bad("bad record name".into()))?
                .to_string();
            let rank = cur.u32().ok_or_else(|| bad("truncated record".into()))?;
            if rank == 0 || rank > 8 {
                return Err(bad(format!("implausible rank {rank} for {name}")));
            }
            let shape = (0..rank)
                .map(|_| cur.u32())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated shape".into()))?;
            let n: usize = shape.iter().product();
            let raw = cur.take(4 * n).ok_or_else(|| bad(format!("truncated values for {name}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            entries.push((name, t));
        }
        Ok(Archive {
            entries,
            meta: Vec::new(),
        })
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            s.push_str(&format!("# {k}={v}\n"));
        }
        for (name, t) in &self.entries {
            s.push_str(&format!("{name}\t{}\n", shape_str(t.shape())));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let mp = manifest_path(path);
        fs::write(&mp, self.manifest()).map_err(|e| Error::io(mp, e))
    }

    /// Reads the archive and its manifest, checking that both agree.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut archive = Archive::from_bytes(&bytes, path)?;
        let mp = manifest_path(path);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let mut listed = Vec::new();
        for line in text.lines() {
            if let Some(kv) = line.strip_prefix("# ") {
                if let Some((k, v)) = kv.split_once('=') {
                    archive.meta.push((k.to_string(), v.to_string()));
                }
            } else if !line.trim().is_empty() {
                listed.push(line.to_string());
            }
        }
        let expected: Vec<String> = archive
            .entries
            .iter()
            .map(|(n, t)| format!("{n}\t{}", shape_str(t.shape())))
            .collect();
        if listed != expected {
            return Err(Error::Archive {
                path: mp,
                reason: "manifest does not match archive records".into(),
            });
        }
        Ok(archive)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.tdmi");
        let mut a = Archive::default();
        a.push("backbone.stage1.0.weight", &Tensor::<f32>::new(vec![2, 1, 1, 1], vec![1.5, -2.0]).unwrap());
        a.push("rdm.head.bias", &Tensor::<f64>::scalar(0.1));
        a.meta.push(("iteration".into(), "7".into()));
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta("iteration"), Some("7"));
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("backbone.stage1.0.weight\t2x1x1x1"));
    }

    #[test]
    fn truncated_archive_rejected() {
        let mut a = Archive::default();
        a.push("x", &Tensor::<f32>::zeros(vec![3]));
        let bytes = a.to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 2], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Archive { .. }));
    }
}

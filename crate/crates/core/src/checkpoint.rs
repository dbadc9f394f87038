//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCKP" | version u32 | count u32 | count x entry      parameters
//!                      | count u32 | count x entry      optimizer state
//!                      | iteration u64
//! entry = name_len u32 | name bytes | rank u32 | rank x extent u32 | f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    /// Momentum buffers in parameter order, named like their parameters.
    pub velocity: Vec<Tensor>,
    /// Completed optimizer steps.
    pub iteration: u64,
}

impl Checkpoint {
    /// Parameters with zero momentum at iteration 0.
    pub fn fresh(params: ParamStore) -> Self {
        let velocity = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Checkpoint {
            params,
            velocity,
            iteration: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.velocity.len() != self.params.len() {
            return Err(Error::Usage("optimizer state does not match parameters".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let params: Vec<(&str, &Tensor)> = self.params.iter().collect();
        write_entries(&mut out, &params)?;
        let velocity: Vec<(&str, &Tensor)> = params
            .iter()
            .map(|(n, _)| *n)
            .zip(&self.velocity)
            .collect();
        write_entries(&mut out, &velocity)?;
        out.extend_from_slice(&self.iteration.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, 0, "expected magic \"FCKP\""));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut params = ParamStore::new();
        let entries_at = r.pos;
        for (name, t) in r.entries()? {
            params.insert(&name, t).map_err(|_| {
                Error::format(path, entries_at as u64, format!("duplicate entry {name}"))
            })?;
        }
        let opt_at = r.pos;
        let opt = r.entries()?;
        if opt.len() != params.len() {
            return Err(Error::format(
                path,
                opt_at as u64,
                format!("{} optimizer entries for {} parameters", opt.len(), params.len()),
            ));
        }
        let mut velocity = Vec::with_capacity(opt.len());
        for ((name, t), (pname, p)) in opt.into_iter().zip(params.iter()) {
            if name != pname || t.shape() != p.shape() {
                return Err(Error::format(
                    path,
                    opt_at as u64,
                    format!("optimizer entry {name} does not match parameter {pname}"),
                ));
            }
            velocity.push(t);
        }
        let iteration = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes"));
        }
        Ok(Checkpoint {
            params,
            velocity,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_entries(out: &mut Vec<u8>, entries: &[(&str, &Tensor)]) -> Result<()> {
    let u32_of = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Usage(format!("{v} does not fit a u32 field")))
    };
    out.extend_from_slice(&u32_of(entries.len())?.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank())?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&u32_of(e)?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn entries(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = self.pos as u64;
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::format(self.path, at, "entry name is not UTF-8"))?
                .to_string();
            let rank = self.u32()? as usize;
            if rank > 4 {
                return Err(Error::format(self.path, at, format!("rank {rank} above 4")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = self.take(len.checked_mul(4).ok_or_else(|| {
                Error::format(self.path, at, "payload size overflows")
            })?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
                .collect();
            out.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert("a.w", Tensor::from_vec(&[2, 3], vec![0.1, -2.0, 3.5, 1e-3, 0.0, 7.25]).unwrap())
            .unwrap();
        params.insert("b", Tensor::scalar(0.3)).unwrap();
        let mut c = Checkpoint::fresh(params);
        c.velocity[1] = Tensor::scalar(-0.5);
        c.iteration = 42;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FCKP");
        assert_eq!(Checkpoint::from_bytes(&bytes, &PathBuf::from("x")).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let p = PathBuf::from("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, &p), Err(Error::Format { offset: 0, .. })));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&newer, &p), Err(Error::Version(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut, &p), Err(Error::Format { .. })));
    }
}

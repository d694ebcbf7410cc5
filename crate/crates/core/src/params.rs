//! Named parameter collections and the on-disk checkpoint format.
//!
//! Checkpoint layout (little-endian throughout):
//!   magic  b"CLMRCKPT"
//!   u32    format version (1)
//!   u32    entry count
//!   per entry:
//!     u32  name length in bytes, then that many UTF-8 bytes
//!     u32  rows, u32 cols
//!     rows*cols f64 values, row-major
//! The same layout serves every model kind; entries are matched by name.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name, as read off a tape after backward.
pub type GradMap = IndexMap<String, Tensor>;

/// Declares a parameter struct generic over its payload (tensors for
/// storage, node ids once bound to a tape) with map/visit plumbing.
macro_rules! param_struct {
    ($name:ident { $($field:ident),+ $(,)? }) => {
        #[derive(Clone, Debug)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)+ }
            }

            pub fn visit(&self, f: &mut impl FnMut(&'static str, &T)) {
                $(f(stringify!($field), &self.$field);)+
            }

            pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut T)) {
                $(f(stringify!($field), &mut self.$field);)+
            }
        }
    };
}
pub(crate) use param_struct;

/// A named set of trainable tensors. Iteration order must be stable and
/// identical between `for_each` and `for_each_mut`.
pub trait ParamGroup {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |name, _| out.push(name.to_string()));
        out
    }
}

/// Flat name -> tensor map; the simplest `ParamGroup`.
#[derive(Clone, Debug, Default)]
pub struct ParamBag {
    map: IndexMap<String, Tensor>,
}

impl ParamBag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }
}

impl ParamGroup for ParamBag {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in &self.map {
            f(name, t);
        }
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in &mut self.map {
            f(name, t);
        }
    }
}

const MAGIC: &[u8; 8] = b"CLMRCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &dyn ParamGroup, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    params.for_each(&mut |name, t| entries.push((name.to_string(), t.clone())));

    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(t.rows() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(t.cols() as u32).to_le_bytes()).map_err(io_err)?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Fill an existing parameter group from a checkpoint. Every parameter
/// must be present in the file with a matching shape, and the file must
/// not contain extra entries.
pub fn load_checkpoint(params: &mut dyn ParamGroup, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut loaded: IndexMap<String, Tensor> = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("non-utf8 parameter name: {e}")))?;
        let rows = read_u32(&mut r, path)? as usize;
        let cols = read_u32(&mut r, path)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, path)?;
            *v = f64::from_le_bytes(buf);
        }
        loaded.insert(name, Tensor::from_vec(rows, cols, data)?);
    }

    let mut err: Option<Error> = None;
    params.for_each_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match loaded.swap_remove(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                err = Some(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: file {:?}, model {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing parameter `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((name, _)) = loaded.into_iter().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint contains unknown parameter `{name}`"
        )));
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

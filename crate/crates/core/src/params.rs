//! Named parameter tensors and the `OF3D-CKPT v1` checkpoint container.
//!
//! Layout: the header line `OF3D-CKPT v1`, then for each tensor in name order
//! a name line, a shape line (space-separated dims), a payload byte-count line,
//! the little-endian `f64` payload, and a terminating newline.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "OF3D-CKPT v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!name.contains('\n') && !name.is_empty(), "bad parameter name {name:?}");
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone().with_grad())))
            .collect();
        BoundParams { vars }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        for (name, t) in &self.params {
            writeln!(w, "{name}")?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "{}", dims.join(" "))?;
            writeln!(w, "{}", t.numel() * 8)?;
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line_no = 0usize;
        let next_line = |r: &mut BufReader<R>, line_no: &mut usize| -> Result<Option<String>> {
            let mut s = String::new();
            if r.read_line(&mut s)? == 0 {
                return Ok(None);
            }
            *line_no += 1;
            Ok(Some(s.trim_end_matches('\n').to_string()))
        };
        match next_line(&mut r, &mut line_no)? {
            Some(h) if h == CHECKPOINT_HEADER => {}
            Some(h) => return Err(Error::parse(1, format!("expected `{CHECKPOINT_HEADER}`, got `{h}`"))),
            None => return Err(Error::parse(1, "empty checkpoint")),
        }
        let mut store = ParamStore::new();
        while let Some(name) = next_line(&mut r, &mut line_no)? {
            if name.is_empty() {
                return Err(Error::parse(line_no, "empty tensor name"));
            }
            let shape_line = next_line(&mut r, &mut line_no)?
                .ok_or_else(|| Error::parse(line_no, "missing shape line"))?;
            let shape: Vec<usize> = shape_line
                .split_whitespace()
                .map(|d| d.parse().map_err(|_| Error::parse(line_no, format!("bad dim `{d}`"))))
                .collect::<Result<_>>()?;
            let len_line = next_line(&mut r, &mut line_no)?
                .ok_or_else(|| Error::parse(line_no, "missing payload length"))?;
            let nbytes: usize = len_line
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad payload length `{len_line}`")))?;
            if nbytes % 8 != 0 || nbytes / 8 != shape.iter().product::<usize>() {
                return Err(Error::parse(line_no, "payload length does not match shape"));
            }
            let mut buf = vec![0u8; nbytes + 1];
            r.read_exact(&mut buf)
                .map_err(|_| Error::parse(line_no, "truncated payload"))?;
            if buf[nbytes] != b'\n' {
                return Err(Error::parse(line_no, "payload not newline-terminated"));
            }
            line_no += 1;
            let data = buf[..nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(line_no, e.to_string()))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f).map_err(|e| e.with_path(path))
    }
}

/// Parameters registered on one tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    /// Panics on an unknown name; parameter layouts are fixed by model config.
    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Accumulated gradients by name; parameters untouched by the loss get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v.grad().unwrap_or_else(|| {
                    let mut z = v.value();
                    z.data_mut().iter_mut().for_each(|x| *x = 0.0);
                    z.requires_grad = false;
                    z
                });
                (k.clone(), g)
            })
            .collect()
    }
}

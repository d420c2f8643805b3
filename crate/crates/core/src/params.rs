//! Named parameter storage, tape binding and the checkpoint format.
//!
//! A checkpoint is one UTF-8 header line followed by raw little-endian f64
//! values of every parameter in store order:
//!
//! ```text
//! mlso-ckpt-v1 enc.b0.kernel:16x1x3x3 enc.b0.scale:16 ...\n
//! <f64 LE> <f64 LE> ...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const MAGIC: &str = "mlso-ckpt-v1";

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Parameters of a store recorded as leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes another variable for one parameter, e.g. to probe a
    /// gradient with respect to it.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`; trainable leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Gradient per parameter, `None` where the parameter was not used.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    fn header(&self) -> String {
        let mut h = String::from(MAGIC);
        for (name, v) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = v.shape().iter().map(usize::to_string).collect();
            h.push(' ');
            h.push_str(name);
            h.push(':');
            h.push_str(&dims.join("x"));
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.push(b'\n');
        for v in &self.values {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites the values of this store from a checkpoint written by a
    /// store with the same names and shapes.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("not an mlso checkpoint".into()));
        }
        let entries: Vec<&str> = fields.collect();
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (entry, (name, v)) in entries.iter().zip(self.names.iter().zip(&self.values)) {
            let (ename, eshape) = entry
                .rsplit_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header entry `{entry}`")))?;
            let shape: Vec<usize> = if eshape.is_empty() {
                Vec::new()
            } else {
                eshape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in `{entry}`"))))
                    .collect::<Result<_>>()?
            };
            if ename != name || shape != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: checkpoint has {ename}{shape:?}, model has {name}{:?}",
                    v.shape()
                )));
            }
        }
        let body = &bytes[nl + 1..];
        let expected = self.num_scalars() * 8;
        if body.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint body has {} bytes, expected {expected}",
                body.len()
            )));
        }
        let mut chunks = body.chunks_exact(8);
        for v in &mut self.values {
            for x in v.data_mut() {
                let c = chunks.next().expect("length checked above");
                *x = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]).unwrap());
        s.add("a.b", Tensor::scalar(0.25));
        s
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let s = store();
        let mut t = store();
        t.get_mut(ParamId(0)).data_mut().fill(9.0);
        t.load_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn checkpoint_rejects_incompatible_stores() {
        let bytes = store().to_bytes();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2]));
        other.add("a.b", Tensor::scalar(0.0));
        assert!(matches!(other.load_bytes(&bytes), Err(Error::Checkpoint(_))));

        let mut fewer = ParamStore::new();
        fewer.add("a.w", Tensor::zeros(&[2, 3]));
        assert!(matches!(fewer.load_bytes(&bytes), Err(Error::Checkpoint(_))));

        let mut same = store();
        assert!(matches!(same.load_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(same.load_bytes(b"garbage\n"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn header_lists_names_and_shapes() {
        let bytes = store().to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..nl], b"mlso-ckpt-v1 a.w:2x3 a.b:");
    }
}

//! Named, ordered parameter collections shared by every network.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<Entry<T>>,
}

/// Tape handles for the trainable entries of a store, aligned by index.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx].expect("entry is not trainable")
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> usize {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].tensor
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Records every trainable entry on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                e.trainable
                    .then(|| tape.leaf(e.tensor.clone(), requires_grad))
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for each trainable entry; zeros where the loss did not reach.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Option<Vec<T>>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, v)| {
                v.map(|v| {
                    tape.grad(v)
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); e.tensor.len()])
                })
            })
            .collect()
    }

    /// Mutable data of two distinct entries.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.entries.split_at_mut(b);
            (lo[a].tensor.data_mut(), hi[0].tensor.data_mut())
        } else {
            let (lo, hi) = self.entries.split_at_mut(a);
            (hi[0].tensor.data_mut(), lo[b].tensor.data_mut())
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Concatenation of every trainable scalar, in entry order.
    pub fn flatten_trainable(&self) -> Vec<T> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamStore::flatten_trainable`].
    pub fn assign_trainable(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::shape(
                "assign_trainable",
                format!("{} values for {} parameters", flat.len(), self.num_trainable()),
            ));
        }
        let mut off = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces entry data by name, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} entries, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {} {:?} does not match {} {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trained by the optimizer.
    Param,
    /// State carried alongside the parameters (running stats, power-iteration
    /// vectors); never bound to a tape as a leaf.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub kind: EntryKind,
}

/// Named, ordered parameter and buffer storage for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, value: Tensor, kind: EntryKind) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate entry {name}"
        );
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, EntryKind::Param)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, EntryKind::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(i, _)| ParamId(i))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`. Frozen bindings still let gradients
    /// flow through the model to its inputs.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                EntryKind::Param if trainable => Some(tape.param(e.value.clone())),
                EntryKind::Param => Some(tape.constant(e.value.clone())),
                EntryKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Overwrites values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter layouts differ: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Tape variables for a [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }

    /// Substitutes the tape variable used for `id`.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flatten().copied().collect()
    }
}

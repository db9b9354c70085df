use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One named parameter: value, accumulated gradient, and a frozen flag.
/// Frozen parameters never require grad and are never stepped.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Ordered registry of named parameters. Iteration order is insertion
/// order, which fixes serialization and update order for reproducibility.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.names.push(name.to_string());
        self.params.push(Param {
            value,
            grad,
            frozen: false,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        match self.get_mut(name) {
            Some(p) => {
                p.frozen = true;
                Ok(())
            }
            None => Err(Error::Validation(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Put every parameter on a tape as a leaf; frozen entries do not
    /// require grad.
    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for (i, (name, p)) in self.iter().enumerate() {
            let v = tape.leaf(p.value.clone(), !p.frozen);
            vars.insert(name.to_string(), v);
            order.push((i, v));
        }
        StagedParams { vars, order }
    }

    /// Add the tape gradients of a staged set back into the store.
    pub fn harvest(&mut self, tape: &Tape, staged: &StagedParams) -> Result<()> {
        for &(i, v) in &staged.order {
            if self.params[i].frozen {
                continue;
            }
            if let Some(g) = tape.grad(v) {
                self.params[i].grad.axpy(1.0, g)?;
            }
        }
        Ok(())
    }
}

/// Tape handles for one staging of a [`ParamStore`].
pub struct StagedParams {
    vars: HashMap<String, Var>,
    order: Vec<(usize, Var)>,
}

impl StagedParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("parameter {name:?} not staged")))
    }
}

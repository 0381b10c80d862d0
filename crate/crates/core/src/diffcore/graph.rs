//! Binding layer between host arrays (model parameters, data) and tape leaves.
//!
//! Each parameter array is leafed onto the tape at most once per graph, keyed
//! by buffer identity, so shared parameters accumulate gradients from every
//! use site. Gradient checking can redirect a single parameter to an
//! externally supplied leaf.

use std::collections::HashMap;

use crate::diffcore::{Array, Scalar, Tape, Var};

pub struct Graph<E: Scalar> {
    pub tape: Tape<E>,
    params: HashMap<usize, Var>,
    consts: HashMap<usize, Var>,
    overrides: HashMap<usize, Var>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph {
            tape: Tape::new(),
            params: HashMap::new(),
            consts: HashMap::new(),
            overrides: HashMap::new(),
        }
    }

    fn key(a: &Array<E>) -> usize {
        a.data().as_ptr() as usize
    }

    /// Bind a trainable parameter (gradient will be accumulated).
    pub fn param(&mut self, a: &Array<E>) -> Var {
        let key = Self::key(a);
        if let Some(&v) = self.overrides.get(&key) {
            return v;
        }
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.tape.leaf(a.clone(), true);
        self.params.insert(key, v);
        v
    }

    /// Bind a frozen value (no gradient flows into it).
    pub fn constant(&mut self, a: &Array<E>) -> Var {
        let key = Self::key(a);
        if let Some(&v) = self.consts.get(&key) {
            return v;
        }
        let v = self.tape.leaf(a.clone(), false);
        self.consts.insert(key, v);
        v
    }

    /// Redirect future `param(a)` bindings to an existing tape variable.
    pub fn override_param(&mut self, a: &Array<E>, v: Var) {
        self.overrides.insert(Self::key(a), v);
    }

    /// Gradient of a bound parameter, if it was reached by backward.
    pub fn grad_of(&self, a: &Array<E>) -> Option<&[E]> {
        let key = Self::key(a);
        let v = self.params.get(&key).or_else(|| self.overrides.get(&key))?;
        self.tape.grad(*v)
    }

    pub fn var_of(&self, a: &Array<E>) -> Option<Var> {
        let key = Self::key(a);
        self.params.get(&key).or_else(|| self.overrides.get(&key)).copied()
    }
}

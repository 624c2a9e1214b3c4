use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tensor_io;

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in &mut self.entries {
            if n.starts_with(prefix) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        tensor_io::write_weights(f, &self.entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        tensor_io::write_weights(&mut buf, &self.entries).expect("in-memory write");
        buf
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        let mut ps = ParamSet::new();
        for (n, t) in tensor_io::read_weights(f)? {
            ps.insert(n, t);
        }
        Ok(ps)
    }

    /// Copies values from `other` for every name present in both, checking shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (n, t) in &mut self.entries {
            let src = other
                .get(n)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{n}`")))?;
            if src.shape != t.shape {
                return Err(Error::Shape(format!(
                    "parameter `{n}`: checkpoint shape {:?} vs model {:?}",
                    src.shape, t.shape
                )));
            }
            t.data.clone_from(&src.data);
        }
        Ok(())
    }
}

/// Parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-a..a)).collect();
        Tensor::matrix(fan_in, fan_out, data)
    }

    pub fn uniform(&mut self, shape: &[usize], a: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.gen_range(-a..a)).collect()).unwrap()
    }

    pub fn filled(&mut self, shape: &[usize], v: f64) -> Tensor {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()]).unwrap()
    }
}

/// Declares `{prefix}.w` `[fan_in, fan_out]` and `{prefix}.b` `[fan_out]`.
pub fn declare_linear(ps: &mut ParamSet, init: &mut Init, prefix: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{prefix}.w"), init.xavier(fan_in, fan_out));
    ps.insert(format!("{prefix}.b"), init.filled(&[fan_out], 0.0));
}

pub fn declare_zero_linear(ps: &mut ParamSet, init: &mut Init, prefix: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{prefix}.w"), init.filled(&[fan_in, fan_out], 0.0));
    ps.insert(format!("{prefix}.b"), init.filled(&[fan_out], 0.0));
}

pub fn declare_layer_norm(ps: &mut ParamSet, init: &mut Init, prefix: &str, width: usize) {
    ps.insert(format!("{prefix}.gamma"), init.filled(&[width], 1.0));
    ps.insert(format!("{prefix}.beta"), init.filled(&[width], 0.0));
}

/// A tape bound to a parameter set. Parameters become differentiable
/// leaves on first use.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    /// Dropout masks are drawn from this generator when set.
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Leaf for the named parameter.
    ///
    /// Panics when the parameter was never declared; that is a programming
    /// error in the model definition.
    pub fn param(&mut self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("undeclared parameter `{name}`"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let v = self.tape.leaf(self.params.entries()[i].1.clone());
        self.bound[i] = Some(v);
        v
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Var {
        let g = self.param(&format!("{prefix}.gamma"));
        let b = self.param(&format!("{prefix}.beta"));
        self.tape.layer_norm(x, g, b)
    }

    /// Inverted dropout with rate `p`; identity when no generator is set.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let n = self.tape.value(x).len();
        let keep = 1.0 - p;
        let mask = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.tape.mask_add(x, mask, &vec![0.0; n])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// For each declared parameter, whether it has been placed on the tape.
    pub fn bound_params(&self) -> Vec<bool> {
        self.bound.iter().map(Option::is_some).collect()
    }

    /// Gradients for every parameter, in declaration order (zeros when a
    /// parameter did not take part in the computation).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .entries()
            .iter()
            .zip(&self.bound)
            .map(|((_, t), b)| {
                let data = match b {
                    Some(v) => grads.get_or_zero(*v, t.len()),
                    None => vec![0.0; t.len()],
                };
                Tensor {
                    shape: t.shape.clone(),
                    data,
                }
            })
            .collect()
    }
}

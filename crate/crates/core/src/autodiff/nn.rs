//! Parameter storage and the small layer vocabulary the model is built from.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{BatchStats, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::TensorError;
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    /// Optimizer group; `None` marks a non-trainable buffer.
    group: Option<usize>,
}

/// Ordered, named collection of parameters and buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, group: Option<usize>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            group,
        });
        ParamId(id)
    }

    /// Adds a trainable tensor in optimizer group `group`.
    pub fn add(&mut self, name: &str, value: Tensor<T>, group: usize) -> ParamId {
        self.insert(name, value, Some(group))
    }

    /// Adds a non-trainable buffer (e.g. running statistics).
    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, None)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Option<usize> {
        self.entries[id.0].group
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].group.is_some()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// `(name, tensor)` pairs in insertion order, buffers included.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Replaces values by name; every name must exist with the same shape.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, Tensor<T>)>,
    ) -> Result<(), String> {
        let mut seen = 0;
        for (name, v) in values {
            let Some(&i) = self.index.get(name) else {
                return Err(format!("unexpected parameter {name:?}"));
            };
            if self.entries[i].value.shape() != v.shape() {
                return Err(format!(
                    "parameter {name:?}: shape {:?} vs stored {:?}",
                    v.shape(),
                    self.entries[i].value.shape()
                ));
            }
            self.entries[i].value = v;
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(format!(
                "expected {} parameters, got {seen}",
                self.entries.len()
            ));
        }
        Ok(())
    }

    /// Registers every entry on `tape`; trainable entries become
    /// differentiable leaves, buffers become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.group.is_some() {
                    tape.var(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Seeded uniform(−1/√fan_in, 1/√fan_in) initializer.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape product")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Batch,
    Layer,
    None,
}

/// Whether normalization layers use batch statistics or running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by one batch-norm layer in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStats<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

/// State threaded through a forward pass.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamSet<T>,
    pub bound: &'a Bound,
    pub mode: Mode,
    /// Batch statistics observed in train mode, keyed by the running-mean buffer.
    pub batch_stats: Vec<ObservedStats<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a ParamSet<T>,
        bound: &'a Bound,
        mode: Mode,
    ) -> Self {
        Self {
            tape,
            params,
            bound,
            mode,
            batch_stats: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Affine map `y = xW + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        input: usize,
        output: usize,
        group: usize,
    ) -> Self {
        let w = params.add(
            &format!("{name}.w"),
            init.uniform(&[input, output], input),
            group,
        );
        let b = params.add(&format!("{name}.b"), init.uniform(&[output], input), group);
        Self {
            w,
            b,
            input,
            output,
        }
    }

    /// Wraps explicit weight and bias tensors.
    pub fn from_tensors<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        w: Tensor<T>,
        b: Tensor<T>,
        group: usize,
    ) -> Result<Self, TensorError> {
        if w.rank() != 2 || b.rank() != 1 || w.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (input, output) = (w.shape()[0], w.shape()[1]);
        let w = params.add(&format!("{name}.w"), w, group);
        let b = params.add(&format!("{name}.b"), b, group);
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        affine(fwd.tape, x, fwd.bound.var(self.w), fwd.bound.var(self.b))
    }

    /// `[a[ai] ‖ b[bi]] W + bias` without materializing the gathered
    /// concatenation: `W` is split by rows and each half is applied to the
    /// smaller source matrix before gathering.
    pub fn forward_gathered_pair<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        a: Var,
        ai: Arc<[usize]>,
        b: Var,
        bi: Arc<[usize]>,
    ) -> Result<Var, TensorError> {
        let wa = fwd.tape.value(a).cols();
        let wb = fwd.tape.value(b).cols();
        if wa + wb != self.input {
            return Err(TensorError::ShapeMismatch {
                op: "linear_gathered_pair",
                left: vec![wa, wb],
                right: vec![self.input, self.output],
            });
        }
        let w = fwd.bound.var(self.w);
        let top = fwd.tape.gather_rows(w, (0..wa).collect())?;
        let bottom = fwd.tape.gather_rows(w, (wa..self.input).collect())?;
        let pa = fwd.tape.matmul(a, top)?;
        let pb = fwd.tape.matmul(b, bottom)?;
        let ga = fwd.tape.gather_rows(pa, ai)?;
        let gb = fwd.tape.gather_rows(pb, bi)?;
        let sum = fwd.tape.add(ga, gb)?;
        fwd.tape.add_row(sum, fwd.bound.var(self.b))
    }
}

/// `xW + b` on the tape with width checks.
pub fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

/// Output normalization with learnable scale/shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        kind: NormKind,
        width: usize,
        group: usize,
    ) -> Self {
        let gamma = params.add(&format!("{name}.gamma"), Tensor::ones(&[width]), group);
        let beta = params.add(&format!("{name}.beta"), Tensor::zeros(&[width]), group);
        let running_mean =
            params.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[width]));
        let running_var = params.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[width]));
        Self {
            kind,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (fwd.var(self.gamma), fwd.var(self.beta));
        let eps = T::lit(NORM_EPS);
        match (self.kind, fwd.mode) {
            (NormKind::Layer, _) => fwd.tape.layer_norm(x, g, b, eps),
            (NormKind::Batch, Mode::Train) => {
                let (y, stats) = fwd.tape.batch_norm(x, g, b, eps)?;
                fwd.batch_stats.push(ObservedStats {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            (NormKind::Batch, Mode::Eval) => {
                let mean = fwd.params.get(self.running_mean).data();
                let var = fwd.params.get(self.running_var).data();
                fwd.tape.batch_norm_fixed(x, g, b, mean, var, eps)
            }
        }
    }
}

/// Folds observed batch statistics into running estimates (momentum 0.1).
pub fn update_running_stats<T: Scalar>(params: &mut ParamSet<T>, observed: &[ObservedStats<T>]) {
    let m = T::lit(BN_MOMENTUM);
    for o in observed {
        for (r, &b) in params
            .get_mut(o.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&o.stats.mean)
        {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in params
            .get_mut(o.running_var)
            .data_mut()
            .iter_mut()
            .zip(&o.stats.var)
        {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

/// Two affine maps with a rectifier between them and optional output norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub norm: Option<Norm>,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        init: &mut Initializer,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        norm: NormMode,
        group: usize,
    ) -> Self {
        let first = Linear::new(params, init, &format!("{name}.l1"), input, hidden, group);
        let second = Linear::new(params, init, &format!("{name}.l2"), hidden, output, group);
        let norm = match norm {
            NormMode::None => None,
            NormMode::Batch => Some(Norm::new(
                params,
                &format!("{name}.norm"),
                NormKind::Batch,
                output,
                group,
            )),
            NormMode::Layer => Some(Norm::new(
                params,
                &format!("{name}.norm"),
                NormKind::Layer,
                output,
                group,
            )),
        };
        Self {
            first,
            second,
            norm,
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.first.forward(fwd, x)?;
        let h = fwd.tape.relu(h)?;
        let y = self.second.forward(fwd, h)?;
        match &self.norm {
            Some(n) => n.forward(fwd, y),
            None => Ok(y),
        }
    }
}

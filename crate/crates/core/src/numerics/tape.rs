//! Operation tape for reverse-mode differentiation.
//!
//! Every kernel call appends one node holding its output value and whatever
//! it needs for the backward rule. [`Tape::backward`] replays the nodes in
//! reverse order and returns one gradient per registered parameter.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::array::DenseArray;
use super::counter::OpCounter;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed kernel set. Names are stable and used in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    MatMul,
    BatchMatMul,
    Linear,
    Add,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Softmax,
    Conv3x3,
    MaxPool3x3,
    AvgPool2x2,
    Concat,
    Gather,
    SliceLast,
    Bilinear,
    Reshape,
    Permute,
    PairwiseOffsets,
    SinusoidalEmbed,
    MapSample,
    Sum,
    FocalLoss,
    SmoothL1,
}

impl Kernel {
    pub const ALL: [Kernel; 24] = [
        Kernel::MatMul,
        Kernel::BatchMatMul,
        Kernel::Linear,
        Kernel::Add,
        Kernel::Mul,
        Kernel::Scale,
        Kernel::Relu,
        Kernel::Sigmoid,
        Kernel::Softmax,
        Kernel::Conv3x3,
        Kernel::MaxPool3x3,
        Kernel::AvgPool2x2,
        Kernel::Concat,
        Kernel::Gather,
        Kernel::SliceLast,
        Kernel::Bilinear,
        Kernel::Reshape,
        Kernel::Permute,
        Kernel::PairwiseOffsets,
        Kernel::SinusoidalEmbed,
        Kernel::MapSample,
        Kernel::Sum,
        Kernel::FocalLoss,
        Kernel::SmoothL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::MatMul => "matmul",
            Kernel::BatchMatMul => "batch_matmul",
            Kernel::Linear => "linear",
            Kernel::Add => "add",
            Kernel::Mul => "mul",
            Kernel::Scale => "scale",
            Kernel::Relu => "relu",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Softmax => "softmax",
            Kernel::Conv3x3 => "conv3x3",
            Kernel::MaxPool3x3 => "maxpool3x3",
            Kernel::AvgPool2x2 => "avgpool2x2",
            Kernel::Concat => "concat",
            Kernel::Gather => "gather",
            Kernel::SliceLast => "slice_last",
            Kernel::Bilinear => "bilinear",
            Kernel::Reshape => "reshape",
            Kernel::Permute => "permute",
            Kernel::PairwiseOffsets => "pairwise_offsets",
            Kernel::SinusoidalEmbed => "sinusoidal_embed",
            Kernel::MapSample => "map_sample",
            Kernel::Sum => "sum",
            Kernel::FocalLoss => "focal_loss",
            Kernel::SmoothL1 => "smooth_l1",
        }
    }

    pub fn from_name(name: &str) -> Option<Kernel> {
        Kernel::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Saved state for one recorded node.
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Var, relu: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<f64> },
    MaxPool3x3 { x: Var, argmax: Vec<usize> },
    AvgPool2x2 { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
    SliceLast { x: Var, start: usize },
    Bilinear { grid: Var, coords: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: [usize; 3] },
    PairwiseOffsets { q: Var, k: Var },
    SinusoidalEmbed { offsets: Var, dim: usize, scale: f64 },
    MapSample { map: Var, q: Var, k: Var, inv_unit: f64, center: f64 },
    Sum { x: Var },
    FocalLoss { p: Var, targets: Vec<f64>, weights: Vec<f64>, alpha: f64, gamma: f64 },
    SmoothL1 { x: Var, targets: Vec<f64>, weights: Vec<f64>, beta: f64 },
}

impl Op {
    pub(crate) fn kernel(&self) -> Option<Kernel> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => Kernel::MatMul,
            Op::BatchMatMul { .. } => Kernel::BatchMatMul,
            Op::Linear { .. } => Kernel::Linear,
            Op::Add { .. } => Kernel::Add,
            Op::Mul { .. } => Kernel::Mul,
            Op::Scale { .. } => Kernel::Scale,
            Op::Relu { .. } => Kernel::Relu,
            Op::Sigmoid { .. } => Kernel::Sigmoid,
            Op::Softmax { .. } => Kernel::Softmax,
            Op::Conv3x3 { .. } => Kernel::Conv3x3,
            Op::MaxPool3x3 { .. } => Kernel::MaxPool3x3,
            Op::AvgPool2x2 { .. } => Kernel::AvgPool2x2,
            Op::Concat { .. } => Kernel::Concat,
            Op::Gather { .. } => Kernel::Gather,
            Op::SliceLast { .. } => Kernel::SliceLast,
            Op::Bilinear { .. } => Kernel::Bilinear,
            Op::Reshape { .. } => Kernel::Reshape,
            Op::Permute { .. } => Kernel::Permute,
            Op::PairwiseOffsets { .. } => Kernel::PairwiseOffsets,
            Op::SinusoidalEmbed { .. } => Kernel::SinusoidalEmbed,
            Op::MapSample { .. } => Kernel::MapSample,
            Op::Sum { .. } => Kernel::Sum,
            Op::FocalLoss { .. } => Kernel::FocalLoss,
            Op::SmoothL1 { .. } => Kernel::SmoothL1,
        })
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, DenseArray>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, DenseArray> {
        self.0
    }

    pub fn remove(&mut self, name: &str) -> Option<DenseArray> {
        self.0.remove(name)
    }

    /// Adds `other` into `self`, inserting names that are missing.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn insert(&mut self, name: String, grad: DenseArray) {
        self.0.insert(name, grad);
    }
}

/// Records differentiable operations. Single-writer: one tape per
/// forward pass.
pub struct Tape {
    pub(crate) values: Vec<DenseArray>,
    pub(crate) ops: Vec<Op>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    pub(crate) counter: OpCounter,
    fault: Option<Kernel>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            counter: OpCounter::new(),
            fault: None,
        }
    }

    /// Test hook: corrupts the backward rule of `kernel` on this tape.
    pub fn with_fault(mut self, kernel: Kernel) -> Self {
        self.fault = Some(kernel);
        self
    }

    pub fn fault(&self) -> Option<Kernel> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push_leaf(value)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: DenseArray) -> Result<Var> {
        let name = name.into();
        if self.param_lookup.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let v = self.push_leaf(value);
        self.param_lookup.insert(name.clone(), v);
        self.params.push((name, v));
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_lookup.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn reset_counter(&mut self) {
        self.counter.reset();
    }

    fn push_leaf(&mut self, value: DenseArray) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    /// Appends a kernel output after the finiteness check and accounting.
    pub(crate) fn push(
        &mut self,
        op: Op,
        value: DenseArray,
        macs: u64,
        counted_elements: u64,
    ) -> Result<Var> {
        let kernel = op.kernel().expect("kernel nodes only");
        if !value.is_finite() {
            return Err(Error::Numeric {
                kernel: kernel.name().to_string(),
                detail: format!(
                    "output of shape {:?} (node #{}) contains non-finite values",
                    value.shape(),
                    self.values.len()
                ),
            });
        }
        self.counter.record(kernel.name(), macs, counted_elements);
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    pub(crate) fn check_finite_inputs(&self, kernel: Kernel, inputs: &[Var]) -> Result<()> {
        for &v in inputs {
            if !self.values[v.0].is_finite() {
                return Err(Error::Numeric {
                    kernel: kernel.name().to_string(),
                    detail: format!(
                        "input node #{} of shape {:?} contains non-finite values",
                        v.0,
                        self.values[v.0].shape()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Gradients of a scalar `loss` with respect to every registered parameter.
    /// Parameters the loss does not depend on receive zero arrays.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let seed = DenseArray::filled(value.shape(), 1.0);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Vector-Jacobian product: propagates the given output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, DenseArray)]) -> Result<Gradients> {
        let mut grads: Vec<Option<DenseArray>> = Vec::new();
        grads.resize_with(self.values.len(), || None);
        let mut top = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.shape(*v) {
                return Err(Error::Contract(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    self.shape(*v)
                )));
            }
            accumulate(&mut grads, *v, seed.clone());
            top = top.max(v.0 + 1);
        }
        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let op = &self.ops[idx];
            if let Op::Leaf = op {
                grads[idx] = Some(g);
                continue;
            }
            let mut contributions = super::ops::backprop(self, op, idx, &g);
            if self.fault.is_some() && self.fault == op.kernel() {
                for (_, c) in contributions.iter_mut() {
                    c.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
                }
            }
            for (v, c) in contributions {
                accumulate(&mut grads, v, c);
            }
        }
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| DenseArray::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        Ok(Gradients(out))
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], v: Var, g: DenseArray) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The design is a Wengert tape over an arena of flat buffers: a [`Graph`]
//! owns every tensor created during one forward pass, records the producing
//! op for each, and replays the records in reverse to accumulate gradients.
//! The element type is generic over [`Element`] (f32 for training, f64 for
//! numerics tests), chosen per run.
//!
//! A graph is single-use: `backward` consumes the tape and a second call is
//! rejected. Everything is deterministic given the seed — iteration orders
//! are fixed and gradient accumulation happens in tape order.

pub mod checkpoint;
pub mod gradcheck;
pub mod linalg;
pub mod op;
pub mod optim;
pub mod params;
pub mod rng;

use crate::error::{Error, Result};
pub use op::Op;
pub use optim::AdamW;
pub use params::ParamStore;
pub use rng::Rng;

/// Element width selectable per run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar element of every tensor in the engine. Elementwise arithmetic is
/// native-width; transcendental kernels round-trip through f64.
pub trait Element:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Handle to a tensor inside one [`Graph`]. Not valid across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tid(pub(crate) usize);

pub(crate) struct Node<E> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
    pub leaf: bool,
}

/// Forward/backward mode flags for one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Record ops, dropout/drop-path active.
    Train,
    /// Record ops, dropout/drop-path are identity (used by gradient checks).
    EvalRecorded,
    /// No op records, no gradients; forward only.
    Inference,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    ops: Vec<Op<E>>,
    mode: Mode,
    rng: Option<Rng>,
    consumed: bool,
}

impl<E: Element> Graph<E> {
    pub fn new(mode: Mode, rng: Option<Rng>) -> Self {
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
            mode,
            rng,
            consumed: false,
        }
    }

    pub fn train(rng: Rng) -> Self {
        Graph::new(Mode::Train, Some(rng))
    }

    pub fn inference() -> Self {
        Graph::new(Mode::Inference, None)
    }

    /// Recording graph with eval-mode stochastic ops; for gradient checks.
    pub fn recorded_eval() -> Self {
        Graph::new(Mode::EvalRecorded, None)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn recording(&self) -> bool {
        self.mode != Mode::Inference
    }

    /// Number of live tensors (diagnostics).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Tensor creation ─────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Result<Tid> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let id = Tid(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad: requires_grad && self.recording(),
            grad: None,
            leaf: true,
        });
        Ok(id)
    }

    /// Constant input tensor (no gradient).
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Result<Tid> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tid {
        self.leaf(vec![E::from_f64(v)], vec![1], false)
            .expect("scalar leaf")
    }

    pub(crate) fn push_result(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Tid {
        let id = Tid(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad: requires_grad && self.recording(),
            grad: None,
            leaf: false,
        });
        id
    }

    pub(crate) fn record(&mut self, op: Op<E>) {
        if self.recording() {
            self.ops.push(op);
        }
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn data(&self, t: Tid) -> &[E] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: Tid) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn value(&self, t: Tid) -> f64 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0].to_f64()
    }

    /// Gradient buffer, if backward reached this tensor.
    pub fn grad(&self, t: Tid) -> Option<&[E]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub(crate) fn any_requires_grad(&self, ids: &[Tid]) -> bool {
        ids.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    /// Verifies an op output is finite; index of first offender reported.
    pub(crate) fn check_finite(&self, op: &'static str, t: Tid) -> Result<()> {
        for (i, v) in self.nodes[t.0].data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { op, index: i });
            }
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    pub(crate) fn grad_or_zeros(&mut self, t: Tid) -> &mut Vec<E> {
        let n = self.nodes[t.0].data.len();
        self.nodes[t.0]
            .grad
            .get_or_insert_with(|| vec![E::zero(); n])
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// requires-grad tensor reachable from the loss; leaves the rest as
    /// `None`. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: Tid) -> Result<()> {
        if self.mode == Mode::Inference {
            return Err(Error::Autodiff(
                "backward on an inference graph (nothing was recorded)".into(),
            ));
        }
        if self.consumed {
            return Err(Error::Autodiff(
                "backward called twice; the tape is consumed after one pass".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![E::one()]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
            // Output data and gradient of this op are dead from here on;
            // free them (leaves and their grads are kept for the caller).
            let out = op.output();
            if !self.nodes[out.0].leaf {
                self.nodes[out.0].data = Vec::new();
                if out != loss {
                    self.nodes[out.0].grad = None;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

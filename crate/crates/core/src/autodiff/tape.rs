use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::ops::Range;
use std::sync::Arc;

use super::flops::FlopCounter;
use super::ops::{self, Op};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Option<Arc<Vec<f64>>>,
    /// True when the node is a differentiable leaf or depends on one.
    pub(crate) grad: bool,
    pub(crate) segment: Option<usize>,
}

struct Segment {
    range: Range<NodeId>,
    dropped: Vec<NodeId>,
    live: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryStats {
    /// Floats currently held by non-leaf nodes.
    pub live: usize,
    /// High-water mark of `live`.
    pub peak: usize,
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation.
///
/// [`Tape::grad`] records the backward pass onto the same tape, so the
/// gradients it returns are ordinary nodes that can be differentiated again.
/// [`Tape::backward`] computes plain numeric gradients without recording.
///
/// A tape is single-writer and not `Send`; build one per sequence.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    segments: RefCell<Vec<Segment>>,
    flops: RefCell<FlopCounter>,
    mem: Cell<MemoryStats>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients returned by [`Tape::grad`].
pub struct Grads<'t> {
    pub grads: Vec<Var<'t>>,
    /// Indices into `wrt` that were not reachable from the output; their
    /// gradient is zero.
    pub unreachable: Vec<usize>,
}

/// Gradients returned by [`Tape::backward`].
#[derive(Debug)]
pub struct NumericGrads {
    pub grads: Vec<Tensor>,
    pub unreachable: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().to_vec(), t.shared_data(), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().to_vec(), t.shared_data(), false)
    }

    pub(crate) fn shared_leaf(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        grad: bool,
    ) -> Var<'_> {
        self.leaf(shape, value, grad)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Vec::new(), Arc::new(vec![v]), false)
    }

    pub(crate) fn leaf(&self, shape: Vec<usize>, value: Arc<Vec<f64>>, grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            value: Some(value),
            grad,
            segment: None,
        });
        Var { tape: self, id }
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops.borrow().clone()
    }

    pub fn memory(&self) -> MemoryStats {
        self.mem.get()
    }

    pub(crate) fn count(&self, kind: &str, n: u64) {
        self.flops.borrow_mut().add(kind, n);
    }

    fn track_alloc(&self, n: usize) {
        let mut m = self.mem.get();
        m.live += n;
        m.peak = m.peak.max(m.live);
        self.mem.set(m);
    }

    fn track_free(&self, n: usize) {
        let mut m = self.mem.get();
        m.live -= n;
        self.mem.set(m);
    }

    pub(crate) fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].grad
    }

    /// Value of a node, replaying its checkpointed segment if necessary.
    pub(crate) fn value_of(&self, id: NodeId) -> Arc<Vec<f64>> {
        if let Some(v) = &self.nodes.borrow()[id].value {
            return v.clone();
        }
        let seg = self.nodes.borrow()[id]
            .segment
            .expect("dropped value outside any segment");
        self.materialize(seg);
        self.nodes.borrow()[id]
            .value
            .clone()
            .expect("replay restored value")
    }

    /// Evaluates `op` on existing nodes and appends the result.
    pub(crate) fn push(&self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> Var<'_> {
        let values: Vec<Arc<Vec<f64>>> = inputs.iter().map(|&i| self.value_of(i)).collect();
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.shape_of(i)).collect();
        let (kind, flops) = ops::flops(&op, &shapes, &shape);
        self.count(kind, flops);
        let out = ops::forward(&op, &values, &shapes, &shape);
        debug_assert_eq!(out.len(), shape.iter().product::<usize>(), "{op:?}");
        self.track_alloc(out.len());
        let grad = inputs.iter().any(|&i| self.requires_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            shape,
            value: Some(Arc::new(out)),
            grad,
            segment: None,
        });
        Var { tape: self, id }
    }

    // ---- checkpointing -------------------------------------------------

    /// Current end of the tape, for delimiting a segment.
    pub fn mark(&self) -> NodeId {
        self.len()
    }

    /// Drops the values computed in `range`, except leaves and the nodes in
    /// `keep`. Dropped values are recomputed on demand, either when a later
    /// operation reads them or during [`Tape::backward`], which replays one
    /// segment at a time.
    pub fn checkpoint_segment(&self, range: Range<NodeId>, keep: &[NodeId]) -> Result<usize> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::Checkpoint(format!(
                "segment {range:?} outside tape of {} nodes",
                self.len()
            )));
        }
        {
            let segs = self.segments.borrow();
            if segs
                .iter()
                .any(|s| s.range.start < range.end && range.start < s.range.end)
            {
                return Err(Error::Checkpoint(format!(
                    "segment {range:?} overlaps an existing checkpoint"
                )));
            }
        }
        let keep: HashSet<NodeId> = keep.iter().copied().collect();
        let sid = self.segments.borrow().len();
        let mut dropped = Vec::new();
        let mut freed = 0;
        {
            let mut nodes = self.nodes.borrow_mut();
            for id in range.clone() {
                let node = &mut nodes[id];
                node.segment = Some(sid);
                if matches!(node.op, Op::Leaf) || keep.contains(&id) {
                    continue;
                }
                if let Some(v) = node.value.take() {
                    freed += v.len();
                }
                dropped.push(id);
            }
        }
        self.track_free(freed);
        self.segments.borrow_mut().push(Segment {
            range,
            dropped,
            live: false,
        });
        Ok(sid)
    }

    fn materialize(&self, sid: usize) {
        let dropped = {
            let segs = self.segments.borrow();
            if segs[sid].live {
                return;
            }
            segs[sid].dropped.clone()
        };
        for id in dropped {
            let (op, inputs, shape) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                if n.value.is_some() {
                    continue;
                }
                (n.op.clone(), n.inputs.clone(), n.shape.clone())
            };
            let values: Vec<Arc<Vec<f64>>> = inputs.iter().map(|&i| self.value_of(i)).collect();
            let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.shape_of(i)).collect();
            let (_, flops) = ops::flops(&op, &shapes, &shape);
            self.count("recompute", flops);
            let out = ops::forward(&op, &values, &shapes, &shape);
            self.track_alloc(out.len());
            self.nodes.borrow_mut()[id].value = Some(Arc::new(out));
        }
        self.segments.borrow_mut()[sid].live = true;
    }

    fn release(&self, sid: usize) {
        let dropped = {
            let mut segs = self.segments.borrow_mut();
            if !segs[sid].live {
                return;
            }
            segs[sid].live = false;
            segs[sid].dropped.clone()
        };
        let mut freed = 0;
        let mut nodes = self.nodes.borrow_mut();
        for id in dropped {
            if let Some(v) = nodes[id].value.take() {
                freed += v.len();
            }
        }
        drop(nodes);
        self.track_free(freed);
    }

    fn segment_start(&self, sid: usize) -> NodeId {
        self.segments.borrow()[sid].range.start
    }

    // ---- differentiation -----------------------------------------------

    fn check_scalar(&self, out: NodeId) -> Result<()> {
        let shape = self.shape_of(out);
        if !shape.is_empty() {
            return Err(Error::Shape(format!(
                "gradient requires a scalar output, got shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// `reach[i]` is true when node `lo + i` is a `wrt` node or depends on one.
    fn reach(&self, out: NodeId, wrt: &[NodeId]) -> (NodeId, Vec<bool>) {
        let lo = wrt.iter().copied().min().unwrap_or(out).min(out);
        let mut reach = vec![false; out + 1 - lo];
        let nodes = self.nodes.borrow();
        for &w in wrt {
            if w <= out {
                reach[w - lo] = true;
            }
        }
        for id in lo..=out {
            if reach[id - lo] {
                continue;
            }
            reach[id - lo] = nodes[id].inputs.iter().any(|&i| i >= lo && reach[i - lo]);
        }
        (lo, reach)
    }

    /// Reverse-mode gradients of scalar `out` recorded as new tape nodes.
    pub fn grad<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Result<Grads<'t>> {
        self.check_scalar(out.id)?;
        let wrt_ids: Vec<NodeId> = wrt.iter().map(|v| v.id).collect();
        let (lo, reach) = self.reach(out.id, &wrt_ids);
        let mut adj: Vec<Option<Var<'t>>> = vec![None; out.id + 1 - lo];
        adj[out.id - lo] = Some(self.leaf(Vec::new(), Arc::new(vec![1.0]), false));
        let mut results: Vec<Option<Var<'t>>> = vec![None; wrt.len()];
        for id in (lo..=out.id).rev() {
            if !reach[id - lo] {
                continue;
            }
            let Some(dy) = adj[id - lo] else { continue };
            for (k, &w) in wrt_ids.iter().enumerate() {
                if w == id {
                    results[k] = Some(dy);
                }
            }
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].inputs.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|&i| i >= lo && reach[i - lo]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let node = Var { tape: self, id };
            let contribs = ops::vjp_symbolic(&op, node, &inputs, dy, &need)?;
            for ((&inp, c), &needed) in inputs.iter().zip(contribs).zip(&need) {
                let Some(c) = c else { continue };
                debug_assert!(needed);
                let slot = &mut adj[inp - lo];
                *slot = Some(match *slot {
                    Some(prev) => prev.add(c)?,
                    None => c,
                });
            }
        }
        let mut unreachable = Vec::new();
        let grads = results
            .into_iter()
            .enumerate()
            .map(|(k, g)| match g {
                Some(g) => g,
                None => {
                    unreachable.push(k);
                    self.constant(&Tensor::zeros(&self.shape_of(wrt_ids[k])))
                }
            })
            .collect();
        Ok(Grads { grads, unreachable })
    }

    /// Numeric reverse-mode gradients of scalar `out`. Checkpointed segments
    /// are replayed one at a time as the sweep reaches them.
    pub fn backward(&self, out: Var<'_>, wrt: &[Var<'_>]) -> Result<NumericGrads> {
        self.check_scalar(out.id)?;
        let wrt_ids: Vec<NodeId> = wrt.iter().map(|v| v.id).collect();
        let (lo, reach) = self.reach(out.id, &wrt_ids);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.id + 1 - lo];
        adj[out.id - lo] = Some(vec![1.0]);
        let mut results: Vec<Option<Vec<f64>>> = vec![None; wrt.len()];
        let mut active: Option<usize> = None;
        for id in (lo..=out.id).rev() {
            if let Some(s) = active {
                if id < self.segment_start(s) {
                    self.release(s);
                    active = None;
                }
            }
            if !reach[id - lo] {
                continue;
            }
            let Some(dy) = adj[id - lo].take() else {
                continue;
            };
            for (k, &w) in wrt_ids.iter().enumerate() {
                if w == id {
                    results[k] = Some(dy.clone());
                }
            }
            let (op, inputs, segment) = {
                let nodes = self.nodes.borrow();
                (
                    nodes[id].op.clone(),
                    nodes[id].inputs.clone(),
                    nodes[id].segment,
                )
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|&i| i >= lo && reach[i - lo]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            if let Some(s) = segment {
                if active != Some(s) {
                    if let Some(prev) = active {
                        self.release(prev);
                    }
                    self.materialize(s);
                    active = Some(s);
                }
            }
            let in_vals: Vec<Arc<Vec<f64>>> = inputs.iter().map(|&i| self.value_of(i)).collect();
            let in_shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.shape_of(i)).collect();
            let out_val = self.value_of(id);
            let out_shape = self.shape_of(id);
            let (flops, contribs) =
                ops::vjp_numeric(&op, &in_vals, &in_shapes, &out_val, &out_shape, &dy, &need);
            self.count("backward", flops);
            for ((&inp, c), &needed) in inputs.iter().zip(contribs).zip(&need) {
                let Some(c) = c else { continue };
                debug_assert!(needed);
                let slot = &mut adj[inp - lo];
                match slot {
                    Some(prev) => {
                        for (p, v) in prev.iter_mut().zip(&c) {
                            *p += v;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        if let Some(s) = active {
            self.release(s);
        }
        let mut unreachable = Vec::new();
        let grads = results
            .into_iter()
            .enumerate()
            .map(|(k, g)| {
                let shape = self.shape_of(wrt_ids[k]);
                match g {
                    Some(g) => Tensor::new(&shape, g).expect("gradient shape"),
                    None => {
                        unreachable.push(k);
                        Tensor::zeros(&shape)
                    }
                }
            })
            .collect();
        Ok(NumericGrads { grads, unreachable })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn value(&self) -> Tensor {
        Tensor::from_shared(self.shape(), self.tape.value_of(self.id))
    }

    pub(crate) fn raw(&self) -> Arc<Vec<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn item(&self) -> f64 {
        let v = self.raw();
        assert_eq!(v.len(), 1, "item() on non-scalar node");
        v[0]
    }

    /// Same value as a non-differentiable leaf.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.shape(), self.raw(), false)
    }
}

//! Operation-recording tape for reverse-mode differentiation.
//!
//! A [`Var`] is an immutable tensor value, optionally linked to a node on the
//! tape that produced it. Leaves created with [`Tape::leaf`] are the
//! `requires_grad` tensors; everything derived from them is recorded in
//! topological order, and [`Tape::backward`] replays the nodes in exact
//! reverse order. Gradients are returned in a [`Gradients`] table rather than
//! stored on the tensors.
//!
//! Accumulation contract: one `backward` per recording. A second call before
//! [`Tape::reset`] is a usage error; callers that want to sum gradients over
//! several losses add the losses first.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule: receives dLoss/dOutput and a per-input "needs gradient" mask,
/// returns one optional gradient per input in input order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeState<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<String>,
}

/// Tensor value with an optional tape link.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Rc<Tensor<T>>,
    node: Option<(u64, usize)>,
}

impl<T: Scalar> Var<T> {
    pub fn constant(t: Tensor<T>) -> Self {
        Self { value: Rc::new(t), node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node={:?})", self.value, self.node.map(|n| n.1))
    }
}

pub struct Tape<T: Scalar> {
    recording: bool,
    state: RefCell<TapeState<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for a later `backward`.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that never records; every op result is a constant. Used for inference
    /// and finite-difference probes.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            recording,
            state: RefCell::new(TapeState {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
                consumed: false,
                fault: None,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: scales the gradient produced by every `op` node by 1.5 so the
    /// verification harness can prove it notices a wrong backward rule.
    pub fn inject_fault(&self, op: &str) {
        self.state.borrow_mut().fault = Some(op.to_string());
    }

    /// Drops all recorded nodes. Vars from the previous recording are no longer
    /// linked to this tape.
    pub fn reset(&self) {
        let mut st = self.state.borrow_mut();
        st.nodes.clear();
        st.consumed = false;
        st.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var::constant(t)
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        if !self.recording {
            return Var::constant(t);
        }
        let mut st = self.state.borrow_mut();
        st.nodes.push(Node { op: "leaf", parents: Vec::new(), backward: None });
        Var { value: Rc::new(t), node: Some((st.id, st.nodes.len() - 1)) }
    }

    fn node_of(&self, v: &Var<T>, id: u64) -> Option<usize> {
        match v.node {
            Some((tid, n)) if tid == id => Some(n),
            Some((tid, _)) => panic!("var from tape {tid} used on tape {id}"),
            None => None,
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<T> {
        debug_assert!(
            !inputs.iter().all(|v| v.value.all_finite()) || out.all_finite(),
            "{op} produced non-finite values from finite inputs"
        );
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return Var::constant(out);
        }
        let mut st = self.state.borrow_mut();
        let id = st.id;
        let parents = inputs.iter().map(|v| self.node_of(v, id)).collect();
        st.nodes.push(Node { op, parents, backward: Some(backward) });
        Var { value: Rc::new(out), node: Some((id, st.nodes.len() - 1)) }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                loss.dims()
            )));
        }
        let mut st = self.state.borrow_mut();
        if st.consumed {
            return Err(Error::Usage(
                "tape already consumed by backward; call reset() before recording again".into(),
            ));
        }
        let id = st.id;
        let Some(root) = loss.node.filter(|n| n.0 == id).map(|n| n.1) else {
            return Err(Error::Usage("loss is not on this tape".into()));
        };
        st.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..st.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.dims(), T::one()));

        let fault = st.fault.clone();
        for i in (0..=root).rev() {
            let node = &st.nodes[i];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let mut outs = rule(&g, &needs);
            if fault.as_deref() == Some(node.op) {
                let k = T::of(1.5);
                outs.iter_mut().flatten().for_each(|t| *t = t.scale(k));
            }
            // leaves keep their gradient; interior nodes drop it after use
            for (p, gp) in node.parents.iter().zip(outs) {
                if let (Some(p), Some(gp)) = (p, gp) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&gp),
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
        }
        Ok(Gradients { tape_id: id, grads })
    }
}

/// dLoss/dLeaf for every leaf reached by the sweep.
pub struct Gradients<T: Scalar> {
    tape_id: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        match v.node {
            Some((tid, n)) if tid == self.tape_id => self.grads[n].as_ref(),
            _ => None,
        }
    }

    /// Gradient for `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.dims()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&y);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_without_reset_is_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let loss = tape.sum(&x);
        assert!(tape.backward(&loss).is_ok());
        assert!(matches!(tape.backward(&loss), Err(Error::Usage(_))));
        tape.reset();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let loss = tape.sum(&x);
        assert_eq!(tape.backward(&loss).unwrap().wrt(&x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones(&[3]));
        let y = tape.mul(&x, &x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + x) -> grad = 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.5, -1.0, 3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.add(&sq, &x).unwrap();
        let loss = tape.sum(&s);
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[2.0, -1.0, 7.0]);
    }
}

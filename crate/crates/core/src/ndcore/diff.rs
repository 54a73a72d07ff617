use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndcore::DenseMatrix;

/// Maps the gradient flowing into a node to the contribution for one parent.
pub(crate) type GradFn = Box<dyn Fn(&DenseMatrix) -> DenseMatrix>;

struct Inner {
    value: RefCell<DenseMatrix>,
    grad: RefCell<Option<DenseMatrix>>,
    requires_grad: bool,
    parents: Vec<(DiffNode, GradFn)>,
    backward_visits: Cell<u64>,
}

/// Node in a reverse-mode differentiation graph. Cloning is cheap (shared
/// reference); the graph is append-only and single-threaded.
#[derive(Clone)]
pub struct DiffNode(Rc<Inner>);

impl std::fmt::Debug for DiffNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffNode")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("parents", &self.0.parents.len())
            .finish()
    }
}

impl DiffNode {
    pub fn leaf(value: DenseMatrix, requires_grad: bool) -> Self {
        DiffNode(Rc::new(Inner {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward_visits: Cell::new(0),
        }))
    }

    pub fn constant(value: DenseMatrix) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(DenseMatrix::from_vec(1, 1, vec![v]).expect("finite scalar"))
    }

    /// Fresh constant holding this node's current value; gradients stop here.
    pub fn detach(&self) -> DiffNode {
        Self::constant(self.value().clone())
    }

    pub(crate) fn from_parents(value: DenseMatrix, parents: Vec<(DiffNode, GradFn)>) -> Self {
        let requires_grad = parents.iter().any(|(p, _)| p.requires_grad());
        DiffNode(Rc::new(Inner {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            // without grad flow the history is dead weight, drop it
            parents: if requires_grad { parents } else { Vec::new() },
            backward_visits: Cell::new(0),
        }))
    }

    pub fn value(&self) -> Ref<'_, DenseMatrix> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Replace the stored value, preserving shape. Meant for optimizer steps
    /// on leaves; rewriting an interior node would desynchronize the graph.
    pub fn set_value(&self, value: DenseMatrix) -> Result<()> {
        if !self.0.parents.is_empty() {
            return Err(Error::Contract(
                "set_value on a non-leaf node".to_string(),
            ));
        }
        if value.shape() != self.shape() {
            return Err(Error::dim(
                "set_value",
                format!("{:?} -> {:?}", self.shape(), value.shape()),
            ));
        }
        *self.0.value.borrow_mut() = value;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<DenseMatrix> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// How many times backward has processed this node. A DAG traversal
    /// touches each reachable node exactly once per call.
    pub fn backward_visits(&self) -> u64 {
        self.0.backward_visits.get()
    }

    fn accumulate_grad(&self, contrib: DenseMatrix) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.add_assign(&contrib),
            None => *slot = Some(contrib),
        }
    }

    fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into any
    /// previously stored gradients; call `zero_grad` on leaves between steps.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a loss with no trainable inputs".to_string(),
            ));
        }

        // Iterative postorder over the requires_grad subgraph.
        let mut order: Vec<DiffNode> = Vec::new();
        let mut seen: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(DiffNode, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.ptr());
        while let Some((node, next_parent)) = stack.pop() {
            let parents = &node.0.parents;
            let mut pushed = false;
            let mut i = next_parent;
            while i < parents.len() {
                let (p, _) = &parents[i];
                i += 1;
                if p.requires_grad() && !seen.contains(&p.ptr()) {
                    seen.insert(p.ptr());
                    stack.push((node.clone(), i));
                    stack.push((p.clone(), 0));
                    pushed = true;
                    break;
                }
            }
            if !pushed {
                order.push(node);
            }
        }

        // Leaf gradients accumulate across calls; interior nodes are scratch
        // space for this sweep only, otherwise repeat calls would compound.
        for node in &order {
            if !node.0.parents.is_empty() {
                node.zero_grad();
            }
        }
        self.accumulate_grad(DenseMatrix::ones(1, 1));
        for node in order.iter().rev() {
            node.0.backward_visits.set(node.0.backward_visits.get() + 1);
            let grad_ref = node.0.grad.borrow();
            let grad = grad_ref
                .as_ref()
                .expect("reverse topological order guarantees a gradient");
            for (parent, rule) in &node.0.parents {
                if parent.requires_grad() {
                    parent.accumulate_grad(rule(grad));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::ops;

    #[test]
    fn backward_requires_scalar_loss() {
        let x = DiffNode::leaf(DenseMatrix::ones(2, 2), true);
        assert!(x.backward().is_err());
    }

    #[test]
    fn backward_requires_trainable_input() {
        let x = DiffNode::constant(DenseMatrix::ones(1, 1));
        assert!(x.backward().is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = DiffNode::leaf(DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), true);
        let loss = ops::sum(&ops::mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0, 12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_dag_visits_each_node_once() {
        let x = DiffNode::leaf(DenseMatrix::from_vec(1, 2, vec![0.5, -1.5]).unwrap(), true);
        let a = ops::scale(&x, 2.0).unwrap();
        let b = ops::scale(&x, 3.0).unwrap();
        let joined = ops::add(&a, &b).unwrap();
        let loss = ops::sum(&joined).unwrap();
        loss.backward().unwrap();
        for node in [&x, &a, &b, &joined, &loss] {
            assert_eq!(node.backward_visits(), 1);
        }
        // d(sum(2x + 3x)) = 5
        assert_eq!(x.grad().unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn constant_subgraphs_are_pruned() {
        let c = DiffNode::constant(DenseMatrix::ones(2, 2));
        let d = ops::mul(&c, &c).unwrap();
        assert!(!d.requires_grad());
        assert!(d.0.parents.is_empty());
    }

    #[test]
    fn set_value_is_leaf_only_and_shape_checked() {
        let x = DiffNode::leaf(DenseMatrix::ones(2, 2), true);
        assert!(x.set_value(DenseMatrix::zeros(2, 2)).is_ok());
        assert!(x.set_value(DenseMatrix::zeros(3, 2)).is_err());
        let y = ops::scale(&x, 2.0).unwrap();
        assert!(y.set_value(DenseMatrix::zeros(2, 2)).is_err());
    }
}

use std::cell::RefCell;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and a per-parent "needs
/// gradient" mask, returns one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&[Real], &[bool]) -> Vec<Option<Vec<Real>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    tracked: bool,
    backward: Option<BackwardFn>,
}

/// Dynamically recorded operation tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a reverse walk. A tape is
/// confined to one thread; build a fresh tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let tracked = t.requires_grad();
        let value = Rc::new(t.detach());
        self.push_node(value, Vec::new(), tracked, None)
    }

    /// Records a constant (never tracked) leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_node(Rc::new(t.detach()), Vec::new(), false, None)
    }

    fn push_node(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        tracked: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            tracked,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no parent is tracked.
    pub fn record<'t, F>(&'t self, value: Rc<Tensor>, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&[Real], &[bool]) -> Vec<Option<Vec<Real>>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let tracked = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].tracked)
        };
        let bw: Option<BackwardFn> = if tracked { Some(Box::new(backward)) } else { None };
        self.push_node(value, ids, tracked, bw)
    }

    /// Back-propagates from a single-element root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
            // Keep gradients of leaves; interior gradients are consumed.
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    /// Gradient of a tracked leaf, if the root depends on it.
    pub fn get(&self, v: Var<'_>) -> Option<&[Real]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor of the leaf's shape, zeros when unreached.
    pub fn tensor(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> Real {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on non-scalar");
        v.data()[0]
    }
}

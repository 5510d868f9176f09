//! Define-by-run reverse-mode tape.
//!
//! Every differentiable operation on a tracked [`Var`] appends one node holding
//! its parents and a backward rule. Node ids increase in creation order, so the
//! node list is already topologically sorted and `backward` is a single reverse
//! sweep that visits each reachable node once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Backward rule: upstream gradient and a per-input "needs gradient" mask in,
/// one optional gradient per input out.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    generation: Cell<u64>,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
struct Track {
    tape: Rc<TapeInner>,
    id: usize,
    generation: u64,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var {
    value: Tensor,
    track: Option<Track>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, tracked={})", self.value, self.track.is_some())
    }
}

/// Gradients of the leaves reached by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.track.as_ref().and_then(|t| self.by_node.get(&t.id))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
                generation: Cell::new(0),
            }),
        }
    }

    /// A gradient-requiring leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            track: Some(Track {
                tape: Rc::clone(&self.inner),
                id,
                generation: self.inner.generation.get(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes. Vars recorded before the reset are invalidated.
    pub fn reset(&self) {
        self.inner.nodes.borrow_mut().clear();
        self.inner.consumed.set(false);
        self.inner.generation.set(self.inner.generation.get() + 1);
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Propagates from a scalar `loss` to every leaf it depends on.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.value.shape()),
            ));
        }
        let track = loss
            .track
            .as_ref()
            .filter(|t| Rc::ptr_eq(&t.tape, &self.inner))
            .ok_or_else(|| contract("backward", "loss is not recorded on this tape"))?;
        if track.generation != self.inner.generation.get() {
            return Err(contract("backward", "loss was recorded before a tape reset"));
        }
        if self.inner.consumed.replace(true) {
            return Err(contract("backward", "tape already back-propagated; reset it first"));
        }
        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; track.id + 1];
        grads[track.id] = Some(Tensor::ones(loss.value.shape().to_vec()));
        let mut leaves = HashMap::new();
        for id in (0..=track.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    leaves.insert(id, g);
                }
                Some(rule) => {
                    let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let parent_grads = rule(&g, &needs);
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        if let (Some(p), Some(pg)) = (parent, pg) {
                            grads[*p] = Some(match grads[*p].take() {
                                None => pg,
                                Some(acc) => acc.zip_map(&pg, |a, b| a + b).expect("gradient shape"),
                            });
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_node: leaves })
    }
}

impl Var {
    /// An untracked value; operations on constants record nothing.
    pub fn constant(value: Tensor) -> Self {
        Self { value, track: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.value.clone())
    }

    /// Records an op result. When no input is tracked, nothing is recorded.
    pub(crate) fn record(value: Tensor, inputs: &[&Var], backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> Var {
        let mut tape = None;
        let parents: Vec<Option<usize>> = inputs
            .iter()
            .map(|v| {
                v.track.as_ref().map(|t| {
                    assert_eq!(
                        t.generation,
                        t.tape.generation.get(),
                        "variable used after its tape was reset"
                    );
                    match &tape {
                        None => tape = Some(Rc::clone(&t.tape)),
                        Some(existing) => assert!(Rc::ptr_eq(existing, &t.tape), "variables from different tapes combined"),
                    }
                    t.id
                })
            })
            .collect();
        let Some(tape) = tape else {
            return Var::constant(value);
        };
        let generation = tape.generation.get();
        let id = {
            let mut nodes = tape.nodes.borrow_mut();
            nodes.push(Node {
                parents,
                backward: Some(Box::new(backward)),
            });
            nodes.len() - 1
        };
        Var {
            value,
            track: Some(Track { tape, id, generation }),
        }
    }
}

use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward closure sees: the gradient flowing into the node's output,
/// the values of its inputs and its own forward value.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A trainable leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            requires_grad: true,
            leaf: true,
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            requires_grad: false,
            leaf: true,
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. `backward` returns one optional gradient per input,
    /// in input order; it is only invoked if some input requires a gradient.
    pub fn custom<F>(&self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            leaf: false,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Reverse sweep from a scalar output. Only gradients of trainable leaves are
    /// kept.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let out_shape = nodes[output.0].value.shape().to_vec();
        grads[output.0] = Some(Tensor::ones(&out_shape));

        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.leaf {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let Some(backward) = &node.backward else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let parent_grads = backward(&BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }

        let keep = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| if nodes[i].leaf { g } else { None })
            .collect();
        Gradients { grads: keep }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

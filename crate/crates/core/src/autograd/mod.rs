//! A small reverse-mode automatic differentiation tape.
//!
//! Every forward operation appends a node holding its output value and a
//! closure that maps the output gradient to gradients of its inputs. Layers with
//! heavy inner loops (convolution, batch normalization, GRU) are single fused
//! nodes with hand-written backward passes; their gradients are checked against
//! central finite differences in the test-suite.

mod conv;
mod graph;
pub mod gradcheck;
mod ops;
mod rnn;

pub use graph::{BackwardCtx, Gradients, Graph, Var};
pub use rnn::GruWeights;

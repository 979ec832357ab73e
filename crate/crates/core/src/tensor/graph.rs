use crate::error::{Error, Result};

use super::Tensor;

/// One recorded differentiable operation with the handles its backward
/// pass needs.
pub(crate) enum TapeOp {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Scale { a: Tensor, factor: f32, out: Tensor },
    Relu { a: Tensor, out: Tensor },
    Softmax { axis: usize, out: Tensor, input: Tensor },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        x_hat: Vec<f32>,
        inv_std: Vec<f32>,
        out: Tensor,
    },
    CrossEntropyLs {
        logits: Tensor,
        probs: Vec<f32>,
        targets: Vec<u32>,
        pad_id: u32,
        epsilon: f32,
        n_valid: usize,
        out: Tensor,
    },
    TransposeLast2 { a: Tensor, out: Tensor },
    Permute { a: Tensor, axes: Vec<usize>, out: Tensor },
    Reshape { a: Tensor, out: Tensor },
    ConcatLast { parts: Vec<Tensor>, out: Tensor },
    EmbeddingLookup { table: Tensor, ids: Vec<u32>, out: Tensor },
    Dropout { a: Tensor, mask: Vec<f32>, out: Tensor },
    SumAll { a: Tensor, out: Tensor },
}

/// Wengert tape: an ordered record of executed differentiable operations.
///
/// A `Graph` created with [`Graph::recording`] appends one entry per op
/// whose result needs a gradient; [`Graph::backward`] replays those entries
/// in exact reverse order of forward execution. An inference graph records
/// nothing and cannot run backward. A graph belongs to one logical
/// execution context; running backward a second time without a fresh
/// forward is an error.
pub struct Graph {
    pub(crate) tape: Vec<TapeOp>,
    pub(crate) recording: bool,
    backward_done: bool,
}

impl Graph {
    /// Graph that records ops for a later backward pass.
    pub fn recording() -> Graph {
        Graph {
            tape: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// Forward-only graph: no tape, no gradients.
    pub fn inference() -> Graph {
        Graph {
            tape: Vec::new(),
            recording: false,
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_recorded_ops(&self) -> usize {
        self.tape.len()
    }

    pub(crate) fn push(&mut self, op: TapeOp) {
        self.tape.push(op);
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Seeds `loss.grad = 1` and visits the tape back to front,
    /// accumulating into the `grad` buffer of every tensor that requires
    /// one. Leaf tensors with `requires_grad == false` are skipped.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if !self.recording {
            return Err(Error::graph("backward on an inference graph"));
        }
        if self.backward_done {
            return Err(Error::graph(
                "backward already run on this graph; build a new forward pass first",
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.backward_done = true;
        loss.set_grad(vec![1.0]);
        for entry in self.tape.iter().rev() {
            entry.backward();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::recording();
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let s = g.sum_all(&a);
        g.backward(&s).unwrap();
        let err = g.backward(&s).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn backward_on_inference_graph_is_error() {
        let mut g = Graph::inference();
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let s = g.sum_all(&a);
        assert!(g.backward(&s).is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::recording();
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = g.relu(&a);
        assert!(g.backward(&b).is_err());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::inference();
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let _ = g.relu(&a);
        assert_eq!(g.num_recorded_ops(), 0);
    }
}

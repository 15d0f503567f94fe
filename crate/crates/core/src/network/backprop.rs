//! Cached forward pass and exact reverse-mode gradients.

use super::{relu_inplace, Affine, ResidualNet};
use crate::error::{Error, Result};
use crate::linalg::{matmul, transpose_matmul, Matrix};

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    stem_pre: Matrix,
    /// `transition_in[s]` feeds transition `s` (between stage `s` and `s+1`).
    transition_in: Vec<Matrix>,
    transition_pre: Vec<Matrix>,
    block_in: Vec<Vec<Matrix>>,
    block_hidden_pre: Vec<Vec<Matrix>>,
    final_pre: Matrix,
    representation: Matrix,
    logits: Matrix,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn representation(&self) -> &Matrix {
        &self.representation
    }
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    relu_inplace(&mut out);
    out
}

/// Forward pass that records every pre-activation.
pub fn forward_trace(net: &ResidualNet, x: &Matrix) -> Result<ForwardTrace> {
    net.check_input(x)?;
    let stem_pre = net.stem.forward(x);
    let mut h = relu(&stem_pre);
    let mut transition_in = Vec::new();
    let mut transition_pre = Vec::new();
    let mut block_in = Vec::with_capacity(net.stages.len());
    let mut block_hidden_pre = Vec::with_capacity(net.stages.len());
    for (s, blocks) in net.stages.iter().enumerate() {
        if s > 0 {
            let pre = net.transitions[s - 1].forward(&h);
            transition_in.push(h);
            h = relu(&pre);
            transition_pre.push(pre);
        }
        let mut ins = Vec::with_capacity(blocks.len());
        let mut pres = Vec::with_capacity(blocks.len());
        for b in blocks {
            let a = b.expand.forward(&h);
            let mut out = b.project.forward(&relu(&a));
            for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
            ins.push(h);
            pres.push(a);
            h = out;
        }
        block_in.push(ins);
        block_hidden_pre.push(pres);
    }
    let representation = relu(&h);
    let logits = net.classifier.forward(&representation);
    Ok(ForwardTrace {
        input: x.clone(),
        stem_pre,
        transition_in,
        transition_pre,
        block_in,
        block_hidden_pre,
        final_pre: h,
        representation,
        logits,
    })
}

/// Writes `∂L/∂W`, `∂L/∂b` into `grad` and returns `∂L/∂input`.
fn affine_backward(layer: &Affine, input: &Matrix, g: &Matrix, grad: &mut Affine) -> Matrix {
    grad.weight = transpose_matmul(g, input).expect("affine grad shape");
    grad.bias.fill(0.0);
    for i in 0..g.rows() {
        for (b, v) in grad.bias.iter_mut().zip(g.row(i)) {
            *b += v;
        }
    }
    matmul(g, &layer.weight).expect("affine backward shape")
}

/// Zeroes `g` wherever the matching pre-activation was not positive.
fn relu_backward(g: &mut Matrix, pre: &Matrix) {
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Backpropagates `d_logits` through the traced pass.
///
/// Returns the parameter gradients, shaped like `net`, and the gradient
/// with respect to the input batch.
pub fn backward(
    net: &ResidualNet,
    trace: &ForwardTrace,
    d_logits: &Matrix,
) -> Result<(ResidualNet, Matrix)> {
    if d_logits.shape() != trace.logits.shape() {
        return Err(Error::Shape {
            op: "backward",
            left: d_logits.shape(),
            right: trace.logits.shape(),
        });
    }
    let mut grad = net.zeros_like();
    let d_rep = affine_backward(
        &net.classifier,
        &trace.representation,
        d_logits,
        &mut grad.classifier,
    );
    let mut g = d_rep;
    relu_backward(&mut g, &trace.final_pre);

    for s in (0..net.stages.len()).rev() {
        for (p, b) in net.stages[s].iter().enumerate().rev() {
            let a = &trace.block_hidden_pre[s][p];
            let y = &trace.block_in[s][p];
            let gb = &mut grad.stages[s][p];
            let mut d_hidden = affine_backward(&b.project, &relu(a), &g, &mut gb.project);
            relu_backward(&mut d_hidden, a);
            let d_y = affine_backward(&b.expand, y, &d_hidden, &mut gb.expand);
            // identity shortcut
            for (gv, dv) in g.data_mut().iter_mut().zip(d_y.data()) {
                *gv += dv;
            }
        }
        if s > 0 {
            relu_backward(&mut g, &trace.transition_pre[s - 1]);
            g = affine_backward(
                &net.transitions[s - 1],
                &trace.transition_in[s - 1],
                &g,
                &mut grad.transitions[s - 1],
            );
        }
    }
    relu_backward(&mut g, &trace.stem_pre);
    let d_input = affine_backward(&net.stem, &trace.input, &g, &mut grad.stem);
    Ok((grad, d_input))
}

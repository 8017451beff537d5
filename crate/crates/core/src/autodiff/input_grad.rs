use super::{AutodiffError, Matrix, Tape, Var};

/// One affine layer bound to a tape: `x · weight + bias`.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// `fan_in × fan_out`.
    pub weight: Var,
    /// `1 × fan_out`.
    pub bias: Var,
}

/// Affine layers with ELU between them and a linear final layer.
/// Returns the output and the pre-activations of each hidden layer.
pub(crate) fn forward_with_preactivations(
    tape: &mut Tape,
    layers: &[LayerVars],
    x: Var,
) -> Result<(Var, Vec<Var>), AutodiffError> {
    if layers.is_empty() {
        return Err(AutodiffError::Contract("layer stack is empty".into()));
    }
    let mut pre = Vec::with_capacity(layers.len() - 1);
    let mut act = x;
    for (i, layer) in layers.iter().enumerate() {
        let z = tape.matmul(act, layer.weight)?;
        let a = tape.add_row(z, layer.bias)?;
        if i + 1 == layers.len() {
            return Ok((a, pre));
        }
        pre.push(a);
        act = tape.elu(a);
    }
    unreachable!("loop returns on the final layer")
}

/// Gradient of a scalar-output ELU network with respect to each input row,
/// recorded as an ordinary expression on the tape.
///
/// The result is `n × input_dim`; row `r` equals `∂D(x_r)/∂x_r`. It is
/// computed as `1 · W_Lᵀ ⊙ σ′(a_{L-1}) · W_{L-1}ᵀ ⊙ … · W_1ᵀ` with every
/// factor a tape node, so a later `backward` through any function of it
/// yields exact gradients for the weights (second-order terms through
/// `σ′` included).
pub fn mlp_input_gradient(tape: &mut Tape, layers: &[LayerVars], x: Var) -> Result<Var, AutodiffError> {
    let head = layers
        .last()
        .ok_or_else(|| AutodiffError::Contract("layer stack is empty".into()))?;
    let out_dim = tape.value(head.weight).cols();
    if out_dim != 1 {
        return Err(AutodiffError::Contract(format!(
            "input gradient needs a scalar output head, got width {out_dim}"
        )));
    }
    let (_, pre) = forward_with_preactivations(tape, layers, x)?;
    let n = tape.value(x).rows();
    let ones = tape.constant(Matrix::filled(n, 1, 1.0));
    let wt = tape.transpose(head.weight);
    let mut g = tape.matmul(ones, wt)?;
    for (layer, a) in layers[..layers.len() - 1].iter().zip(&pre).rev() {
        let d = tape.elu_derivative(*a);
        g = tape.mul(g, d)?;
        let wt = tape.transpose(layer.weight);
        g = tape.matmul(g, wt)?;
    }
    Ok(g)
}

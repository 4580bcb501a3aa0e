//! Multimodal adaptive layer normalization: two expert parameter sets
//! (condition, noise) derived from the timestep embedding, mixed per token
//! by input-dependent switch scores.

use rand::Rng;

use crate::param::Parameter;
use crate::tensor::{Scalar, Tensor};

/// Timestep embedding input to the AdaLN path. The sinusoidal features are
/// frozen; understanding mode substitutes a learned null vector.
pub struct TimeEmbedding<T: Scalar> {
    pub theta: Tensor<T>,
    pub null_flag: bool,
}

/// The 3x2 grid of expert modulation vectors, stored as three [2 x d]
/// tensors whose rows are the condition and noise experts.
pub struct StateMatrix<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub gate: Tensor<T>,
}

impl<T: Scalar> StateMatrix<T> {
    /// Degenerate all-zero state: AdaLN reduces to plain LN with zero gate.
    pub fn zeros(d: usize) -> Self {
        StateMatrix {
            scale: Tensor::zeros(vec![2, d]),
            shift: Tensor::zeros(vec![2, d]),
            gate: Tensor::zeros(vec![2, d]),
        }
    }
}

/// One AdaLN parameter set: the state projection and the 2-way switch.
pub struct AdaLNLayer<T: Scalar> {
    /// [d_t x 6d]; slices order Scale/Shift/Gate x cond/noise.
    pub w_ada: Parameter<T>,
    /// [d x 2]; two experts, condition and noise.
    pub w_mal: Parameter<T>,
    pub ln_eps: T,
    pub d: usize,
    pub d_t: usize,
}

impl<T: Scalar> Clone for AdaLNLayer<T> {
    fn clone(&self) -> Self {
        AdaLNLayer {
            w_ada: self.w_ada.clone(),
            w_mal: self.w_mal.clone(),
            ln_eps: self.ln_eps,
            d: self.d,
            d_t: self.d_t,
        }
    }
}

impl<T: Scalar> AdaLNLayer<T> {
    pub fn new<R: Rng>(
        name: &str,
        d: usize,
        d_t: usize,
        ln_eps: T,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        AdaLNLayer {
            w_ada: Parameter::new(
                format!("{name}.w_ada"),
                Tensor::randn(vec![d_t, 6 * d], init_std, rng),
            ),
            w_mal: Parameter::new(
                format!("{name}.w_mal"),
                Tensor::randn(vec![d, 2], init_std, rng),
            ),
            ln_eps,
            d,
            d_t,
        }
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        vec![self.w_ada.clone(), self.w_mal.clone()]
    }
}

/// S = reshape(SiLU(theta) . W_ada, [3, 2, d]).
pub fn compute_state_matrix<T: Scalar>(
    layer: &AdaLNLayer<T>,
    emb: &TimeEmbedding<T>,
) -> StateMatrix<T> {
    assert_eq!(
        emb.theta.shape(),
        vec![1, layer.d_t],
        "time embedding extent {:?} does not match d_t {}",
        emb.theta.shape(),
        layer.d_t
    );
    let flat = emb.theta.silu().matmul(&layer.w_ada.tensor); // [1 x 6d]
    let d = layer.d;
    let piece = |i: usize| flat.slice_cols(i * d, d);
    StateMatrix {
        scale: Tensor::concat_rows(&[piece(0), piece(1)]),
        shift: Tensor::concat_rows(&[piece(2), piece(3)]),
        gate: Tensor::concat_rows(&[piece(4), piece(5)]),
    }
}

/// delta = softmax(SiLU(h) . W_mal) per token; rows sum to 1.
pub fn switch_scores<T: Scalar>(layer: &AdaLNLayer<T>, h: &Tensor<T>) -> Tensor<T> {
    h.silu().matmul(&layer.w_mal.tensor).softmax()
}

/// The feature transform: mix the expert columns by the switch scores and
/// apply the modulated normalization. Returns (h_tilde, ada_gate); the gate
/// is consumed by the block's residual.
pub fn multimodal_adaln<T: Scalar>(
    layer: &AdaLNLayer<T>,
    h: &Tensor<T>,
    s: &StateMatrix<T>,
) -> (Tensor<T>, Tensor<T>) {
    let delta = switch_scores(layer, h); // [L x 2]
    multimodal_adaln_with_scores(layer, h, s, &delta)
}

/// Same transform with the switch scores supplied by the caller (used by
/// the one-hot reduction tests).
pub fn multimodal_adaln_with_scores<T: Scalar>(
    layer: &AdaLNLayer<T>,
    h: &Tensor<T>,
    s: &StateMatrix<T>,
    delta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ada_scale = delta.matmul(&s.scale); // [L x d]
    let ada_shift = delta.matmul(&s.shift);
    let ada_gate = delta.matmul(&s.gate);
    let normed = h.layer_norm(layer.ln_eps);
    let h_tilde = ada_scale.add_scalar(T::one()).mul(&normed).add(&ada_shift);
    (h_tilde, ada_gate)
}

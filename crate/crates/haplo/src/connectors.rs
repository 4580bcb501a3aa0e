//! Pre/post connectors (per-token routed normalize-project transform) and
//! the frozen per-modality feature pre-scaling gains.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::HaploError;
use crate::masking::{TokenType, TokenTypeSequence};
use crate::param::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Convex combination of transformed and pass-through paths; used in
    /// training so gradients reach the switch.
    Soft,
    /// Argmax routing per token; inference only.
    Hard,
}

pub struct Connector<T: Scalar> {
    /// Learnable transition matrix, [d x d].
    pub w_prime: Parameter<T>,
    /// Switch projection, [d x 2]; column 0 routes to the transform.
    pub w_sn: Parameter<T>,
    pub ln_eps: T,
    pub routing_mode: RoutingMode,
}

impl<T: Scalar> Connector<T> {
    pub fn new<R: Rng>(name: &str, d: usize, ln_eps: T, init_std: f64, rng: &mut R) -> Self {
        Connector {
            w_prime: Parameter::new(
                format!("{name}.w_prime"),
                Tensor::randn(vec![d, d], init_std, rng),
            ),
            w_sn: Parameter::new(
                format!("{name}.w_sn"),
                Tensor::randn(vec![d, 2], init_std, rng),
            ),
            ln_eps,
            routing_mode: RoutingMode::Soft,
        }
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        vec![self.w_prime.clone(), self.w_sn.clone()]
    }

    /// Per-token switch scores P, [L x 2].
    pub fn scores(&self, x: &Tensor<T>) -> Tensor<T> {
        x.silu().matmul(&self.w_sn.tensor).softmax()
    }
}

/// X~ = SiLU(LN(X)) W'; soft mode mixes X~ and X by the switch scores,
/// hard mode picks one per token by argmax.
pub fn connector_forward<T: Scalar>(c: &Connector<T>, x: &Tensor<T>) -> Tensor<T> {
    let transformed = x.layer_norm(c.ln_eps).silu().matmul(&c.w_prime.tensor);
    let p = c.scores(x);
    match c.routing_mode {
        RoutingMode::Soft => {
            let p0 = p.slice_cols(0, 1);
            let p1 = p.slice_cols(1, 1);
            transformed.row_scale(&p0).add(&x.row_scale(&p1))
        }
        RoutingMode::Hard => {
            // Indicator routing: bitwise pass-through on the argmax=1 rows.
            let scores = p.data();
            let rows = x.rows();
            let cols = x.cols();
            let xd = x.data();
            let td = transformed.data();
            let mut out = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let take_transform = scores[r * 2] >= scores[r * 2 + 1];
                let src = if take_transform { &td } else { &xd };
                out[r * cols..(r + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
            }
            Tensor::from_vec(vec![rows, cols], out)
        }
    }
}

/// Frozen per-modality scalar gains calibrated from feature RMS statistics.
#[derive(Debug, Clone)]
pub struct PreScaler {
    gamma: BTreeMap<&'static str, f64>,
    pub target_rms: f64,
    pub calibrated: bool,
}

impl PreScaler {
    pub fn identity(target_rms: f64) -> Self {
        let mut gamma = BTreeMap::new();
        for t in TokenType::ALL {
            gamma.insert(t.label(), 1.0);
        }
        PreScaler {
            gamma,
            target_rms,
            calibrated: false,
        }
    }

    pub fn gamma(&self, t: TokenType) -> f64 {
        self.gamma[t.label()]
    }

    pub fn set_gamma(&mut self, t: TokenType, g: f64) {
        assert!(g > 0.0, "prescaler gains must be positive");
        self.gamma.insert(t.label(), g);
    }

    pub fn gammas(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        self.gamma.iter().map(|(&k, &v)| (k, v))
    }
}

/// Set gamma[m] = target_rms / RMS(features of type m) over the stream and
/// freeze. Every type in `required` must appear in the stream.
pub fn calibrate_prescaler<T: Scalar>(
    ps: &mut PreScaler,
    stream: &[(Tensor<T>, TokenTypeSequence)],
    required: &[TokenType],
) -> Result<(), HaploError> {
    let mut sum_sq: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut count: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (x, seq) in stream {
        let cols = x.cols();
        assert_eq!(x.rows(), seq.len(), "stream features/tags length mismatch");
        let data = x.data();
        for (r, &tag) in seq.tags().iter().enumerate() {
            let s: f64 = data[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum();
            *sum_sq.entry(tag.label()).or_default() += s;
            *count.entry(tag.label()).or_default() += cols;
        }
    }
    let missing: Vec<String> = required
        .iter()
        .filter(|t| !count.contains_key(t.label()))
        .map(|t| t.label().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(HaploError::Calibration(missing));
    }
    for (label, n) in &count {
        let rms = (sum_sq[label] / *n as f64).sqrt();
        if rms > 0.0 {
            ps.gamma.insert(label, ps.target_rms / rms);
        }
    }
    ps.calibrated = true;
    Ok(())
}

/// Row-wise multiply by the gain of each token's modality.
pub fn apply_prescaler<T: Scalar>(
    ps: &PreScaler,
    x: &Tensor<T>,
    seq: &TokenTypeSequence,
) -> Tensor<T> {
    assert_eq!(x.rows(), seq.len(), "features/tags length mismatch");
    if !ps.calibrated {
        return x.clone();
    }
    let factors: Vec<T> = seq
        .tags()
        .iter()
        .map(|&t| T::from_f64(ps.gamma(t)))
        .collect();
    x.row_scale_const(&factors)
}

//! The HaploOmni block: AdaLN -> masked attention -> gated residual ->
//! AdaLN -> feed-forward -> gated residual.

use rand::Rng;

use crate::adaln::{compute_state_matrix, multimodal_adaln, AdaLNLayer, StateMatrix, TimeEmbedding};
use crate::masking::AttentionMask;
use crate::param::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub rope_enabled: bool,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.d % self.heads == 0,
            "width {} not divisible by {} heads",
            self.d,
            self.heads
        );
        self.d / self.heads
    }
}

/// Rotary position of one token: two factorized indices. Text uses
/// (seq, seq); vision/noise patches use (frame-major row, column).
pub type RopePos = (usize, usize);

/// Per-block cached keys/values of the processed prefix. Owned by exactly
/// one decode session.
pub struct BlockKV<T: Scalar> {
    k: Option<Tensor<T>>,
    v: Option<Tensor<T>>,
}

impl<T: Scalar> Default for BlockKV<T> {
    fn default() -> Self {
        BlockKV { k: None, v: None }
    }
}

impl<T: Scalar> BlockKV<T> {
    pub fn len(&self) -> usize {
        self.k.as_ref().map(|k| k.rows()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rectangular view of an attention mask: query rows x key columns.
pub struct MaskSlice {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl MaskSlice {
    pub fn full(mask: &AttentionMask) -> Self {
        let n = mask.len();
        let mut allowed = Vec::with_capacity(n * n);
        for q in 0..n {
            allowed.extend_from_slice(mask.row(q));
        }
        MaskSlice {
            rows: n,
            cols: n,
            allowed,
        }
    }

    /// The last `new_rows` query rows against all keys; used for
    /// incremental decoding where earlier rows are already cached.
    pub fn tail(mask: &AttentionMask, new_rows: usize) -> Self {
        let n = mask.len();
        assert!(new_rows <= n);
        let mut allowed = Vec::with_capacity(new_rows * n);
        for q in n - new_rows..n {
            allowed.extend_from_slice(mask.row(q));
        }
        MaskSlice {
            rows: new_rows,
            cols: n,
            allowed,
        }
    }

    fn bias<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_infinity() })
            .collect();
        Tensor::from_vec(vec![self.rows, self.cols], data)
    }
}

/// State matrices for the block's two AdaLN applications at one timestep.
pub struct BlockStates<T: Scalar> {
    pub s1: StateMatrix<T>,
    pub s2: StateMatrix<T>,
}

pub struct HaploBlock<T: Scalar> {
    pub adaln_1: AdaLNLayer<T>,
    pub adaln_2: AdaLNLayer<T>,
    pub w_q: Parameter<T>,
    pub w_k: Parameter<T>,
    pub w_v: Parameter<T>,
    pub w_o: Parameter<T>,
    pub ffn_in: Parameter<T>,
    pub ffn_out: Parameter<T>,
    pub cfg: BlockConfig,
}

impl<T: Scalar> HaploBlock<T> {
    /// `adaln_1`/`adaln_2` may be shared handles across blocks (parameter
    /// groups); the attention and FFN weights are always block-local.
    pub fn new<R: Rng>(
        name: &str,
        cfg: BlockConfig,
        adaln_1: AdaLNLayer<T>,
        adaln_2: AdaLNLayer<T>,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d;
        let mk = |n: String, shape: Vec<usize>, rng: &mut R| {
            Parameter::new(n, Tensor::randn(shape, init_std, rng))
        };
        HaploBlock {
            adaln_1,
            adaln_2,
            w_q: mk(format!("{name}.w_q"), vec![d, d], rng),
            w_k: mk(format!("{name}.w_k"), vec![d, d], rng),
            w_v: mk(format!("{name}.w_v"), vec![d, d], rng),
            w_o: mk(format!("{name}.w_o"), vec![d, d], rng),
            ffn_in: mk(format!("{name}.ffn_in"), vec![d, cfg.d_ff], rng),
            ffn_out: mk(format!("{name}.ffn_out"), vec![cfg.d_ff, d], rng),
            cfg,
        }
    }

    /// Block-local (non-shared) parameters.
    pub fn local_params(&self) -> Vec<Parameter<T>> {
        vec![
            self.w_q.clone(),
            self.w_k.clone(),
            self.w_v.clone(),
            self.w_o.clone(),
            self.ffn_in.clone(),
            self.ffn_out.clone(),
        ]
    }

    /// Compute both state matrices for a timestep embedding.
    pub fn states(&self, theta: &TimeEmbedding<T>) -> BlockStates<T> {
        BlockStates {
            s1: compute_state_matrix(&self.adaln_1, theta),
            s2: compute_state_matrix(&self.adaln_2, theta),
        }
    }
}

/// cos/sin tables for one head width at the given factorized positions.
fn rope_tables<T: Scalar>(
    head_dim: usize,
    positions: &[RopePos],
) -> (Vec<T>, Vec<T>) {
    assert!(
        head_dim % 4 == 0 || head_dim == 2,
        "rope needs head_dim divisible by 4 (or 2), got {}",
        head_dim
    );
    let half = head_dim / 2;
    let per_axis = (half / 2).max(1);
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &(a, b) in positions {
        for j in 0..half {
            let (idx, fi) = if j < per_axis || half == 1 {
                (a, j)
            } else {
                (b, j - per_axis)
            };
            let freq = (10000f64).powf(-(fi as f64) / per_axis as f64);
            let angle = idx as f64 * freq;
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

/// Apply rotary rotation per head to a [L x d] projection.
fn apply_rope<T: Scalar>(x: &Tensor<T>, cfg: &BlockConfig, positions: &[RopePos]) -> Tensor<T> {
    if !cfg.rope_enabled {
        return x.clone();
    }
    let hd = cfg.head_dim();
    let (cos, sin) = rope_tables::<T>(hd, positions);
    let parts: Vec<Tensor<T>> = (0..cfg.heads)
        .map(|h| x.slice_cols(h * hd, hd).rotate_pairs(&cos, &sin))
        .collect();
    Tensor::concat_cols(&parts)
}

/// Multi-head scaled dot-product attention with hybrid masking. With a
/// cache, the prefix keys/values are reused and the new ones appended.
pub fn attention<T: Scalar>(
    blk: &HaploBlock<T>,
    h: &Tensor<T>,
    mask: &MaskSlice,
    positions: &[RopePos],
    mut cache: Option<&mut BlockKV<T>>,
) -> Tensor<T> {
    let l_new = h.rows();
    assert_eq!(positions.len(), l_new, "one rope position per new token");
    let cached = cache.as_ref().map(|c| c.len()).unwrap_or(0);
    assert!(
        mask.rows == l_new && mask.cols == cached + l_new,
        "state error: mask extent {}x{} disagrees with {} new + {} cached tokens",
        mask.rows,
        mask.cols,
        l_new,
        cached
    );

    let q = apply_rope(&h.matmul(&blk.w_q.tensor), &blk.cfg, positions);
    let k_new = apply_rope(&h.matmul(&blk.w_k.tensor), &blk.cfg, positions);
    let v_new = h.matmul(&blk.w_v.tensor);

    let (k, v) = match cache.as_mut() {
        Some(c) => {
            let k = match c.k.take() {
                Some(prev) => Tensor::concat_rows(&[prev, k_new]),
                None => k_new,
            };
            let v = match c.v.take() {
                Some(prev) => Tensor::concat_rows(&[prev, v_new]),
                None => v_new,
            };
            c.k = Some(k.detach());
            c.v = Some(v.detach());
            (k, v)
        }
        None => (k_new, v_new),
    };

    let hd = blk.cfg.head_dim();
    let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
    let bias = mask.bias::<T>();
    let heads: Vec<Tensor<T>> = (0..blk.cfg.heads)
        .map(|i| {
            let qh = q.slice_cols(i * hd, hd);
            let kh = k.slice_cols(i * hd, hd);
            let vh = v.slice_cols(i * hd, hd);
            let scores = qh.matmul(&kh.transpose()).scale(inv_sqrt).add(&bias);
            scores.softmax().matmul(&vh)
        })
        .collect();
    Tensor::concat_cols(&heads).matmul(&blk.w_o.tensor)
}

/// h1 = h + gate1 * Attn(AdaLN1(h)); out = h1 + gate2 * FFN(AdaLN2(h1)).
pub fn block_forward<T: Scalar>(
    blk: &HaploBlock<T>,
    h: &Tensor<T>,
    mask: &MaskSlice,
    positions: &[RopePos],
    states: &BlockStates<T>,
    cache: Option<&mut BlockKV<T>>,
) -> Tensor<T> {
    let (a1, gate1) = multimodal_adaln(&blk.adaln_1, h, &states.s1);
    let attn = attention(blk, &a1, mask, positions, cache);
    let h1 = h.add(&gate1.mul(&attn));

    let (a2, gate2) = multimodal_adaln(&blk.adaln_2, &h1, &states.s2);
    let ffn = a2.matmul(&blk.ffn_in.tensor).silu().matmul(&blk.ffn_out.tensor);
    h1.add(&gate2.mul(&ffn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_mask, TokenType, TokenTypeSequence};
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            d,
            heads,
            d_ff: 2 * d,
            rope_enabled: true,
        }
    }

    fn block(d: usize, heads: usize, seed: u64) -> HaploBlock<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = AdaLNLayer::new("b.adaln1", d, d, 1e-5, 0.3, &mut rng);
        let a2 = AdaLNLayer::new("b.adaln2", d, d, 1e-5, 0.3, &mut rng);
        HaploBlock::new("b", cfg(d, heads), a1, a2, 0.3, &mut rng)
    }

    fn text_mask(n: usize) -> MaskSlice {
        let seq = TokenTypeSequence::new(vec![TokenType::Text; n]).unwrap();
        MaskSlice::full(&build_mask(&seq))
    }

    fn text_positions(n: usize) -> Vec<RopePos> {
        (0..n).map(|i| (i, i)).collect()
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let blk = block(8, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut rng);
        let out = attention(&blk, &h, &text_mask(1), &text_positions(1), None);
        let want = h.matmul(&blk.w_v.tensor).matmul(&blk.w_o.tensor);
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let blk = block(8, 2, 2);
        // Zero key projection: all scores equal, weights 1/L.
        blk.w_k.tensor.set_data(&vec![0.0; 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let seq = TokenTypeSequence::new(vec![TokenType::Vision; 4]).unwrap();
        let mask = MaskSlice::full(&build_mask(&seq));
        let pos: Vec<RopePos> = (0..4).map(|i| (i, 0)).collect();
        let out = attention(&blk, &h, &mask, &pos, None);
        let v = h.matmul(&blk.w_v.tensor).data();
        let mut avg = vec![0.0f64; 8];
        for r in 0..4 {
            for j in 0..8 {
                avg[j] += v[r * 8 + j] / 4.0;
            }
        }
        let want = Tensor::from_vec(vec![1, 8], avg)
            .matmul(&blk.w_o.tensor)
            .data();
        for r in 0..4 {
            for j in 0..8 {
                assert!((out.data()[r * 8 + j] - want[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cached_equals_uncached_over_text_sequence() {
        let blk = block(8, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16;
        let h = Tensor::<f64>::randn(vec![n, 8], 1.0, &mut rng);
        let full = attention(&blk, &h, &text_mask(n), &text_positions(n), None).data();

        let mut cache = BlockKV::default();
        let mut seq = TokenTypeSequence::new(vec![TokenType::Text]).unwrap();
        let mut mask = build_mask(&seq);
        let mut incremental = Vec::new();
        for i in 0..n {
            if i > 0 {
                mask = crate::masking::extend_mask_for_decoding(&mask, TokenType::Text);
                seq.push(TokenType::Text);
            }
            let row = h.select_rows(&[i]);
            let out = attention(
                &blk,
                &row,
                &MaskSlice::tail(&mask, 1),
                &[(i, i)],
                Some(&mut cache),
            );
            incremental.extend(out.data());
        }
        for (a, b) in full.iter().zip(&incremental) {
            assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn zero_state_block_is_identity() {
        let blk = block(8, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let states = BlockStates {
            s1: StateMatrix::zeros(8),
            s2: StateMatrix::zeros(8),
        };
        let out = block_forward(&blk, &h, &text_mask(4), &text_positions(4), &states, None);
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_non_leakage_for_text() {
        let blk = block(8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = TimeEmbedding {
            theta: Tensor::<f64>::randn(vec![1, 8], 1.0, &mut rng),
            null_flag: false,
        };
        let states = blk.states(&theta);
        let h = Tensor::<f64>::randn(vec![5, 8], 1.0, &mut rng);
        let base = block_forward(&blk, &h, &text_mask(5), &text_positions(5), &states, None);
        // Perturb token 2 and check only positions >= 2 change.
        let mut d = h.data();
        d[2 * 8 + 3] += 0.5;
        let h2 = Tensor::from_vec(vec![5, 8], d);
        let out = block_forward(&blk, &h2, &text_mask(5), &text_positions(5), &states, None);
        for r in 0..5 {
            let changed = (0..8).any(|j| {
                (base.data()[r * 8 + j] - out.data()[r * 8 + j]).abs() > 1e-9
            });
            assert_eq!(changed, r >= 2, "row {}", r);
        }
    }

    #[test]
    fn bidirectional_sensitivity_for_vision() {
        let blk = block(8, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = TimeEmbedding {
            theta: Tensor::<f64>::randn(vec![1, 8], 1.0, &mut rng),
            null_flag: false,
        };
        let states = blk.states(&theta);
        let seq = TokenTypeSequence::new(vec![TokenType::Vision; 5]).unwrap();
        let mask = MaskSlice::full(&build_mask(&seq));
        let pos: Vec<RopePos> = (0..5).map(|i| (i, 0)).collect();
        let h = Tensor::<f64>::randn(vec![5, 8], 1.0, &mut rng);
        let base = block_forward(&blk, &h, &mask, &pos, &states, None);
        let mut d = h.data();
        d[3 * 8 + 1] += 0.5;
        let h2 = Tensor::from_vec(vec![5, 8], d);
        let out = block_forward(&blk, &h2, &mask, &pos, &states, None);
        for r in 0..5 {
            let changed = (0..8).any(|j| {
                (base.data()[r * 8 + j] - out.data()[r * 8 + j]).abs() > 1e-12
            });
            assert!(changed, "row {} unchanged", r);
        }
    }

    #[test]
    fn full_block_gradients_match_finite_differences() {
        let blk = block(8, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let theta = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut rng);
        let mut params = blk.local_params();
        params.extend(blk.adaln_1.params());
        params.extend(blk.adaln_2.params());
        let report = finite_difference_check(
            || {
                let states = blk.states(&TimeEmbedding {
                    theta: theta.clone(),
                    null_flag: false,
                });
                block_forward(&blk, &h, &text_mask(4), &text_positions(4), &states, None)
                    .silu()
                    .mean()
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }

    #[test]
    fn masked_weights_are_exactly_zero() {
        // Softmax over -inf logits puts exactly zero mass there.
        let logits = Tensor::<f64>::from_vec(
            vec![1, 3],
            vec![1.0, f64::NEG_INFINITY, 2.0],
        );
        let w = logits.softmax().data();
        assert_eq!(w[1], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

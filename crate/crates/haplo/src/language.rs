//! Byte-level vocabulary, next-token-prediction loss, and token sampling
//! (greedy, temperature, nucleus).

use rand::Rng;

use crate::error::HaploError;
use crate::tensor::{Scalar, Tensor};

/// 256 raw bytes followed by eight special tokens.
#[derive(Debug, Clone, Copy)]
pub struct Vocabulary;

impl Vocabulary {
    pub const SIZE: usize = 264;
    pub const BOS: usize = 256;
    pub const EOS: usize = 257;
    pub const PAD: usize = 258;
    /// Begin/end of a clean vision span.
    pub const BOI: usize = 259;
    pub const EOI: usize = 260;
    /// Begin/end of a noised latent span.
    pub const BON: usize = 261;
    pub const EON: usize = 262;
    /// Timestep conditioning slot.
    pub const TS: usize = 263;

    pub fn encode(text: &str) -> Vec<usize> {
        text.bytes().map(|b| b as usize).collect()
    }

    /// Bytes back to text; special tokens render as bracketed names.
    pub fn decode(ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        let mut out = String::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else {
                flush(&mut bytes, &mut out);
                out.push_str(match id {
                    Self::BOS => "<bos>",
                    Self::EOS => "<eos>",
                    Self::PAD => "<pad>",
                    Self::BOI => "<boi>",
                    Self::EOI => "<eoi>",
                    Self::BON => "<bon>",
                    Self::EON => "<eon>",
                    Self::TS => "<ts>",
                    _ => "<?>",
                });
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}

/// Mean cross-entropy over the rows flagged in `loss_mask`, with targets
/// aligned to those rows. Every batch must supervise at least one position.
pub fn ntp_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<Tensor<T>, HaploError> {
    assert_eq!(logits.rows(), loss_mask.len(), "one mask flag per logit row");
    assert_eq!(logits.rows(), targets.len(), "one target per logit row");
    let idx: Vec<usize> = (0..loss_mask.len()).filter(|&i| loss_mask[i]).collect();
    if idx.is_empty() {
        return Err(HaploError::DegenerateBatch(
            "no positions carry next-token loss".into(),
        ));
    }
    let picked: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
    Ok(logits.select_rows(&idx).cross_entropy_mean(&picked))
}

/// Pick a token from one row of logits. Temperature 0 is greedy argmax with
/// ascending-id tie break; otherwise scale, take the smallest nucleus whose
/// probability reaches `top_p` (always at least one token), renormalize, and
/// draw from it.
pub fn sample_token<T: Scalar, R: Rng>(
    logits: &[T],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> usize {
    assert!(!logits.is_empty());
    assert!(temperature >= 0.0, "temperature must be non-negative");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
    if temperature == 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if v.to_f64() > logits[best].to_f64() {
                best = i;
            }
        }
        return best;
    }
    // Stable softmax at the chosen temperature.
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64() / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();

    // Nucleus: highest-probability tokens first, ascending id on ties.
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let u: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *kept.last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_round_trip() {
        let ids = Vocabulary::encode("red square tl");
        assert!(ids.iter().all(|&i| i < 256));
        assert_eq!(Vocabulary::decode(&ids), "red square tl");
        let mut framed = vec![Vocabulary::BOS];
        framed.extend(&ids);
        framed.push(Vocabulary::EOS);
        assert_eq!(Vocabulary::decode(&framed), "<bos>red square tl<eos>");
    }

    #[test]
    fn special_ids_fill_the_tail_of_the_vocab() {
        assert_eq!(Vocabulary::SIZE, 264);
        let specials = [
            Vocabulary::BOS,
            Vocabulary::EOS,
            Vocabulary::PAD,
            Vocabulary::BOI,
            Vocabulary::EOI,
            Vocabulary::BON,
            Vocabulary::EON,
            Vocabulary::TS,
        ];
        for (k, &s) in specials.iter().enumerate() {
            assert_eq!(s, 256 + k);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let v = Vocabulary::SIZE;
        let logits = Tensor::<f64>::from_vec(vec![3, v], vec![0.0; 3 * v]);
        let loss = ntp_loss(&logits, &[5, 256, 263], &[true, true, true])
            .unwrap()
            .item();
        assert!((loss - (v as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn masked_rows_are_excluded_from_loss() {
        // Row 0 would be a huge loss; masked out it must not contribute.
        let mut data = vec![0.0; 2 * 4];
        data[0] = -100.0; // target 0 of row 0, heavily penalized
        data[4 + 2] = 3.0;
        let logits = Tensor::<f64>::from_vec(vec![2, 4], data);
        let full = ntp_loss(&logits, &[0, 2], &[true, true]).unwrap().item();
        let masked = ntp_loss(&logits, &[0, 2], &[false, true]).unwrap().item();
        assert!(full > masked + 10.0);
        // Hand-computed row-1 loss.
        let z: f64 = (0..4).map(|j| if j == 2 { 3.0f64 } else { 0.0 }.exp()).sum();
        assert!((masked - (z.ln() - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn all_masked_batch_is_an_error() {
        let logits = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]);
        match ntp_loss(&logits, &[0, 1], &[false, false]) {
            Err(HaploError::DegenerateBatch(_)) => {}
            other => panic!("expected degenerate batch, got {other:?}"),
        }
    }

    #[test]
    fn greedy_is_argmax_with_ascending_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [1.0f64, 5.0, 5.0, 2.0];
        for _ in 0..5 {
            assert_eq!(sample_token(&logits, 0.0, 1.0, &mut rng), 1);
        }
    }

    #[test]
    fn tight_nucleus_collapses_to_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.1f64, 4.0, 1.0, 0.0];
        for _ in 0..50 {
            assert_eq!(sample_token(&logits, 1.0, 0.05, &mut rng), 1);
        }
    }

    #[test]
    fn full_nucleus_matches_softmax_frequencies() {
        let logits = [0.0f64, 1.0, 2.0];
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_token(&logits, 1.0, 1.0, &mut rng)] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - exps[i] / z).abs() < 0.01, "token {i}: {freq}");
        }
    }

    #[test]
    fn high_temperature_flattens_the_draw() {
        let logits = [0.0f64, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut low = 0usize;
        for _ in 0..n {
            if sample_token(&logits, 100.0, 1.0, &mut rng) == 0 {
                low += 1;
            }
        }
        let freq = low as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    proptest! {
        /// Nucleus sampling only emits tokens from the smallest prefix of the
        /// probability-sorted vocabulary whose mass reaches top_p.
        #[test]
        fn nucleus_never_leaves_the_kept_set(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..12),
            top_p in 0.05f64..1.0,
            seed in 0u64..1000,
        ) {
            let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let mut allowed = std::collections::HashSet::new();
            let mut mass = 0.0;
            for &i in &order {
                allowed.insert(i);
                mass += probs[i];
                if mass >= top_p { break; }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..32 {
                let tok = sample_token(&logits, 1.0, top_p, &mut rng);
                prop_assert!(allowed.contains(&tok));
            }
        }

        /// Greedy choice is invariant to temperature=0 regardless of scale.
        #[test]
        fn greedy_matches_max_position(
            logits in proptest::collection::vec(-5.0f64..5.0, 1..12),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tok = sample_token(&logits, 0.0, 1.0, &mut rng);
            for (i, &v) in logits.iter().enumerate() {
                prop_assert!(v <= logits[tok] || i == tok);
            }
            prop_assert!(logits[..tok].iter().all(|&v| v < logits[tok]));
        }
    }
}

//! Denoising diffusion on latent patch rows: linear beta schedule, forward
//! noising, MSE epsilon loss, and deterministic DDIM sampling.

use rand::Rng;

use crate::error::HaploError;
use crate::tensor::{Scalar, Tensor};

/// Linear beta schedule. `alpha_bar` has length `t_max + 1` with
/// `alpha_bar[0] = 1`, so stepping to t = 0 returns the clean estimate.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Scalar> {
    pub betas: Vec<T>,
    pub alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_max >= 1);
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(T::one());
        let mut prod = 1.0f64;
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(T::from_f64(beta));
            alpha_bar.push(T::from_f64(prod));
        }
        NoiseSchedule { betas, alpha_bar }
    }

    /// 1000 steps from 1e-4 to 2e-2.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 2e-2)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<(), HaploError> {
        if t < 1 || t > self.t_max() {
            return Err(HaploError::Argument(format!(
                "timestep {} outside 1..={}",
                t,
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// One noised training example with the drawn noise retained as the
/// regression target.
#[derive(Debug, Clone)]
pub struct DiffusionBatch<T: Scalar> {
    pub x0: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for t in 1..=t_max.
pub fn noise_with<T: Scalar>(
    sched: &NoiseSchedule<T>,
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>, HaploError> {
    sched.check_t(t)?;
    assert_eq!(x0.shape(), eps.shape(), "clean/noise shape mismatch");
    let ab = sched.alpha_bar[t].to_f64();
    Ok(x0
        .scale(T::from_f64(ab.sqrt()))
        .add(&eps.scale(T::from_f64((1.0 - ab).sqrt()))))
}

/// Draw unit-Gaussian noise and mix it in at timestep t.
pub fn forward_noise<T: Scalar, R: Rng>(
    sched: &NoiseSchedule<T>,
    x0: &Tensor<T>,
    t: usize,
    rng: &mut R,
) -> Result<DiffusionBatch<T>, HaploError> {
    let eps = Tensor::<T>::randn(x0.shape(), 1.0, rng);
    let x_t = noise_with(sched, x0, t, &eps)?;
    Ok(DiffusionBatch {
        x0: x0.clone(),
        t,
        eps,
        x_t,
    })
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<T: Scalar>(eps_pred: &Tensor<T>, eps: &Tensor<T>) -> Tensor<T> {
    eps_pred.mse(eps)
}

/// Deterministic (eta = 0) DDIM update from t to t_prev < t. With
/// `t_prev = 0` this returns the clean estimate implied by `eps_pred`.
pub fn ddim_step<T: Scalar>(
    sched: &NoiseSchedule<T>,
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    t_prev: usize,
) -> Result<Tensor<T>, HaploError> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(HaploError::Argument(format!(
            "ddim step requires t_prev < t, got {} -> {}",
            t, t_prev
        )));
    }
    let ab_t = sched.alpha_bar[t].to_f64();
    let ab_p = sched.alpha_bar[t_prev].to_f64();
    let x0_hat = x_t
        .sub(&eps_pred.scale(T::from_f64((1.0 - ab_t).sqrt())))
        .scale(T::from_f64(1.0 / ab_t.sqrt()));
    Ok(x0_hat
        .scale(T::from_f64(ab_p.sqrt()))
        .add(&eps_pred.scale(T::from_f64((1.0 - ab_p).sqrt()))))
}

/// Descending denoising timesteps, evenly spaced over 1..=t_max. The final
/// DDIM update goes to 0.
pub fn sample_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= t_max);
    (1..=steps)
        .rev()
        .map(|k| (k * t_max + steps - 1) / steps)
        .collect()
}

/// Run the full DDIM chain from unit-Gaussian noise. `predictor` maps
/// (x_t, t) to predicted noise.
pub fn sample<T: Scalar, R: Rng>(
    sched: &NoiseSchedule<T>,
    shape: Vec<usize>,
    steps: usize,
    rng: &mut R,
    mut predictor: impl FnMut(&Tensor<T>, usize) -> Tensor<T>,
) -> Result<Tensor<T>, HaploError> {
    let ts = sample_timesteps(sched.t_max(), steps);
    let mut x = Tensor::<T>::randn(shape, 1.0, rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps = predictor(&x, t).detach();
        x = ddim_step(sched, &x, &eps, t, t_prev)?.detach();
    }
    Ok(x)
}

/// Sinusoidal embedding of a timestep, [1 x d_t]: sin half then cos half,
/// with geometric frequencies. t = 0 gives all-zero sines, all-one cosines.
pub fn timestep_embedding<T: Scalar>(t: usize, d_t: usize) -> Tensor<T> {
    assert!(d_t >= 2 && d_t % 2 == 0, "timestep embedding dim must be even");
    let half = d_t / 2;
    let mut data = vec![T::zero(); d_t];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        data[i] = T::from_f64(angle.sin());
        data[half + i] = T::from_f64(angle.cos());
    }
    Tensor::from_vec(vec![1, d_t], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// The exact noise that was mixed in, recovered from x0: the one
    /// predictor for which DDIM inversion is exact.
    fn oracle_predictor<'a>(
        sched: &'a NoiseSchedule<f64>,
        x0: &'a Tensor<f64>,
    ) -> impl FnMut(&Tensor<f64>, usize) -> Tensor<f64> + 'a {
        move |x_t, t| {
            let ab = sched.alpha_bar[t];
            x_t.sub(&x0.scale(ab.sqrt())).scale(1.0 / (1.0 - ab).sqrt())
        }
    }

    #[test]
    fn schedule_shapes_and_monotonicity() {
        let s = NoiseSchedule::<f64>::default_linear();
        assert_eq!(s.t_max(), 1000);
        assert_eq!(s.alpha_bar.len(), 1001);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!((s.betas[0] - 1e-4).abs() < 1e-12);
        assert!((s.betas[999] - 2e-2).abs() < 1e-12);
        for t in 1..=1000 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert!(s.alpha_bar[t] > 0.0);
        }
        // Heavy noise by the end of the chain.
        assert!(s.alpha_bar[1000] < 0.01);
    }

    #[test]
    fn stored_noise_reconstructs_exactly() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);
        for t in [1, 17, 500, 1000] {
            let x_t = noise_with(&sched, &x0, t, &eps).unwrap();
            // Single DDIM jump to 0 with the true noise lands on x0.
            let back = ddim_step(&sched, &x_t, &eps, t, 0).unwrap();
            assert!(max_abs_diff(&back.data(), &x0.data()) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn chained_ddim_with_oracle_recovers_clean_input() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let mut x = noise_with(&sched, &x0, 1000, &eps).unwrap();
        let ts = sample_timesteps(1000, 50);
        assert_eq!(ts[0], 1000);
        let mut predictor = oracle_predictor(&sched, &x0);
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            let e = predictor(&x, t);
            x = ddim_step(&sched, &x, &e, t, t_prev).unwrap();
        }
        assert!(max_abs_diff(&x.data(), &x0.data()) < 1e-6);
    }

    #[test]
    fn sample_with_oracle_converges_and_is_deterministic() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::randn(vec![2, 4], 1.0, &mut rng);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(
                &sched,
                vec![2, 4],
                50,
                &mut rng,
                oracle_predictor(&sched, &x0),
            )
            .unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.data(), b.data());
        assert!(max_abs_diff(&a.data(), &x0.data()) < 1e-6);
    }

    #[test]
    fn timestep_bounds_are_enforced() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let x = Tensor::<f64>::from_vec(vec![1, 2], vec![0.0, 0.0]);
        for bad in [0usize, 1001] {
            match noise_with(&sched, &x, bad, &x) {
                Err(HaploError::Argument(_)) => {}
                other => panic!("expected argument error, got {other:?}"),
            }
        }
        match ddim_step(&sched, &x, &x, 10, 10) {
            Err(HaploError::Argument(_)) => {}
            other => panic!("expected argument error, got {other:?}"),
        }
        match ddim_step(&sched, &x, &x, 10, 20) {
            Err(HaploError::Argument(_)) => {}
            other => panic!("expected argument error, got {other:?}"),
        }
    }

    #[test]
    fn timesteps_are_even_descending_and_cover_t_max() {
        let ts = sample_timesteps(1000, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        for w in ts.windows(2) {
            assert_eq!(w[0] - w[1], 20);
        }
        // Non-divisible counts still descend strictly within range.
        let ts = sample_timesteps(1000, 7);
        assert_eq!(ts[0], 1000);
        for w in ts.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(*ts.last().unwrap() >= 1);
        // Degenerate single-step chain.
        assert_eq!(sample_timesteps(1000, 1), vec![1000]);
    }

    #[test]
    fn noising_limits_and_stored_eps_invariant() {
        let sched = NoiseSchedule::<f64>::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);

        // Near-clean limit: t = 1 has beta = 1e-4, so x_t hugs x0.
        let b = forward_noise(&sched, &x0, 1, &mut rng).unwrap();
        assert!(max_abs_diff(&b.x_t.data(), &x0.data()) < 0.1);

        // Heavy-noise limit: x_t is mostly the drawn eps.
        let b = forward_noise(&sched, &x0, 1000, &mut rng).unwrap();
        assert!(max_abs_diff(&b.x_t.data(), &b.eps.data()) < 0.3);

        // The stored eps always reconstructs algebraically.
        for t in [3, 250, 900] {
            let b = forward_noise(&sched, &x0, t, &mut rng).unwrap();
            let ab = sched.alpha_bar[t];
            let rec = b
                .x_t
                .sub(&x0.scale(ab.sqrt()))
                .scale(1.0 / (1.0 - ab).sqrt());
            assert!(max_abs_diff(&rec.data(), &b.eps.data()) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn noised_energy_matches_the_mixing_weights() {
        // E[|x_t|^2 / n] = abar * |x0|^2 / n + (1 - abar) for unit-Gaussian eps.
        let sched = NoiseSchedule::<f64>::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::<f64>::randn(vec![2, 8], 1.0, &mut rng);
        let n = 16.0;
        let x0_energy: f64 = x0.data().iter().map(|v| v * v).sum::<f64>() / n;
        let t = 400;
        let ab = sched.alpha_bar[t];
        let mut mean = 0.0;
        let draws = 1000;
        for _ in 0..draws {
            let b = forward_noise(&sched, &x0, t, &mut rng).unwrap();
            mean += b.x_t.data().iter().map(|v| v * v).sum::<f64>() / n;
        }
        mean /= draws as f64;
        let expect = ab * x0_energy + (1.0 - ab);
        assert!((mean - expect).abs() < 0.15, "mean {mean} expect {expect}");
    }

    #[test]
    fn diffusion_loss_is_elementwise_mse() {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::from_vec(vec![2, 2], vec![0.0, 2.0, 5.0, 4.0]);
        let loss = diffusion_loss(&a, &b).item();
        assert!((loss - (1.0 + 4.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn timestep_embedding_basics() {
        let e0 = timestep_embedding::<f64>(0, 8).data();
        for i in 0..4 {
            assert_eq!(e0[i], 0.0);
            assert_eq!(e0[4 + i], 1.0);
        }
        let e1 = timestep_embedding::<f64>(1, 8);
        let e2 = timestep_embedding::<f64>(2, 8);
        assert_eq!(e1.shape(), vec![1, 8]);
        assert!(max_abs_diff(&e1.data(), &e2.data()) > 1e-3);
        for v in e1.data() {
            assert!(v.abs() <= 1.0 + 1e-12);
        }
        // Lowest frequency is 1: first sine component is sin(t).
        assert!((e1.data()[0] - 1f64.sin()).abs() < 1e-12);
    }
}

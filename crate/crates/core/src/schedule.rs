//! Closed-form diffusion math: noise schedule, forward corruption, direct
//! clean-latent estimation and the dual L1 objective.
//!
//! Timesteps are 1-indexed (`1..=T`). All schedule constants are kept in
//! `f64`; tensor helpers cast the per-sample coefficients to the tensor dtype.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas, endpoints included.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps)
                .map(|i| beta_start + step * i as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Batched forward diffusion. `z0` and `noise` are `[B, C, H, W]`, one
    /// timestep per batch element.
    pub fn forward_diffuse_tensor(
        &self,
        z0: &Tensor,
        noise: &Tensor,
        timesteps: &[usize],
    ) -> Result<Tensor> {
        check_tensor_shapes(z0, noise)?;
        let (signal, sigma) = self.coefficient_tensors(timesteps, z0.dtype(), z0.device())?;
        Ok((z0.broadcast_mul(&signal)? + noise.broadcast_mul(&sigma)?)?)
    }

    /// Batched inverse of [`forward_diffuse_tensor`](Self::forward_diffuse_tensor)
    /// given a noise estimate.
    pub fn direct_latent_estimate_tensor(
        &self,
        z_t: &Tensor,
        noise_hat: &Tensor,
        timesteps: &[usize],
    ) -> Result<Tensor> {
        check_tensor_shapes(z_t, noise_hat)?;
        let (signal, sigma) = self.coefficient_tensors(timesteps, z_t.dtype(), z_t.device())?;
        Ok((z_t - noise_hat.broadcast_mul(&sigma)?)?.broadcast_div(&signal)?)
    }

    pub(crate) fn coefficient_tensors(
        &self,
        timesteps: &[usize],
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        let mut signal = Vec::with_capacity(timesteps.len());
        let mut sigma = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            let (a, s) = self.coefficients(t)?;
            signal.push(a);
            sigma.push(s);
        }
        let shape = (timesteps.len(), 1, 1, 1);
        let signal = Tensor::from_vec(signal, shape, device)?.to_dtype(dtype)?;
        let sigma = Tensor::from_vec(sigma, shape, device)?.to_dtype(dtype)?;
        Ok((signal, sigma))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

fn check_tensor_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentRole {
    CleanLatent,
    NoisyLatent,
    ConditionLatent,
    Noise,
    PredictedNoise,
    EstimatedClean,
}

/// A `channels × height × width` latent array.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: [usize; 3],
    values: Vec<f64>,
    role: LatentRole,
}

impl LatentGrid {
    pub fn new(shape: [usize; 3], values: Vec<f64>, role: LatentRole) -> Result<Self> {
        let len = shape.iter().product::<usize>();
        if values.len() != len {
            return Err(Error::ShapeMismatch {
                expected: vec![len],
                actual: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent grid".into()));
        }
        Ok(Self {
            shape,
            values,
            role,
        })
    }

    pub fn zeros(shape: [usize; 3], role: LatentRole) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.iter().product()],
            role,
        }
    }

    pub fn filled(shape: [usize; 3], value: f64, role: LatentRole) -> Self {
        Self {
            shape,
            values: vec![value; shape.iter().product()],
            role,
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Self {
        let len = shape.iter().product();
        let values = (0..len)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self {
            shape,
            values,
            role: LatentRole::Noise,
        }
    }

    /// Takes a `[C, H, W]` tensor (or `[1, C, H, W]`).
    pub fn from_tensor(tensor: &Tensor, role: LatentRole) -> Result<Self> {
        let tensor = match tensor.rank() {
            4 if tensor.dim(0)? == 1 => tensor.squeeze(0)?,
            _ => tensor.clone(),
        };
        let (c, h, w) = tensor.dims3()?;
        let values = tensor.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new([c, h, w], values, role)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), &self.shape[..], device)?.to_dtype(dtype)?)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> LatentRole {
        self.role
    }

    pub fn with_role(mut self, role: LatentRole) -> Self {
        self.role = role;
        self
    }

    fn check_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                actual: other.shape.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, other: &LatentGrid, role: LatentRole, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
            role,
        }
    }
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * n`
pub fn forward_diffuse(
    z0: &LatentGrid,
    t: usize,
    noise: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    z0.check_same_shape(noise)?;
    let (signal, sigma) = schedule.coefficients(t)?;
    Ok(z0.zip_map(noise, LatentRole::NoisyLatent, |z, n| signal * z + sigma * n))
}

/// `(z_t - sqrt(1 - ab_t) * n_hat) / sqrt(ab_t)`
pub fn direct_latent_estimate(
    z_t: &LatentGrid,
    noise_hat: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.check_same_shape(noise_hat)?;
    let (signal, sigma) = schedule.coefficients(t)?;
    if signal <= 0.0 {
        return Err(Error::InvalidRange(format!("alpha_bar at t={t} is zero")));
    }
    Ok(z_t.zip_map(noise_hat, LatentRole::EstimatedClean, |z, n| {
        (z - sigma * n) / signal
    }))
}

fn mean_abs_diff(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.values.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Mean absolute error between true and predicted noise.
pub fn noise_loss(noise: &LatentGrid, noise_hat: &LatentGrid) -> Result<f64> {
    mean_abs_diff(noise, noise_hat)
}

/// Mean absolute error between the clean latent and its direct estimate.
pub fn latent_loss(z0: &LatentGrid, z0_hat: &LatentGrid) -> Result<f64> {
    mean_abs_diff(z0, z0_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub noise_loss: f64,
    pub latent_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn combined_loss(noise_loss: f64, latent_loss: f64, lambda: f64) -> Result<LossBreakdown> {
    for v in [noise_loss, latent_loss, lambda] {
        if v < 0.0 || v.is_nan() {
            return Err(Error::NegativeLoss(v));
        }
    }
    Ok(LossBreakdown {
        noise_loss,
        latent_loss,
        lambda,
        total: noise_loss + lambda * latent_loss,
    })
}

/// Uniform draw from `{1, ..., timesteps}`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, timesteps: usize) -> usize {
    assert!(timesteps >= 1, "schedule needs at least one timestep");
    rng.random_range(1..=timesteps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64, role: LatentRole) -> LatentGrid {
        LatentGrid::new([1, 1, 1], vec![v], role).unwrap()
    }

    /// Two-step schedule with alpha_bar_2 = 0.25.
    fn quarter_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.5, 0.5).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn constant_half_schedule() {
        assert_eq!(quarter_schedule().alpha_bar(2).unwrap(), 0.25);
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.timesteps(), 1000);
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        // Independent product in log space.
        let mut log_acc = 0.0f64;
        for (i, b) in s.betas().iter().enumerate() {
            log_acc += (1.0 - b).ln();
            let rel = (s.alpha_bars()[i] - log_acc.exp()).abs() / log_acc.exp();
            assert!(rel < 1e-12, "t={} rel={rel}", i + 1);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_scalar() {
        let s = quarter_schedule();
        let z = forward_diffuse(
            &scalar(1.0, LatentRole::CleanLatent),
            2,
            &scalar(0.5, LatentRole::Noise),
            &s,
        )
        .unwrap();
        assert!((z.values()[0] - 0.9330127).abs() < 1e-7);
        assert_eq!(z.role(), LatentRole::NoisyLatent);
    }

    #[test]
    fn forward_diffuse_degenerate_inputs() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = LatentGrid::standard_normal([4, 8, 8], &mut rng).with_role(LatentRole::CleanLatent);
        let n = LatentGrid::standard_normal([4, 8, 8], &mut rng);
        let zeros = LatentGrid::zeros([4, 8, 8], LatentRole::Noise);
        let (a, b) = s.coefficients(300).unwrap();

        let only_signal = forward_diffuse(&z0, 300, &zeros, &s).unwrap();
        for (o, z) in only_signal.values().iter().zip(z0.values()) {
            assert_eq!(*o, a * z);
        }
        let only_noise = forward_diffuse(&zeros, 300, &n, &s).unwrap();
        for (o, z) in only_noise.values().iter().zip(n.values()) {
            assert_eq!(*o, b * z);
        }
    }

    #[test]
    fn direct_estimate_scalar() {
        let s = quarter_schedule();
        let z0 = direct_latent_estimate(
            &scalar(0.9330127, LatentRole::NoisyLatent),
            &scalar(0.5, LatentRole::PredictedNoise),
            2,
            &s,
        )
        .unwrap();
        assert!((z0.values()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn direct_estimate_zero_prediction() {
        let s = NoiseSchedule::default();
        let zt = LatentGrid::filled([2, 2, 2], 0.7, LatentRole::NoisyLatent);
        let zero = LatentGrid::zeros([2, 2, 2], LatentRole::PredictedNoise);
        let est = direct_latent_estimate(&zt, &zero, 50, &s).unwrap();
        let expected = 0.7 / s.alpha_bar(50).unwrap().sqrt();
        assert!(est.values().iter().all(|v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn shape_and_timestep_errors() {
        let s = NoiseSchedule::default();
        let a = LatentGrid::zeros([1, 2, 2], LatentRole::CleanLatent);
        let b = LatentGrid::zeros([1, 2, 3], LatentRole::Noise);
        assert!(matches!(
            forward_diffuse(&a, 1, &b, &s),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            forward_diffuse(&a, 0, &a, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            direct_latent_estimate(&a, &a, 1001, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(noise_loss(&a, &b).is_err());
    }

    #[test]
    fn l1_losses() {
        let n = LatentGrid::new([1, 1, 2], vec![1.0, -1.0], LatentRole::Noise).unwrap();
        let zero = LatentGrid::zeros([1, 1, 2], LatentRole::PredictedNoise);
        assert_eq!(noise_loss(&n, &n).unwrap(), 0.0);
        assert_eq!(noise_loss(&n, &zero).unwrap(), 1.0);
        let ones = LatentGrid::filled([2, 3, 3], 1.0, LatentRole::Noise);
        let zeros = LatentGrid::zeros([2, 3, 3], LatentRole::PredictedNoise);
        assert_eq!(noise_loss(&ones, &zeros).unwrap(), 1.0);

        let twos = LatentGrid::filled([2, 3, 3], 2.0, LatentRole::CleanLatent);
        assert_eq!(latent_loss(&twos, &twos).unwrap(), 0.0);
        assert_eq!(latent_loss(&twos, &zeros).unwrap(), 2.0);
        let z = LatentGrid::new([1, 1, 2], vec![0.0, 4.0], LatentRole::CleanLatent).unwrap();
        assert_eq!(latent_loss(&z, &zero).unwrap(), 2.0);
    }

    #[test]
    fn combined_loss_values() {
        assert!((combined_loss(0.2, 0.3, 1.0).unwrap().total - 0.5).abs() < 1e-15);
        assert_eq!(combined_loss(0.2, 0.3, 0.0).unwrap().total, 0.2);
        assert_eq!(combined_loss(0.0, 0.0, 1.0).unwrap().total, 0.0);
        assert!(matches!(
            combined_loss(-0.1, 0.3, 1.0),
            Err(Error::NegativeLoss(_))
        ));
        assert!(combined_loss(0.1, 0.3, -1.0).is_err());
    }

    #[test]
    fn combined_loss_is_affine_in_lambda() {
        let (ln, ll) = (0.37, 0.81);
        let totals: Vec<f64> = [0.0, 1.0, 2.0]
            .iter()
            .map(|l| combined_loss(ln, ll, *l).unwrap().total)
            .collect();
        assert_eq!(totals[0], ln);
        assert!(((totals[1] - totals[0]) - ll).abs() < 1e-15);
        assert!(((totals[2] - totals[1]) - ll).abs() < 1e-15);
    }

    #[test]
    fn timestep_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_timestep(&mut rng, 1) == 1));

        let draws: Vec<usize> = (0..100_000)
            .map(|_| sample_timestep(&mut rng, 1000))
            .collect();
        assert!(draws.iter().all(|t| (1..=1000).contains(t)));
        let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
        // Uniform{1..1000}: variance (1000^2 - 1) / 12.
        let sigma_mean = ((1000.0f64 * 1000.0 - 1.0) / 12.0 / draws.len() as f64).sqrt();
        assert!((mean - 500.5).abs() < 3.0 * sigma_mean, "mean {mean}");

        // Chi-square over 10 equal-width bins, 9 dof; 0.999 quantile is 27.88.
        let mut bins = [0usize; 10];
        for t in &draws {
            bins[(t - 1) / 100] += 1;
        }
        let expected = draws.len() as f64 / 10.0;
        let chi2: f64 = bins
            .iter()
            .map(|b| (*b as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 27.88, "chi2 {chi2}");

        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| sample_timestep(&mut r, 1000)).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| sample_timestep(&mut r, 1000)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_routes_match_grid_routes() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = LatentGrid::standard_normal([2, 3, 3], &mut rng).with_role(LatentRole::CleanLatent);
        let n = LatentGrid::standard_normal([2, 3, 3], &mut rng);
        let dev = Device::Cpu;
        let zt_t = s
            .forward_diffuse_tensor(
                &z0.to_tensor(DType::F64, &dev).unwrap().unsqueeze(0).unwrap(),
                &n.to_tensor(DType::F64, &dev).unwrap().unsqueeze(0).unwrap(),
                &[123],
            )
            .unwrap();
        let zt = forward_diffuse(&z0, 123, &n, &s).unwrap();
        let zt_from_tensor = LatentGrid::from_tensor(&zt_t, LatentRole::NoisyLatent).unwrap();
        for (a, b) in zt.values().iter().zip(zt_from_tensor.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = s
            .direct_latent_estimate_tensor(
                &zt_t,
                &n.to_tensor(DType::F64, &dev).unwrap().unsqueeze(0).unwrap(),
                &[123],
            )
            .unwrap();
        let back = LatentGrid::from_tensor(&back, LatentRole::EstimatedClean).unwrap();
        for (a, b) in back.values().iter().zip(z0.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_identity(seed in any::<u64>(), t in 1usize..=1000) {
            let s = NoiseSchedule::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = LatentGrid::standard_normal([4, 8, 8], &mut rng).with_role(LatentRole::CleanLatent);
            let n = LatentGrid::standard_normal([4, 8, 8], &mut rng);
            let zt = forward_diffuse(&z0, t, &n, &s).unwrap();
            let back = direct_latent_estimate(&zt, &n, t, &s).unwrap();
            let scale = z0.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, b) in back.values().iter().zip(z0.values()) {
                prop_assert!((a - b).abs() <= 1e-5 * scale.max(1e-12));
            }
        }

        #[test]
        fn noise_loss_zero_iff_equal(a in proptest::collection::vec(-5.0f64..5.0, 8), b in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let ga = LatentGrid::new([2, 2, 2], a.clone(), LatentRole::Noise).unwrap();
            let gb = LatentGrid::new([2, 2, 2], b.clone(), LatentRole::PredictedNoise).unwrap();
            let l = noise_loss(&ga, &gb).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
            prop_assert_eq!(noise_loss(&ga, &ga).unwrap(), 0.0);
        }
    }
}

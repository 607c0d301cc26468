//! Analytic noise predictors with closed-form posteriors.

use ndarray::Array3;

use super::backend::{Codec, GuidanceBackend, IdentityCodec, NoisePredictor};
use super::conditions::ConditionSet;
use super::schedule::NoiseSchedule;
use crate::render::CameraPose;
use crate::{Error, Result};

/// Optimal predictor for data distributed as `N(mu, spread^2 I)`:
/// `eps = sqrt(1 - a) (z - sqrt(a) mu) / (a spread^2 + 1 - a)`.
/// With `spread = 0` all mass sits at `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Array3<f64>,
    pub spread: f64,
}

impl GaussianPosterior {
    pub fn new(mean: Array3<f64>, spread: f64) -> Self {
        Self { mean, spread }
    }

    pub fn predict(&self, noisy: &Array3<f64>, alpha_bar: f64) -> Result<Array3<f64>> {
        posterior_noise(&self.mean, self.spread, noisy, alpha_bar)
    }
}

fn posterior_noise(mean: &Array3<f64>, spread: f64, noisy: &Array3<f64>, alpha_bar: f64) -> Result<Array3<f64>> {
    if mean.shape() != noisy.shape() {
        return Err(Error::ShapeMismatch(format!(
            "oracle mean {:?} vs input {:?}",
            mean.shape(),
            noisy.shape()
        )));
    }
    let a = alpha_bar;
    let scale = (1.0 - a).sqrt() / (a * spread * spread + 1.0 - a);
    let sa = a.sqrt();
    let mut out = noisy.clone();
    out.zip_mut_with(mean, |z, m| *z = scale * (*z - sa * m));
    Ok(out)
}

impl NoisePredictor for GaussianPosterior {
    fn predict(&mut self, noisy: &Array3<f64>, _t: usize, alpha_bar: f64, _cond: &ConditionSet, _scale: f64) -> Result<Array3<f64>> {
        GaussianPosterior::predict(self, noisy, alpha_bar)
    }
}

/// A complete backend around a [`GaussianPosterior`] with no condition
/// requirements.
pub struct AnalyticOracle {
    name: String,
    schedule: NoiseSchedule,
    posterior: GaussianPosterior,
}

impl AnalyticOracle {
    pub fn new(schedule: NoiseSchedule, mean: Array3<f64>, spread: f64) -> Self {
        Self {
            name: "analytic-oracle".into(),
            schedule,
            posterior: GaussianPosterior::new(mean, spread),
        }
    }

    pub fn posterior(&self) -> &GaussianPosterior {
        &self.posterior
    }
}

impl GuidanceBackend for AnalyticOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn codec(&self) -> &dyn Codec {
        &IdentityCodec
    }

    fn predict_noise(&mut self, noisy: &Array3<f64>, t: usize, _cond: &ConditionSet) -> Result<Array3<f64>> {
        self.schedule.check_step(t)?;
        self.posterior.predict(noisy, self.schedule.alpha_bar(t))
    }
}

/// Renders a target view for an absolute camera pose.
pub type TargetRenderer = Box<dyn FnMut(&CameraPose) -> Result<Array3<f64>>>;

/// Point-mass predictor whose mean is a target render at the queried pose.
/// The pose is recovered from the condition's camera delta relative to
/// `reference`.
pub struct PoseTargetOracle {
    reference: CameraPose,
    spread: f64,
    target: TargetRenderer,
}

impl PoseTargetOracle {
    pub fn new(reference: CameraPose, spread: f64, target: TargetRenderer) -> Self {
        Self {
            reference,
            spread,
            target,
        }
    }
}

impl NoisePredictor for PoseTargetOracle {
    fn predict(&mut self, noisy: &Array3<f64>, _t: usize, alpha_bar: f64, cond: &ConditionSet, _scale: f64) -> Result<Array3<f64>> {
        let delta = cond.camera_delta.ok_or(Error::MissingCondition {
            backend: "pose-target-oracle".into(),
            condition: "camera_delta",
        })?;
        let pose = CameraPose {
            azimuth_deg: (self.reference.azimuth_deg + delta.azimuth_deg).rem_euclid(360.0),
            elevation_deg: self.reference.elevation_deg + delta.elevation_deg,
            radius: self.reference.radius + delta.radius,
            ..self.reference
        };
        let mean = (self.target)(&pose)?;
        posterior_noise(&mean, self.spread, noisy, alpha_bar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::schedule::ScheduleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
    }

    fn randn(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn point_mass_recovers_injected_noise() {
        let s = schedule();
        let mu = randn(1, (4, 4, 3)).mapv(|v| 0.5 + 0.1 * v);
        let mut oracle = AnalyticOracle::new(s.clone(), mu.clone(), 0.0);
        for t in [1, 20, 500, 980, 1000] {
            let eps = randn(t as u64, (4, 4, 3));
            let z = s.add_noise(&mu, t, &eps).unwrap();
            let pred = oracle.predict_noise(&z, t, &ConditionSet::default()).unwrap();
            let err = (&pred - &eps).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-9 * (1.0 / (1.0 - s.alpha_bar(t))).sqrt().max(1.0), "t={t}: {err}");
        }
    }

    /// Log density of the noisy marginal `N(sqrt(a) mu, (a s^2 + 1 - a) I)`
    /// at a single coordinate, used for a numerical score.
    fn log_marginal(z: f64, mu: f64, s: f64, a: f64) -> f64 {
        let var = a * s * s + 1.0 - a;
        -0.5 * (z - a.sqrt() * mu).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
    }

    #[test]
    fn gaussian_matches_numerical_score() {
        let s = schedule();
        let mu = randn(2, (3, 3, 3)).mapv(|v| 0.5 + 0.2 * v);
        let z = randn(3, (3, 3, 3));
        for spread in [0.05, 0.3, 1.0] {
            let post = GaussianPosterior::new(mu.clone(), spread);
            for t in [10, 100, 250, 400, 550, 700, 850, 999] {
                let a = s.alpha_bar(t);
                let pred = post.predict(&z, a).unwrap();
                let h = 1e-5;
                for ((idx, &zi), &p) in z.indexed_iter().zip(pred.iter()) {
                    let m = mu[idx];
                    let score = (log_marginal(zi + h, m, spread, a) - log_marginal(zi - h, m, spread, a)) / (2.0 * h);
                    let expected = -(1.0 - a).sqrt() * score;
                    assert!((p - expected).abs() <= 1e-3 * expected.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn oracle_rejects_shape_mismatch_and_bad_step() {
        let mut oracle = AnalyticOracle::new(schedule(), Array3::zeros((2, 2, 3)), 0.1);
        let c = ConditionSet::default();
        assert!(oracle.predict_noise(&Array3::zeros((2, 3, 3)), 10, &c).is_err());
        assert!(oracle.predict_noise(&Array3::zeros((2, 2, 3)), 0, &c).is_err());
    }

    #[test]
    fn pose_target_uses_reference_plus_delta() {
        use crate::guidance::conditions::CameraDelta;
        let reference = CameraPose::new(350.0, 5.0, 2.0, 40.0);
        let seen = std::rc::Rc::new(std::cell::Cell::new(0.0));
        let seen_in = seen.clone();
        let mut oracle = PoseTargetOracle::new(
            reference,
            0.0,
            Box::new(move |pose: &CameraPose| {
                seen_in.set(pose.azimuth_deg);
                Ok(Array3::zeros((1, 1, 3)))
            }),
        );
        let cond = ConditionSet {
            camera_delta: Some(CameraDelta { azimuth_deg: 20.0, elevation_deg: 0.0, radius: 0.0 }),
            ..Default::default()
        };
        oracle.predict(&Array3::zeros((1, 1, 3)), 5, 0.9, &cond, 1.0).unwrap();
        assert!((seen.get() - 10.0).abs() < 1e-12);
        assert!(oracle.predict(&Array3::zeros((1, 1, 3)), 5, 0.9, &ConditionSet::default(), 1.0).is_err());
    }
}

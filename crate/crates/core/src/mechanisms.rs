//! Noise calibration and sampling.
//!
//! Neighboring datasets differ by the removal of one row while the global
//! normalizer `I` stays fixed. The regularizer then cancels between
//! neighbors and the gradient difference is exactly one sample's data term,
//! which gives the closed forms below.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{softmax_residuals, AgentData, ParamMatrix, ProblemDims};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismKind {
    /// Laplace noise inserted into the subproblem objective.
    LaplaceObjective,
    /// Gaussian noise added to the subproblem solution (baseline).
    GaussianOutput,
    None,
}

impl MechanismKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismKind::LaplaceObjective => "laplace",
            MechanismKind::GaussianOutput => "gaussian",
            MechanismKind::None => "none",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" | "laplaceobjective" | "laplace_objective" => {
                Ok(MechanismKind::LaplaceObjective)
            }
            "gaussian" | "gaussianoutput" | "gaussian_output" => Ok(MechanismKind::GaussianOutput),
            "none" => Ok(MechanismKind::None),
            other => Err(Error::config(
                "mechanism",
                format!("unknown mechanism `{other}` (expected laplace, gaussian or none)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyConfig {
    /// Per-iteration budget.
    pub eps_bar: f64,
    pub mechanism: MechanismKind,
    /// Only used by [`MechanismKind::GaussianOutput`].
    pub delta_bar: f64,
    /// Multiplier on the Gaussian baseline's standard deviation.
    pub sigma_scale: f64,
    /// The Gaussian baseline's standard deviation decays like `t^-sigma_decay`.
    pub sigma_decay: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            eps_bar: 1.0,
            mechanism: MechanismKind::LaplaceObjective,
            delta_bar: 1e-6,
            sigma_scale: 1.0,
            sigma_decay: 0.25,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_bar > 0.0 && self.eps_bar.is_finite()) {
            return Err(Error::config("eps_bar", "must be a finite value > 0"));
        }
        if self.mechanism == MechanismKind::GaussianOutput
            && !(self.delta_bar > 0.0 && self.delta_bar < 1.0)
        {
            return Err(Error::config("delta_bar", "must lie in (0, 1)"));
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::config("sigma_scale", "must be a finite value > 0"));
        }
        if !(self.sigma_decay >= 0.0 && self.sigma_decay.is_finite()) {
            return Err(Error::config("sigma_decay", "must be a finite value >= 0"));
        }
        Ok(())
    }

    /// Standard deviation of the Gaussian baseline at iteration `t >= 1`:
    /// `sigma_scale * l2_sens * sqrt(2 ln(1.25/delta)) / eps * t^-decay`.
    ///
    /// This follows the classical Gaussian-mechanism calibration with a
    /// polynomially decreasing schedule; it approximates, and does not
    /// reproduce, the published baseline's variance schedule.
    pub fn gaussian_sigma(&self, l2_sensitivity: f64, t: usize) -> f64 {
        self.sigma_scale * l2_sensitivity * (2.0 * (1.25 / self.delta_bar).ln()).sqrt()
            / self.eps_bar
            * (t.max(1) as f64).powf(-self.sigma_decay)
    }
}

/// Result of a sensitivity evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub value: f64,
    /// Row whose removal attains the maximum; `None` when the agent holds no
    /// data, in which case `value` is zero.
    pub maximizer: Option<usize>,
}

impl Sensitivity {
    pub fn is_empty_data(&self) -> bool {
        self.maximizer.is_none()
    }
}

fn per_sample_max(
    z: &ParamMatrix,
    data: &AgentData,
    dims: &ProblemDims,
    term: impl Fn(ndarray::ArrayView1<'_, f64>, ndarray::ArrayView1<'_, f64>) -> f64,
) -> Result<Sensitivity> {
    z.ensure_shape(dims.param_shape())?;
    if data.num_features() != dims.features || data.num_classes() != dims.classes {
        return Err(Error::shape(
            format!("{}x{} data", dims.features, dims.classes),
            format!("{}x{} data", data.num_features(), data.num_classes()),
        ));
    }
    if data.is_empty() {
        log::warn!("sensitivity requested for an agent without data; returning 0");
        return Ok(Sensitivity {
            value: 0.0,
            maximizer: None,
        });
    }
    let residuals = softmax_residuals(z, data);
    let features = data.features();
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, (x, r)) in features
        .rows()
        .into_iter()
        .zip(residuals.rows())
        .enumerate()
    {
        let v = term(x, r);
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(Sensitivity {
        value: best.1 / dims.samples as f64,
        maximizer: Some(best.0),
    })
}

/// L1 sensitivity of the local gradient at `z`:
/// `max_i sum_{j,k} |x_ij (h_k(z; x_i) - y_ik)| / I`.
///
/// The double sum factorizes into `(sum_j |x_ij|) (sum_k |h_k - y_ik|)`.
pub fn l1_sensitivity(
    z: &ParamMatrix,
    data: &AgentData,
    dims: &ProblemDims,
) -> Result<Sensitivity> {
    per_sample_max(z, data, dims, |x, r| {
        x.iter().map(|v| v.abs()).sum::<f64>() * r.iter().map(|v| v.abs()).sum::<f64>()
    })
}

/// L2 analogue of [`l1_sensitivity`], used to calibrate the Gaussian baseline.
pub fn l2_sensitivity(
    z: &ParamMatrix,
    data: &AgentData,
    dims: &ProblemDims,
) -> Result<Sensitivity> {
    per_sample_max(z, data, dims, |x, r| {
        (x.iter().map(|v| v * v).sum::<f64>() * r.iter().map(|v| v * v).sum::<f64>()).sqrt()
    })
}

/// One Laplace(0, scale) draw by inversion.
pub fn laplace_draw(scale: f64, rng: &mut RngStream) -> f64 {
    let v = rng.open_unit() - 0.5;
    -scale * v.signum() * (1.0 - 2.0 * v.abs()).ln()
}

/// I.i.d. Laplace noise with scale `delta_bar_t / eps_bar` per coordinate.
/// The density `exp(-eps ||xi||_1 / Delta)` factorizes over coordinates.
pub fn sample_laplace_noise(
    shape: (usize, usize),
    delta_bar_t: f64,
    eps_bar: f64,
    rng: &mut RngStream,
) -> Result<ParamMatrix> {
    if !(eps_bar > 0.0 && eps_bar.is_finite()) {
        return Err(Error::invalid(format!(
            "eps_bar must be > 0, got {eps_bar}"
        )));
    }
    if !(delta_bar_t >= 0.0 && delta_bar_t.is_finite()) {
        return Err(Error::invalid(format!(
            "sensitivity must be finite and >= 0, got {delta_bar_t}"
        )));
    }
    if delta_bar_t == 0.0 {
        return Ok(ParamMatrix::zeros(shape.0, shape.1));
    }
    let scale = delta_bar_t / eps_bar;
    Ok(ParamMatrix::from_fn(shape.0, shape.1, |_| {
        laplace_draw(scale, rng)
    }))
}

/// I.i.d. `N(0, sigma^2)` noise.
pub fn sample_gaussian_noise(
    shape: (usize, usize),
    sigma: f64,
    rng: &mut RngStream,
) -> Result<ParamMatrix> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(ParamMatrix::zeros(shape.0, shape.1));
    }
    Ok(ParamMatrix::from_fn(shape.0, shape.1, |_| {
        let n: f64 = StandardNormal.sample(rng);
        sigma * n
    }))
}

/// Mean absolute noise entry over all agents: `sum |xi_pjk| / (P J K)`.
pub fn avg_noise_magnitude(noises: &[ParamMatrix]) -> Result<f64> {
    let first = noises
        .first()
        .ok_or_else(|| Error::invalid("average noise magnitude of an empty list"))?;
    for n in noises {
        n.ensure_same_shape(first)?;
    }
    let count = noises.len() * first.len();
    if count == 0 {
        return Ok(0.0);
    }
    Ok(noises.iter().map(ParamMatrix::l1_norm).sum::<f64>() / count as f64)
}

/// Basic sequential composition over `iterations` rounds.
pub fn compose_epsilon(eps_bar: f64, iterations: usize) -> f64 {
    eps_bar * iterations as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dims(data: &AgentData, samples: usize) -> ProblemDims {
        ProblemDims {
            agents: 1,
            features: data.num_features(),
            classes: data.num_classes(),
            samples,
            beta: 0.1,
        }
    }

    #[test]
    fn single_sample_sensitivity() {
        let data = AgentData::from_class_indices(array![[0.5, -2.0]], &[1], 3).unwrap();
        let d = dims(&data, 4);
        let z = ParamMatrix::from_vec(2, 3, vec![0.1, 0.2, -0.3, 0.0, 0.4, 0.1]).unwrap();
        let h = crate::model::softmax_probs(&z, data.features().row(0)).unwrap();
        let mut expected = 0.0;
        for j in 0..2 {
            for k in 0..3 {
                let y = if k == 1 { 1.0 } else { 0.0 };
                expected += (data.features()[[0, j]] * (h[k] - y) / 4.0).abs();
            }
        }
        let s = l1_sensitivity(&z, &data, &d).unwrap();
        assert!((s.value - expected).abs() <= 1e-15 * expected);
        assert_eq!(s.maximizer, Some(0));
    }

    #[test]
    fn zero_features_zero_sensitivity() {
        let data =
            AgentData::from_class_indices(array![[0.0, 0.0], [0.0, 0.0]], &[0, 1], 2).unwrap();
        let d = dims(&data, 2);
        let z = ParamMatrix::filled(2, 2, 0.7);
        assert_eq!(l1_sensitivity(&z, &data, &d).unwrap().value, 0.0);
        assert_eq!(l2_sensitivity(&z, &data, &d).unwrap().value, 0.0);
    }

    #[test]
    fn empty_data_flags() {
        let data = AgentData::empty(2, 2);
        let d = dims(&data, 3);
        let s = l1_sensitivity(&ParamMatrix::zeros(2, 2), &data, &d).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.is_empty_data());
    }

    #[test]
    fn l2_single_coordinate() {
        // J = 1, K = 2 gives two equal-magnitude coordinates; with x = 0 on
        // one feature only the other contributes.
        let data = AgentData::from_class_indices(array![[3.0]], &[0], 2).unwrap();
        let d = dims(&data, 1);
        let s2 = l2_sensitivity(&ParamMatrix::zeros(1, 2), &data, &d).unwrap();
        // gradient term = 3 * (0.5 - 1, 0.5 - 0) = (-1.5, 1.5)
        assert!((s2.value - (2.0f64 * 1.5 * 1.5).sqrt()).abs() < 1e-15);
        let s1 = l1_sensitivity(&ParamMatrix::zeros(1, 2), &data, &d).unwrap();
        assert!((s1.value - 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_noise_is_zero() {
        let mut rng = RngStream::for_agent(1, 0, 1);
        assert_eq!(
            sample_laplace_noise((2, 3), 0.0, 1.0, &mut rng).unwrap(),
            ParamMatrix::zeros(2, 3)
        );
        assert_eq!(
            sample_gaussian_noise((2, 3), 0.0, &mut rng).unwrap(),
            ParamMatrix::zeros(2, 3)
        );
    }

    #[test]
    fn noise_argument_errors() {
        let mut rng = RngStream::for_agent(1, 0, 1);
        assert!(sample_laplace_noise((1, 1), -1.0, 1.0, &mut rng).is_err());
        assert!(sample_laplace_noise((1, 1), 1.0, 0.0, &mut rng).is_err());
        assert!(sample_gaussian_noise((1, 1), -0.1, &mut rng).is_err());
    }

    #[test]
    fn noise_magnitude_cases() {
        assert_eq!(
            avg_noise_magnitude(&[ParamMatrix::zeros(2, 2)]).unwrap(),
            0.0
        );
        assert_eq!(
            avg_noise_magnitude(&[
                ParamMatrix::filled(2, 2, 1.0),
                ParamMatrix::filled(2, 2, -1.0)
            ])
            .unwrap(),
            1.0
        );
        assert!(avg_noise_magnitude(&[]).is_err());
        assert!(
            avg_noise_magnitude(&[ParamMatrix::zeros(2, 2), ParamMatrix::zeros(1, 2)]).is_err()
        );
    }

    #[test]
    fn composition() {
        assert_eq!(compose_epsilon(1.0, 0), 0.0);
        assert_eq!(compose_epsilon(1.0, 1), 1.0);
        assert!((compose_epsilon(0.05, 20_000) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn privacy_validation() {
        let mut cfg = PrivacyConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.eps_bar = -1.0;
        assert!(cfg.validate().is_err());
        cfg.eps_bar = 1.0;
        cfg.mechanism = MechanismKind::GaussianOutput;
        cfg.delta_bar = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gaussian_sigma_decays() {
        let cfg = PrivacyConfig {
            mechanism: MechanismKind::GaussianOutput,
            ..PrivacyConfig::default()
        };
        let s1 = cfg.gaussian_sigma(1.0, 1);
        assert!((s1 - (2.0 * (1.25e6f64).ln()).sqrt()).abs() < 1e-12);
        assert!((cfg.gaussian_sigma(1.0, 16) - s1 / 2.0).abs() < 1e-12);
    }
}

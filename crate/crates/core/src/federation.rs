//! Round-synchronous simulation of the server/agent protocol.
//!
//! Each round runs the server's `w` step, then every agent's local step
//! (in parallel), then the dual step. Agent noise comes from the
//! `(seed, agent, iteration)` stream, so results do not depend on how the
//! agent steps are scheduled.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::admm::{
    delta_schedule, dual_update, eta_schedule, rho_schedule, w_update, z_update_outp,
    z_update_prox, z_update_trust, FeasibleBox, Schedules, Subproblem,
};
use crate::error::{Error, Result};
use crate::mechanisms::{
    avg_noise_magnitude, l1_sensitivity, l2_sensitivity, sample_laplace_noise, MechanismKind,
    PrivacyConfig,
};
use crate::model::{
    global_objective, local_gradient, testing_error, AgentData, ParamMatrix, ProblemDims,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Proximal local step with Laplace objective perturbation.
    ObjP,
    /// Trust-region local step with Laplace objective perturbation.
    ObjT,
    /// Proximal local step with Gaussian output perturbation.
    OutP,
    NonPrivateProx,
    NonPrivateTrust,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::ObjP,
        Algorithm::ObjT,
        Algorithm::OutP,
        Algorithm::NonPrivateProx,
        Algorithm::NonPrivateTrust,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::ObjP => "ObjP",
            Algorithm::ObjT => "ObjT",
            Algorithm::OutP => "OutP",
            Algorithm::NonPrivateProx => "NonPrivate-Prox",
            Algorithm::NonPrivateTrust => "NonPrivate-Trust",
        }
    }

    /// The mechanism an algorithm uses unless configured otherwise.
    pub fn default_mechanism(self) -> MechanismKind {
        match self {
            Algorithm::ObjP | Algorithm::ObjT => MechanismKind::LaplaceObjective,
            Algorithm::OutP => MechanismKind::GaussianOutput,
            Algorithm::NonPrivateProx | Algorithm::NonPrivateTrust => MechanismKind::None,
        }
    }

    pub fn uses_trust_region(self) -> bool {
        matches!(self, Algorithm::ObjT | Algorithm::NonPrivateTrust)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "objp" => Ok(Algorithm::ObjP),
            "objt" => Ok(Algorithm::ObjT),
            "outp" => Ok(Algorithm::OutP),
            "nonprivateprox" => Ok(Algorithm::NonPrivateProx),
            "nonprivatetrust" => Ok(Algorithm::NonPrivateTrust),
            _ => Err(Error::config(
                "algorithm",
                format!(
                    "unknown algorithm `{s}` (expected one of ObjP, ObjT, OutP, \
                     NonPrivate-Prox, NonPrivate-Trust)"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Number of rounds `T`.
    pub iterations: usize,
    pub privacy: PrivacyConfig,
    pub schedules: Schedules,
    pub feasible: FeasibleBox,
    pub beta: f64,
    /// Agent count used when partitioning pooled data.
    pub agents: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Evaluating `F(z)` costs one pass over all data per logged round.
    pub log_objective: bool,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            iterations: 20_000,
            privacy: PrivacyConfig {
                mechanism: algorithm.default_mechanism(),
                ..PrivacyConfig::default()
            },
            schedules: Schedules::default(),
            feasible: FeasibleBox::default(),
            beta: 1e-6,
            agents: 10,
            seed: 0,
            log_every: 100,
            log_objective: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.privacy.validate()?;
        self.schedules.validate()?;
        self.feasible.validate()?;
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        if self.agents == 0 {
            return Err(Error::config("P", "must be >= 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be a finite value >= 0"));
        }
        let mech = self.privacy.mechanism;
        let compatible = match self.algorithm {
            Algorithm::ObjP | Algorithm::ObjT => {
                matches!(mech, MechanismKind::LaplaceObjective | MechanismKind::None)
            }
            Algorithm::OutP => matches!(mech, MechanismKind::GaussianOutput | MechanismKind::None),
            Algorithm::NonPrivateProx | Algorithm::NonPrivateTrust => mech == MechanismKind::None,
        };
        if !compatible {
            return Err(Error::config(
                "mechanism",
                format!("`{mech}` cannot be used with {}", self.algorithm),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub data: AgentData,
    pub z: ParamMatrix,
    pub lambda: ParamMatrix,
}

/// Metrics logged after round `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub t: usize,
    /// Testing error of `w^{t+1}`; NaN without a test set.
    pub test_error: f64,
    pub avg_noise_mag: f64,
    /// `sum_p ||w^{t+1} - z_p^{t+1}||_1`.
    pub consensus_violation: f64,
    /// `F(z^{t+1})`; NaN when objective logging is off.
    pub objective: f64,
    pub rho_t: f64,
    /// `eta_t` for proximal algorithms, `delta_t` for trust-region ones.
    pub prox_t: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub dims: ProblemDims,
    /// Last server iterate `w^{T+1}` (zero when `T = 0`).
    pub w: ParamMatrix,
    pub agents: Vec<AgentState>,
    /// `(1/T) sum_t w^{t+1}`.
    pub w_avg: ParamMatrix,
    /// `(1/T) sum_t z_p^t`, per agent.
    pub z_avg: Vec<ParamMatrix>,
}

impl RunOutcome {
    pub fn z_list(&self) -> Vec<ParamMatrix> {
        self.agents.iter().map(|a| a.z.clone()).collect()
    }

    pub fn lambda_list(&self) -> Vec<ParamMatrix> {
        self.agents.iter().map(|a| a.lambda.clone()).collect()
    }

    pub fn data(&self) -> Vec<AgentData> {
        self.agents.iter().map(|a| a.data.clone()).collect()
    }
}

/// Shuffles rows with `rng` and deals them into `agents` contiguous blocks;
/// the first `I mod P` agents receive one extra row.
pub fn partition_homogeneous(
    data: &AgentData,
    agents: usize,
    rng: &mut RngStream,
) -> Result<Vec<AgentData>> {
    if agents == 0 {
        return Err(Error::invalid("cannot partition across zero agents"));
    }
    let rows = data.rows();
    if agents > rows {
        return Err(Error::invalid(format!(
            "cannot give {agents} agents at least one of {rows} rows"
        )));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    let (base, extra) = (rows / agents, rows % agents);
    let mut start = 0;
    Ok((0..agents)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let block = data.select_rows(&order[start..start + len]);
            start += len;
            block
        })
        .collect())
}

/// `sum_{p,j,k} |w_jk - z_pjk|`.
pub fn consensus_violation(w: &ParamMatrix, z_list: &[ParamMatrix]) -> Result<f64> {
    z_list.iter().map(|z| w.l1_distance(z)).sum()
}

struct LocalStep {
    z: ParamMatrix,
    noise: ParamMatrix,
}

fn local_step(
    config: &RunConfig,
    dims: &ProblemDims,
    state: &AgentState,
    w_next: &ParamMatrix,
    t: usize,
    rho: f64,
) -> Result<LocalStep> {
    let grad = local_gradient(&state.z, &state.data, dims)?;
    let sub = Subproblem {
        z_prev: &state.z,
        w_next,
        lambda: &state.lambda,
        grad: &grad,
        rho,
    };
    let shape = dims.param_shape();
    let a = config.schedules.prox_scale;
    let privacy = &config.privacy;
    let mut rng = RngStream::for_agent(config.seed, state.id, t);

    let laplace = |rng: &mut RngStream| -> Result<ParamMatrix> {
        if privacy.mechanism == MechanismKind::LaplaceObjective {
            let sens = l1_sensitivity(&state.z, &state.data, dims)?;
            sample_laplace_noise(shape, sens.value, privacy.eps_bar, rng)
        } else {
            Ok(ParamMatrix::zeros(shape.0, shape.1))
        }
    };

    match config.algorithm {
        Algorithm::ObjP | Algorithm::NonPrivateProx => {
            let xi = laplace(&mut rng)?;
            let z = z_update_prox(&sub, &xi, eta_schedule(t, a), &config.feasible)?;
            Ok(LocalStep { z, noise: xi })
        }
        Algorithm::ObjT | Algorithm::NonPrivateTrust => {
            let xi = laplace(&mut rng)?;
            let z = z_update_trust(&sub, &xi, delta_schedule(t, a), &config.feasible)?;
            Ok(LocalStep { z, noise: xi })
        }
        Algorithm::OutP => {
            let sigma = if privacy.mechanism == MechanismKind::GaussianOutput {
                let sens = l2_sensitivity(&state.z, &state.data, dims)?;
                privacy.gaussian_sigma(sens.value, t)
            } else {
                0.0
            };
            let (z, noise) =
                z_update_outp(&sub, eta_schedule(t, a), sigma, &config.feasible, &mut rng)?;
            Ok(LocalStep { z, noise })
        }
    }
}

/// Runs `T` rounds from `z = lambda = 0` and logs metrics every
/// `log_every` rounds and after the last one.
pub fn run_experiment(
    config: &RunConfig,
    agent_data: Vec<AgentData>,
    test: Option<&AgentData>,
) -> Result<RunOutcome> {
    config.validate()?;
    let dims = ProblemDims::from_agents(&agent_data, config.beta)?;
    let (j, k) = dims.param_shape();
    if let Some(test) = test {
        if test.num_features() != j || test.num_classes() != k {
            return Err(Error::shape(
                format!("{j}x{k} test data"),
                format!("{}x{} test data", test.num_features(), test.num_classes()),
            ));
        }
    }

    let mut agents: Vec<AgentState> = agent_data
        .into_iter()
        .enumerate()
        .map(|(id, data)| AgentState {
            id,
            data,
            z: ParamMatrix::zeros(j, k),
            lambda: ParamMatrix::zeros(j, k),
        })
        .collect();
    let mut w = ParamMatrix::zeros(j, k);
    let mut w_sum = ndarray::Array2::<f64>::zeros((j, k));
    let mut z_sums = vec![ndarray::Array2::<f64>::zeros((j, k)); agents.len()];
    let mut records = Vec::new();
    let eps = config.privacy.eps_bar;
    let a = config.schedules.prox_scale;

    for t in 1..=config.iterations {
        let rho = rho_schedule(t, eps, &config.schedules.rho);
        let z_list: Vec<ParamMatrix> = agents.iter().map(|s| s.z.clone()).collect();
        let lambda_list: Vec<ParamMatrix> = agents.iter().map(|s| s.lambda.clone()).collect();
        w = w_update(&z_list, &lambda_list, rho)?;
        if !w.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                agent: 0,
                what: "server iterate w",
            });
        }
        w_sum += w.as_array();
        for (sum, z) in z_sums.iter_mut().zip(&z_list) {
            *sum += z.as_array();
        }

        let steps: Vec<LocalStep> = agents
            .par_iter()
            .map(|state| local_step(config, &dims, state, &w, t, rho))
            .collect::<Result<_>>()?;

        let mut noises = Vec::with_capacity(steps.len());
        for (state, step) in agents.iter_mut().zip(steps) {
            if !step.z.is_finite() {
                return Err(Error::NonFinite {
                    iteration: t,
                    agent: state.id,
                    what: "local iterate z",
                });
            }
            state.lambda = dual_update(&state.lambda, &w, &step.z, rho)?;
            if !state.lambda.is_finite() {
                return Err(Error::NonFinite {
                    iteration: t,
                    agent: state.id,
                    what: "dual variable lambda",
                });
            }
            state.z = step.z;
            noises.push(step.noise);
        }

        if t % config.log_every == 0 || t == config.iterations {
            let z_now: Vec<ParamMatrix> = agents.iter().map(|s| s.z.clone()).collect();
            let objective = if config.log_objective {
                let data: Vec<AgentData> = agents.iter().map(|s| s.data.clone()).collect();
                global_objective(&z_now, &data, &dims)?
            } else {
                f64::NAN
            };
            let prox_t = if config.algorithm.uses_trust_region() {
                delta_schedule(t, a)
            } else {
                eta_schedule(t, a)
            };
            records.push(MetricsRecord {
                t,
                test_error: match test {
                    Some(test) => testing_error(&w, test)?,
                    None => f64::NAN,
                },
                avg_noise_mag: avg_noise_magnitude(&noises)?,
                consensus_violation: consensus_violation(&w, &z_now)?,
                objective,
                rho_t: rho,
                prox_t,
            });
            log::debug!("round {t}: rho = {rho:.4}, records = {}", records.len());
        }
    }

    let scale = 1.0 / config.iterations.max(1) as f64;
    Ok(RunOutcome {
        records,
        dims,
        w,
        agents,
        w_avg: ParamMatrix::from_array(w_sum * scale),
        z_avg: z_sums
            .into_iter()
            .map(|s| ParamMatrix::from_array(s * scale))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pooled(rows: usize) -> AgentData {
        let features = Array2::from_shape_fn((rows, 2), |(i, j)| (i * 2 + j) as f64);
        let classes: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        AgentData::from_class_indices(features, &classes, 3).unwrap()
    }

    #[test]
    fn partition_sizes() {
        let mut rng = RngStream::for_agent(4, 0, 0);
        let parts = partition_homogeneous(&pooled(5), 2, &mut rng).unwrap();
        assert_eq!(
            parts.iter().map(AgentData::rows).collect::<Vec<_>>(),
            vec![3, 2]
        );
        assert!(partition_homogeneous(&pooled(2), 3, &mut rng).is_err());
    }

    #[test]
    fn partition_preserves_rows() {
        let data = pooled(23);
        let mut rng = RngStream::for_agent(11, 0, 0);
        let parts = partition_homogeneous(&data, 4, &mut rng).unwrap();
        let mut firsts: Vec<i64> = parts
            .iter()
            .flat_map(|p| p.features().column(0).to_vec())
            .map(|v| v as i64)
            .collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..23).map(|i| 2 * i).collect::<Vec<i64>>());
    }

    #[test]
    fn consensus_cases() {
        let w = ParamMatrix::filled(2, 2, 1.0);
        assert_eq!(
            consensus_violation(&w, &[w.clone(), w.clone()]).unwrap(),
            0.0
        );
        let mut z = w.clone();
        z.as_array_mut()[[1, 0]] = 1.5;
        assert_eq!(consensus_violation(&w, &[w.clone(), z]).unwrap(), 0.5);
    }

    #[test]
    fn zero_rounds_returns_initial_state() {
        let mut rng = RngStream::for_agent(0, 0, 0);
        let parts = partition_homogeneous(&pooled(10), 2, &mut rng).unwrap();
        let mut cfg = RunConfig::new(Algorithm::ObjT);
        cfg.iterations = 0;
        let out = run_experiment(&cfg, parts, None).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.w, ParamMatrix::zeros(2, 3));
        assert!(out.agents.iter().all(|a| a.z == ParamMatrix::zeros(2, 3)));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for alg in Algorithm::ALL {
            assert_eq!(alg.as_str().parse::<Algorithm>().unwrap(), alg);
        }
        assert!("sgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn mechanism_must_match_algorithm() {
        let mut cfg = RunConfig::new(Algorithm::ObjT);
        cfg.privacy.mechanism = MechanismKind::GaussianOutput;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::new(Algorithm::NonPrivateProx);
        cfg.privacy.mechanism = MechanismKind::LaplaceObjective;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logs_every_and_last() {
        let mut rng = RngStream::for_agent(0, 0, 0);
        let parts = partition_homogeneous(&pooled(12), 3, &mut rng).unwrap();
        let mut cfg = RunConfig::new(Algorithm::ObjP);
        cfg.iterations = 25;
        cfg.log_every = 10;
        let out = run_experiment(&cfg, parts, None).unwrap();
        let ts: Vec<usize> = out.records.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![10, 20, 25]);
    }
}

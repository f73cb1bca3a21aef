//! Independent oracles for the library's math: literal leave-one-out
//! sensitivity, a centralized reference solver, finite differences, an
//! empirical histogram-ratio privacy audit and synthetic problem generators.
//!
//! Nothing here shares code paths with the closed forms it checks beyond
//! the loss and gradient definitions themselves.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::admm::{z_update_prox, z_update_trust, FeasibleBox, Subproblem};
use crate::error::{Error, Result};
use crate::mechanisms::{l1_sensitivity, sample_laplace_noise};
use crate::model::{global_objective, local_gradient, AgentData, ParamMatrix, ProblemDims};
use crate::rng::{Purpose, RngStream};

/// Largest agent accepted by [`brute_force_sensitivity`].
pub const BRUTE_FORCE_MAX_ROWS: usize = 1000;

/// Sensitivity by definition: for every row, recompute the local gradient
/// without it (same `I`) and take the largest L1 distance.
pub fn brute_force_sensitivity(
    z: &ParamMatrix,
    data: &AgentData,
    dims: &ProblemDims,
) -> Result<f64> {
    if data.rows() > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::invalid(format!(
            "{} rows exceeds the brute-force guard of {BRUTE_FORCE_MAX_ROWS}; use l1_sensitivity",
            data.rows()
        )));
    }
    let full = local_gradient(z, data, dims)?;
    let mut best = 0.0f64;
    for i in 0..data.rows() {
        let reduced = local_gradient(z, &data.without_row(i), dims)?;
        best = best.max(full.l1_distance(&reduced)?);
    }
    Ok(best)
}

/// `|a - b| / |b|`, with `0` when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Central differences of `loss` at `z`, one coordinate at a time.
pub fn finite_diff_gradient(
    loss: impl Fn(&ParamMatrix) -> f64,
    z: &ParamMatrix,
    step: f64,
) -> ParamMatrix {
    let (j, k) = z.shape();
    let mut probe = z.clone();
    ParamMatrix::from_fn(j, k, |(a, b)| {
        let orig = z.get(a, b);
        probe.as_array_mut()[[a, b]] = orig + step;
        let up = loss(&probe);
        probe.as_array_mut()[[a, b]] = orig - step;
        let down = loss(&probe);
        probe.as_array_mut()[[a, b]] = orig;
        (up - down) / (2.0 * step)
    })
}

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub w: ParamMatrix,
    /// `F* = sum_p f_p(w*)`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Euclidean norm of `w - proj(w - grad F(w))` at the returned point.
    pub residual: f64,
}

/// Minimizes the centralized objective `sum_p f_p(w)` over `W` by
/// accelerated projected gradient (FISTA) with backtracking and
/// function-value restarts.
pub fn reference_solver(
    agents: &[AgentData],
    dims: &ProblemDims,
    feasible: &FeasibleBox,
    tol: f64,
    max_iters: usize,
) -> Result<ReferenceSolution> {
    let (j, k) = dims.param_shape();
    let objective = |w: &ParamMatrix| -> Result<f64> {
        let copies = vec![w.clone(); agents.len()];
        global_objective(&copies, agents, dims)
    };
    let gradient = |w: &ParamMatrix| -> Result<ParamMatrix> {
        let mut total = Array2::zeros((j, k));
        for a in agents {
            total += local_gradient(w, a, dims)?.as_array();
        }
        Ok(ParamMatrix::from_array(total))
    };
    let step_to = |w: &ParamMatrix, g: &ParamMatrix, step: f64| {
        let mut cand = w.clone();
        cand.as_array_mut().scaled_add(-step, g.as_array());
        feasible.project(&cand)
    };
    let residual_at = |w: &ParamMatrix| -> Result<f64> {
        let g = gradient(w)?;
        Ok((w.as_array() - step_to(w, &g, 1.0).as_array())
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt())
    };

    let mut w = feasible.project(&ParamMatrix::zeros(j, k));
    let mut f = objective(&w)?;
    let mut y = w.clone();
    let mut momentum = 1.0f64;
    let mut step = 1.0;
    for it in 0..max_iters {
        let residual = residual_at(&w)?;
        if residual <= tol {
            return Ok(ReferenceSolution {
                w,
                objective: f,
                iterations: it,
                converged: true,
                residual,
            });
        }
        let fy = objective(&y)?;
        let gy = gradient(&y)?;
        let (cand, fc) = loop {
            let cand = step_to(&y, &gy, step);
            let d = cand.as_array() - y.as_array();
            let model = fy + (&d * gy.as_array()).sum() + (&d * &d).sum() / (2.0 * step);
            let fc = objective(&cand)?;
            if fc <= model || step < 1e-16 {
                break (cand, fc);
            }
            step *= 0.5;
        };
        if fc > f && momentum > 1.0 {
            // Momentum overshot; restart from the last iterate.
            y = w.clone();
            momentum = 1.0;
            continue;
        }
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next;
        let mut extrapolated = cand.clone();
        extrapolated
            .as_array_mut()
            .scaled_add(beta, &(cand.as_array() - w.as_array()));
        y = extrapolated;
        w = cand;
        f = fc;
        momentum = next;
        step *= 1.1;
    }
    let residual = residual_at(&w)?;
    log::warn!("reference solver stopped after {max_iters} iterations (residual {residual:e})");
    Ok(ReferenceSolution {
        w,
        objective: f,
        iterations: max_iters,
        converged: false,
        residual,
    })
}

/// Which local step the audit exercises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AuditedStep {
    Proximal { eta: f64 },
    TrustRegion { delta: f64 },
}

/// Everything about one local step except the dataset and the noise.
#[derive(Debug, Clone)]
pub struct AuditSetup {
    pub step: AuditedStep,
    pub z_prev: ParamMatrix,
    pub w_next: ParamMatrix,
    pub lambda: ParamMatrix,
    pub rho: f64,
    pub feasible: FeasibleBox,
    pub eps_bar: f64,
    /// Multiplies the calibrated Laplace scale; `1.0` is the correct
    /// mechanism, `0.5` an under-scaled one.
    pub noise_multiplier: f64,
}

impl AuditSetup {
    /// The audit used by the acceptance suite and the CLI: `z^t = w = 0` and
    /// `lambda = f_D'(0)`, so the noiseless output under `D` is `z^t` itself
    /// and the two output distributions differ only through the gradient.
    pub fn centered(
        data: &AgentData,
        dims: &ProblemDims,
        step: AuditedStep,
        rho: f64,
        eps_bar: f64,
    ) -> Result<Self> {
        let zero = ParamMatrix::zeros(dims.features, dims.classes);
        Ok(Self {
            step,
            lambda: local_gradient(&zero, data, dims)?,
            z_prev: zero.clone(),
            w_next: zero,
            rho,
            feasible: FeasibleBox::default(),
            eps_bar,
            noise_multiplier: 1.0,
        })
    }
}

/// Laplace scale of the calibrated noise as it reaches `z` in the
/// trust-region step (`xi / rho`), at `z = 0`.
pub fn calibrated_scale_on_z(
    data: &AgentData,
    dims: &ProblemDims,
    rho: f64,
    eps_bar: f64,
) -> Result<f64> {
    let zero = ParamMatrix::zeros(dims.features, dims.classes);
    Ok(l1_sensitivity(&zero, data, dims)?.value / eps_bar / rho)
}

#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    pub samples: usize,
    pub bins: usize,
    pub slack: f64,
    /// Bins need at least this many hits under both datasets to count.
    pub min_count: u64,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            bins: 60,
            slack: 0.1,
            min_count: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditBin {
    pub lo: f64,
    pub hi: f64,
    pub count_d: u64,
    pub count_d_prime: u64,
}

impl AuditBin {
    pub fn log_ratio(&self) -> f64 {
        (self.count_d as f64 / self.count_d_prime as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpAuditReport {
    pub eps_target: f64,
    pub eps_measured: f64,
    pub bins: usize,
    pub samples: usize,
    pub slack: f64,
    /// Bins that passed the minimum-count filter.
    pub qualifying_bins: usize,
    pub violation: bool,
    /// No usable bins, or all mass in one place.
    pub inconclusive: bool,
    pub histogram: Vec<AuditBin>,
}

impl DpAuditReport {
    pub fn summary(&self) -> String {
        let verdict = if self.inconclusive {
            "INCONCLUSIVE"
        } else if self.violation {
            "VIOLATION"
        } else {
            "ok"
        };
        format!(
            "eps_target = {}\neps_measured = {:.6}\nslack = {}\nsamples = {}\nbins = {} ({} qualifying)\nverdict = {verdict}\n",
            self.eps_target, self.eps_measured, self.slack, self.samples, self.bins, self.qualifying_bins
        )
    }

    /// Per-bin counts and log-ratios as CSV.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count_d,count_d_prime,log_ratio\n");
        for b in &self.histogram {
            let ratio = if b.count_d > 0 && b.count_d_prime > 0 {
                format!("{:.9e}", b.log_ratio())
            } else {
                "NaN".into()
            };
            writeln!(
                out,
                "{:.9e},{:.9e},{},{},{ratio}",
                b.lo, b.hi, b.count_d, b.count_d_prime
            )
            .expect("string write");
        }
        out
    }
}

/// The neighbor of `data` that removes the row attaining the L1
/// sensitivity at `z`.
pub fn worst_case_neighbor(
    z: &ParamMatrix,
    data: &AgentData,
    dims: &ProblemDims,
) -> Result<AgentData> {
    let sens = l1_sensitivity(z, data, dims)?;
    let row = sens
        .maximizer
        .ok_or_else(|| Error::invalid("worst-case neighbor of an empty dataset"))?;
    Ok(data.without_row(row))
}

/// Empirically checks the per-iteration privacy of one local step.
///
/// The Laplace scale is calibrated once, from `d` at `z_prev`, and shared by
/// both datasets. Outputs are reduced to the scalar statistic
/// `<sign(g_D - g_D'), z>`, which carries the entire data dependence of the
/// step. Both output samples are histogrammed over their joint range and
/// `eps_measured` is the largest `|ln(p_D / p_D')|` over bins with at least
/// `min_count` hits under both datasets.
pub fn empirical_dp_audit(
    setup: &AuditSetup,
    d: &AgentData,
    d_prime: &AgentData,
    dims: &ProblemDims,
    opts: &AuditOptions,
) -> Result<DpAuditReport> {
    if opts.bins == 0 || opts.samples == 0 {
        return Err(Error::invalid(
            "audit needs at least one bin and one sample",
        ));
    }
    if !(setup.eps_bar > 0.0) || !(setup.noise_multiplier > 0.0) {
        return Err(Error::invalid("eps_bar and noise multiplier must be > 0"));
    }
    let grad_d = local_gradient(&setup.z_prev, d, dims)?;
    let grad_dp = local_gradient(&setup.z_prev, d_prime, dims)?;
    let sensitivity = l1_sensitivity(&setup.z_prev, d, dims)?.value;
    let calibrated_eps = setup.eps_bar / setup.noise_multiplier;
    let mut direction =
        ParamMatrix::from_array((grad_d.as_array() - grad_dp.as_array()).mapv(|v| {
            if v == 0.0 {
                0.0
            } else {
                v.signum()
            }
        }));
    if direction.iter().all(|v| v == 0.0) {
        // Identical gradients: any fixed projection will do.
        direction.as_array_mut().fill(1.0);
    }
    let stat = |z: &ParamMatrix| -> f64 { (z.as_array() * direction.as_array()).sum() };

    let draw_all = |grad: &ParamMatrix, stream: u64| -> Result<Vec<f64>> {
        let sub = Subproblem {
            z_prev: &setup.z_prev,
            w_next: &setup.w_next,
            lambda: &setup.lambda,
            grad,
            rho: setup.rho,
        };
        let mut rng = RngStream::auxiliary(opts.seed, Purpose::Audit, stream);
        let shape = setup.z_prev.shape();
        (0..opts.samples)
            .map(|_| {
                let xi = sample_laplace_noise(shape, sensitivity, calibrated_eps, &mut rng)?;
                let z = match setup.step {
                    AuditedStep::Proximal { eta } => {
                        z_update_prox(&sub, &xi, eta, &setup.feasible)?
                    }
                    AuditedStep::TrustRegion { delta } => {
                        z_update_trust(&sub, &xi, delta, &setup.feasible)?
                    }
                };
                Ok(stat(&z))
            })
            .collect()
    };
    let out_d = draw_all(&grad_d, 0)?;
    let out_dp = draw_all(&grad_dp, 1)?;

    let (lo, hi) = out_d
        .iter()
        .chain(&out_dp)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut report = DpAuditReport {
        eps_target: setup.eps_bar,
        eps_measured: 0.0,
        bins: opts.bins,
        samples: opts.samples,
        slack: opts.slack,
        qualifying_bins: 0,
        violation: false,
        inconclusive: true,
        histogram: Vec::new(),
    };
    if !(hi > lo) {
        return Ok(report);
    }
    let width = (hi - lo) / opts.bins as f64;
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(opts.bins - 1);
    let mut counts_d = vec![0u64; opts.bins];
    let mut counts_dp = vec![0u64; opts.bins];
    out_d.iter().for_each(|&v| counts_d[bin_of(v)] += 1);
    out_dp.iter().for_each(|&v| counts_dp[bin_of(v)] += 1);

    report.histogram = (0..opts.bins)
        .map(|b| AuditBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count_d: counts_d[b],
            count_d_prime: counts_dp[b],
        })
        .collect();
    let qualifying: Vec<&AuditBin> = report
        .histogram
        .iter()
        .filter(|b| b.count_d >= opts.min_count && b.count_d_prime >= opts.min_count)
        .collect();
    report.qualifying_bins = qualifying.len();
    let nonempty = report
        .histogram
        .iter()
        .filter(|b| b.count_d + b.count_d_prime > 0)
        .count();
    if qualifying.is_empty() || nonempty < 2 {
        return Ok(report);
    }
    report.inconclusive = false;
    report.eps_measured = qualifying
        .iter()
        .map(|b| b.log_ratio().abs())
        .fold(0.0, f64::max);
    report.violation = report.eps_measured > setup.eps_bar + opts.slack;
    Ok(report)
}

/// Random dataset with features uniform in `[-1, 1]` and uniform labels.
pub fn random_agent(rng: &mut impl Rng, rows: usize, features: usize, classes: usize) -> AgentData {
    let x = Array2::from_shape_fn((rows, features), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    AgentData::from_class_indices(x, &labels, classes).expect("labels in range")
}

pub fn random_param(
    rng: &mut impl Rng,
    features: usize,
    classes: usize,
    scale: f64,
) -> ParamMatrix {
    ParamMatrix::from_fn(features, classes, |_| rng.random_range(-scale..scale))
}

/// A Gaussian-mixture classification problem split across agents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub agents: usize,
    pub features: usize,
    pub classes: usize,
    pub samples: usize,
    /// Distance scale between class means.
    pub separation: f64,
    /// Uneven agent sizes and per-agent label skew when set.
    pub heterogeneous: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Generates per-agent datasets. Homogeneous problems deal rows evenly
    /// (first `I mod P` agents get one more); heterogeneous ones draw agent
    /// sizes from a skewed split and favor one class per agent.
    pub fn generate(&self) -> Result<Vec<AgentData>> {
        if self.agents == 0 || self.classes == 0 || self.samples < self.agents {
            return Err(Error::invalid(
                "synthetic problem needs agents >= 1, classes >= 1 and samples >= agents",
            ));
        }
        let mut rng = RngStream::auxiliary(self.seed, Purpose::Synthetic, 0);
        let means: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.features)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        self.separation * n
                    })
                    .collect()
            })
            .collect();

        let sizes: Vec<usize> = if self.heterogeneous {
            let weights: Vec<f64> = (0..self.agents).map(|p| 1.0 + p as f64).collect();
            let total: f64 = weights.iter().sum();
            let spare = self.samples - self.agents;
            let mut sizes: Vec<usize> = weights
                .iter()
                .map(|w| 1 + (spare as f64 * w / total).floor() as usize)
                .collect();
            let assigned: usize = sizes.iter().sum();
            *sizes.last_mut().expect("agents >= 1") += self.samples - assigned;
            sizes
        } else {
            let (base, extra) = (self.samples / self.agents, self.samples % self.agents);
            (0..self.agents)
                .map(|p| base + usize::from(p < extra))
                .collect()
        };

        sizes
            .iter()
            .enumerate()
            .map(|(p, &rows)| {
                let labels: Vec<usize> = (0..rows)
                    .map(|_| {
                        if self.heterogeneous && rng.random_bool(0.5) {
                            p % self.classes
                        } else {
                            rng.random_range(0..self.classes)
                        }
                    })
                    .collect();
                let x = Array2::from_shape_fn((rows, self.features), |(i, j)| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    means[labels[i]][j] + n
                });
                AgentData::from_class_indices(x, &labels, self.classes)
            })
            .collect()
    }
}

/// Outcome of comparing a sensitivity formula with the brute-force oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusReport {
    pub instances: usize,
    pub max_relative_error: f64,
}

/// Compares `candidate` with [`brute_force_sensitivity`] on `instances`
/// random problems with `1..=max_rows` rows, `J, K` in `1..=5` and random
/// parameters.
pub fn sensitivity_corpus_check(
    instances: usize,
    max_rows: usize,
    seed: u64,
    candidate: impl Fn(&ParamMatrix, &AgentData, &ProblemDims) -> Result<f64>,
) -> Result<CorpusReport> {
    if max_rows == 0 {
        return Err(Error::invalid("corpus needs at least one row per instance"));
    }
    let mut rng = RngStream::auxiliary(seed, Purpose::Corpus, 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let rows = rng.random_range(1..=max_rows);
        let j = rng.random_range(1..=5);
        let k = rng.random_range(1..=5);
        let data = random_agent(&mut rng, rows, j, k);
        let dims = ProblemDims {
            agents: rng.random_range(1..=4),
            features: j,
            classes: k,
            samples: rows + rng.random_range(0..50),
            beta: rng.random_range(0.0..1.0),
        };
        let z = random_param(&mut rng, j, k, 2.0);
        let expected = brute_force_sensitivity(&z, &data, &dims)?;
        let got = candidate(&z, &data, &dims)?;
        worst = worst.max(relative_error(got, expected));
    }
    Ok(CorpusReport {
        instances,
        max_relative_error: worst,
    })
}

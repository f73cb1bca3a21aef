use rand::Rng;

use dpadmm_core::admm::FeasibleBox;
use dpadmm_core::mechanisms::l1_sensitivity;
use dpadmm_core::model::{global_objective, AgentData, ParamMatrix, ProblemDims};
use dpadmm_core::rng::{Purpose, RngStream};
use dpadmm_core::validation::{
    brute_force_sensitivity, calibrated_scale_on_z, empirical_dp_audit, random_agent,
    reference_solver, sensitivity_corpus_check, worst_case_neighbor, AuditOptions, AuditSetup,
    AuditedStep, SyntheticSpec,
};

#[test]
fn corpus_agrees_and_catches_a_wrong_candidate() {
    let ok = sensitivity_corpus_check(150, 15, 8, |z, d, dims| {
        Ok(l1_sensitivity(z, d, dims)?.value)
    })
    .unwrap();
    assert_eq!(ok.instances, 150);
    assert!(ok.max_relative_error <= 1e-12);
    // Dividing by I - 1 instead of I is the classic off-by-one.
    let bad = sensitivity_corpus_check(150, 15, 8, |z, d, dims| {
        let s = l1_sensitivity(z, d, dims)?.value;
        Ok(s * dims.samples as f64 / (dims.samples as f64 - 1.0).max(1.0))
    })
    .unwrap();
    assert!(bad.max_relative_error > 1e-3);
}

#[test]
fn brute_force_refuses_large_data() {
    let mut rng = RngStream::auxiliary(1, Purpose::Corpus, 0);
    let data = random_agent(&mut rng, 1001, 1, 2);
    let dims = ProblemDims::from_agents(std::slice::from_ref(&data), 0.0).unwrap();
    assert!(brute_force_sensitivity(&ParamMatrix::zeros(1, 2), &data, &dims).is_err());
}

fn objective(agents: &[AgentData], dims: &ProblemDims, w: &ParamMatrix) -> f64 {
    global_objective(&vec![w.clone(); agents.len()], agents, dims).unwrap()
}

#[test]
fn reference_solution_beats_a_grid_and_random_probes() {
    // J=1, K=2: two free parameters, small enough for a dense grid.
    let agents = SyntheticSpec {
        agents: 2,
        features: 1,
        classes: 2,
        samples: 40,
        separation: 1.0,
        heterogeneous: false,
        seed: 3,
    }
    .generate()
    .unwrap();
    let dims = ProblemDims::from_agents(&agents, 0.05).unwrap();
    let sol = reference_solver(&agents, &dims, &FeasibleBox::default(), 1e-8, 100_000).unwrap();
    assert!(sol.converged);
    let mut best = f64::INFINITY;
    for a in -200..=200 {
        for b in -200..=200 {
            let w = ParamMatrix::from_vec(1, 2, vec![a as f64 * 0.02, b as f64 * 0.02]).unwrap();
            best = best.min(objective(&agents, &dims, &w));
        }
    }
    assert!(sol.objective <= best + 1e-12);
    let mut rng = RngStream::auxiliary(2, Purpose::Corpus, 0);
    for _ in 0..2000 {
        let mut probe = sol.w.clone();
        probe
            .as_array_mut()
            .mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        assert!(objective(&agents, &dims, &probe) >= sol.objective - 1e-12);
    }
}

#[test]
fn reference_solver_respects_the_box() {
    let agents = SyntheticSpec {
        agents: 1,
        features: 2,
        classes: 2,
        samples: 30,
        separation: 6.0,
        heterogeneous: false,
        seed: 4,
    }
    .generate()
    .unwrap();
    // Nearly separable data without regularization pushes w outward.
    let dims = ProblemDims::from_agents(&agents, 0.0).unwrap();
    let sol = reference_solver(&agents, &dims, &FeasibleBox::Bounded(0.5), 1e-8, 100_000).unwrap();
    assert!(sol.converged);
    assert!(FeasibleBox::Bounded(0.5).contains(&sol.w));
    assert!(sol.w.linf_norm() > 0.5 - 1e-12);
}

fn audit_instance(seed: u64) -> (AgentData, AgentData, ProblemDims, AuditSetup) {
    let mut rng = RngStream::auxiliary(seed, Purpose::Corpus, 9);
    let x = ndarray::Array2::from_shape_fn((8, 1), |_| rng.random_range(0.0..1.0));
    let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let data = AgentData::from_class_indices(x, &y, 2).unwrap();
    let dims = ProblemDims::from_agents(std::slice::from_ref(&data), 0.0).unwrap();
    let zero = ParamMatrix::zeros(1, 2);
    let neighbor = worst_case_neighbor(&zero, &data, &dims).unwrap();
    let delta = calibrated_scale_on_z(&data, &dims, 1.0, 1.0).unwrap();
    let setup =
        AuditSetup::centered(&data, &dims, AuditedStep::TrustRegion { delta }, 1.0, 1.0).unwrap();
    (data, neighbor, dims, setup)
}

fn options(seed: u64) -> AuditOptions {
    AuditOptions {
        samples: 1_000_000,
        seed,
        ..AuditOptions::default()
    }
}

#[test]
fn audit_passes_calibrated_and_flags_half_scale_noise() {
    let (data, neighbor, dims, setup) = audit_instance(1);
    let good = empirical_dp_audit(&setup, &data, &neighbor, &dims, &options(1)).unwrap();
    assert!(!good.violation && !good.inconclusive, "{}", good.summary());
    let bad_setup = AuditSetup {
        noise_multiplier: 0.5,
        ..setup
    };
    let bad = empirical_dp_audit(&bad_setup, &data, &neighbor, &dims, &options(2)).unwrap();
    assert!(bad.violation, "{}", bad.summary());
    assert!(bad.eps_measured > 1.8);
}

#[test]
fn audit_report_serializes_every_bin() {
    let (data, neighbor, dims, setup) = audit_instance(2);
    let report = empirical_dp_audit(&setup, &data, &neighbor, &dims, &options(3)).unwrap();
    assert_eq!(report.histogram.len(), report.bins);
    let csv = report.histogram_csv();
    assert_eq!(csv.lines().count(), report.bins + 1);
    assert!(report.summary().contains("eps"));
    assert_eq!(
        report.histogram.iter().map(|b| b.count_d).sum::<u64>(),
        report.samples as u64
    );
}

#[test]
fn proximal_audit_also_respects_the_bound() {
    let (data, neighbor, dims, setup) = audit_instance(3);
    let setup = AuditSetup {
        step: AuditedStep::Proximal { eta: 1.0 },
        ..setup
    };
    let report = empirical_dp_audit(&setup, &data, &neighbor, &dims, &options(4)).unwrap();
    assert!(!report.violation, "{}", report.summary());
}

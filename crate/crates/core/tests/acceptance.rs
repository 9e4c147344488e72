//! Acceptance criteria 1 to 7. Each test writes one `PASS`/`FAIL` line to
//! stderr (bypassing the test harness capture) and fails when its criterion does.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rrr_contact::classifier::{self, gradient_check, GridCell, LabeledSet, MlpModel, ModelMeta, Prediction, TrainConfig};
use rrr_contact::cli;
use rrr_contact::config::ExperimentConfig;
use rrr_contact::contact::{sample_scenarios, ContactKind};
use rrr_contact::controller::{impedance_law, ImpedanceGains, ModeKind};
use rrr_contact::dynamics::RobotModel;
use rrr_contact::evaluation::{
    label_outcome, sweep_grid, threshold_sweep, trend_checks, Evaluation, Misclass, Outcome, Verdict, DFCR_MARGIN,
};
use rrr_contact::kinematics::{self, PlatformPose, RobotGeometry, DEFAULT_BRANCH};
use rrr_contact::observer::{self, ObserverState, DEFAULT_THRESHOLDS};
use rrr_contact::simulation::{run_episode, EpisodeOptions, EpisodeSummary};

fn report(criterion: u32, name: &str, failures: &[String], detail: &str) {
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut line = format!("criterion {criterion} ({name}): {verdict}; {detail}");
    for f in failures {
        line += &format!("\n    {f}");
    }
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(failures.is_empty(), "criterion {criterion} failed");
}

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn within(failures: &mut Vec<String>, elapsed: Duration, limit: f64) {
    check(failures, elapsed.as_secs_f64() < limit, || format!("runtime {:.1} s exceeds {limit} s", elapsed.as_secs_f64()));
}

/// Uniform poses in the central workspace that IK reaches and that are not
/// close to a singularity (finite differences lose their meaning there).
fn random_poses(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let g = RobotGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.4..0.4));
        let pose = PlatformPose::from_vector(&x);
        let Ok(q) = kinematics::inverse_kinematics(&pose, &g, &DEFAULT_BRANCH) else { continue };
        let Ok(j) = kinematics::jacobians(&q, &pose, &g) else { continue };
        let s = j.j_xqa.singular_values();
        if s.min() > 0.0 && s.max() / s.min() < 1e3 {
            out.push(x);
        }
    }
    out
}

#[test]
fn criterion_1_kinematics_roundtrip() {
    let start = Instant::now();
    let g = RobotGeometry::default();
    let poses = random_poses(1000, 1);
    let h = 1e-6;
    let (mut worst_fk, mut worst_jx, mut worst_jq) = (0.0f64, 0.0f64, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for x in &poses {
        let pose = PlatformPose::from_vector(x);
        let q = kinematics::inverse_kinematics(&pose, &g, &DEFAULT_BRANCH).unwrap();
        let guess = PlatformPose::new(x.x + rng.random_range(-3e-3..3e-3), x.y + rng.random_range(-3e-3..3e-3), x.z + rng.random_range(-0.02..0.02));
        let fk = kinematics::forward_kinematics(&q.active(), &guess, &g).unwrap();
        worst_fk = worst_fk.max((fk.pose.to_vector() - x).amax());

        let jac = kinematics::jacobians(&q, &pose, &g).unwrap();
        // dx/dq_a through forward kinematics
        let mut fd = Matrix3::zeros();
        for k in 0..3 {
            let (mut qp, mut qm) = (q.active(), q.active());
            qp[k] += h;
            qm[k] -= h;
            let xp = kinematics::forward_kinematics(&qp, &pose, &g).unwrap().pose.to_vector();
            let xm = kinematics::forward_kinematics(&qm, &pose, &g).unwrap().pose.to_vector();
            fd.set_column(k, &((xp - xm) / (2.0 * h)));
        }
        worst_jx = worst_jx.max((fd - jac.j_xqa).amax() / jac.j_xqa.amax());
        // dq/dx through inverse kinematics, all nine joints
        let mut fd = jac.j_qx * 0.0;
        for k in 0..3 {
            let (mut xp, mut xm) = (*x, *x);
            xp[k] += h;
            xm[k] -= h;
            let qp = kinematics::inverse_kinematics(&PlatformPose::from_vector(&xp), &g, &DEFAULT_BRANCH).unwrap().stacked();
            let qm = kinematics::inverse_kinematics(&PlatformPose::from_vector(&xm), &g, &DEFAULT_BRANCH).unwrap().stacked();
            let d = (qp - qm).map(kinematics::wrap_angle) / (2.0 * h);
            fd.set_column(k, &d);
        }
        worst_jq = worst_jq.max((fd - jac.j_qx).amax() / jac.j_qx.amax());
    }
    let mut failures = Vec::new();
    check(&mut failures, worst_fk <= 1e-10, || format!("FK(IK(x)) error {worst_fk:e}"));
    check(&mut failures, worst_jx < 1e-5, || format!("J_xqa finite-difference error {worst_jx:e}"));
    check(&mut failures, worst_jq < 1e-5, || format!("J_qx finite-difference error {worst_jq:e}"));
    within(&mut failures, start.elapsed(), 10.0);
    let detail = format!(
        "{} poses; FK error {worst_fk:.1e}; Jacobian FD error {worst_jx:.1e} / {worst_jq:.1e}; {:.2} s",
        poses.len(),
        start.elapsed().as_secs_f64()
    );
    report(1, "kinematics", &failures, &detail);
}

#[test]
fn criterion_2_dynamics_consistency() {
    let start = Instant::now();
    let model = RobotModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut min_eig, mut worst_sym, mut worst_c) = (f64::INFINITY, 0.0f64, 0.0f64);
    for x in random_poses(300, 4) {
        let m = model.mass_matrix_at(&x).unwrap();
        worst_sym = worst_sym.max((m - m.transpose()).amax() / m.amax());
        min_eig = min_eig.min(m.symmetric_eigenvalues().min());
        let xdot = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0));
        let c = model.coriolis_matrix(&model.state(x, xdot).unwrap()).unwrap();
        let h = 1e-6;
        let mdot = (model.mass_matrix_at(&(x + h * xdot)).unwrap() - model.mass_matrix_at(&(x - h * xdot)).unwrap()) / (2.0 * h);
        worst_c = worst_c.max((mdot - c - c.transpose()).amax() / mdot.amax().max(1e-9));
    }

    // unforced, frictionless, 1 kHz
    let free = RobotModel { params: model.params.frictionless(), ..model.clone() };
    let mut worst_drift = 0.0f64;
    let starts = [([0.0, 0.0, 0.0], [0.05, -0.03, 0.2]), ([0.03, -0.02, 0.1], [-0.02, 0.04, -0.3]), ([-0.04, 0.03, -0.15], [0.01, 0.01, 0.5])];
    for (x0, v0) in starts {
        let mut s = free.state(Vector3::from(x0), Vector3::from(v0)).unwrap();
        let e0 = free.kinetic_energy(&s).unwrap();
        let steps = 2000;
        for _ in 0..steps {
            let t = free.terms(&s).unwrap();
            s = free.step(&s, &t, &Vector3::zeros(), &Vector3::zeros(), 1e-3).unwrap();
        }
        let rate = (free.kinetic_energy(&s).unwrap() - e0).abs() / (steps as f64 * 1e-3);
        worst_drift = worst_drift.max(rate);
    }
    let mut failures = Vec::new();
    check(&mut failures, min_eig > 0.0 && worst_sym < 1e-12, || format!("M_x not SPD: min eigenvalue {min_eig:e}, asymmetry {worst_sym:e}"));
    check(&mut failures, worst_c < 1e-4, || format!("Mdot - C - C^T relative error {worst_c:e}"));
    check(&mut failures, worst_drift < 1e-4, || format!("energy drift {worst_drift:e} J/s"));
    within(&mut failures, start.elapsed(), 30.0);
    let detail = format!(
        "min eig(M_x) {min_eig:.2e}; Mdot-C-C^T {worst_c:.1e}; drift {worst_drift:.1e} J/s; {:.2} s",
        start.elapsed().as_secs_f64()
    );
    report(2, "dynamics", &failures, &detail);
}

#[test]
fn criterion_3_observer_error_dynamics() {
    let start = Instant::now();
    let model = RobotModel::default();
    let gains = ImpedanceGains::default();
    let x0 = Vector3::new(0.03, -0.02, 0.1);
    let (mut worst_track, mut worst_leak) = (0.0f64, 0.0f64);
    for axis in 0..3 {
        let f_ext = Vector3::from_fn(|i, _| if i == axis { 10.0 } else { 0.0 });
        let mut s = model.state(x0, Vector3::zeros()).unwrap();
        let mut terms = model.terms(&s).unwrap();
        let mut obs = ObserverState::new(Vector3::repeat(20.0), &terms.mass, &s.xdot);
        for k in 0..250 {
            let f_m = impedance_law(&s, &x0, &Vector3::zeros(), &gains, &terms);
            let beta = observer::beta_hat(&terms, &s.xdot);
            let next = model.step(&s, &terms, &f_m, &f_ext, 1e-3).unwrap();
            terms = model.terms(&next).unwrap();
            obs = observer::observer_step(&obs, &f_m, &beta, &terms.mass, &next.xdot, 1e-3);
            s = next;
            let t = (k + 1) as f64 * 1e-3;
            let expect = 10.0 * (1.0 - (-20.0 * t).exp());
            worst_track = worst_track.max((obs.estimate[axis] - expect).abs() / 10.0);
            for other in (0..3).filter(|o| *o != axis) {
                worst_leak = worst_leak.max(obs.estimate[other].abs() / 10.0);
            }
        }
    }
    let mut failures = Vec::new();
    check(&mut failures, worst_track < 0.02, || format!("tracking error {:.3}% of the step", 100.0 * worst_track));
    check(&mut failures, worst_leak < 0.01, || format!("cross-axis leakage {:.3}% of the step", 100.0 * worst_leak));
    within(&mut failures, start.elapsed(), 5.0);
    let detail = format!(
        "worst deviation {:.3}%; leakage {:.3}%; {:.2} s",
        100.0 * worst_track,
        100.0 * worst_leak,
        start.elapsed().as_secs_f64()
    );
    report(3, "observer", &failures, &detail);
}

#[test]
fn criterion_4_detection() {
    let cfg = ExperimentConfig::default();
    let engine = cfg.engine();
    let mut failures = Vec::new();
    check(&mut failures, cfg.policy.thresholds == DEFAULT_THRESHOLDS && DEFAULT_THRESHOLDS == [10.0, 10.0, 1.0], || {
        format!("thresholds {:?}", cfg.policy.thresholds)
    });
    let mut scenarios = Vec::new();
    for seed in 0..20 {
        scenarios.extend(sample_scenarios(&engine.model, &engine.gains.stiffness, &cfg.scenarios, 500 + seed).unwrap());
    }
    let detectable: Vec<_> = scenarios.iter().filter(|s| s.detectable).collect();
    let mut missed = 0;
    for (i, sc) in detectable.iter().enumerate() {
        // detection is all that matters here: stop once the feature window is done
        let opts = EpisodeOptions { seed: i as u64, stop_after_features: true, ..Default::default() };
        let ep = run_episode(&engine, sc, &opts).unwrap();
        if !ep.summary.detected() {
            missed += 1;
            failures.push(format!("scenario {i} ({:?} on {:?}) not detected", sc.kind, sc.site));
        }
    }
    let quiet: Vec<_> = scenarios.iter().take(30).map(|s| s.without_contact()).collect();
    let mut false_alarms = 0;
    for (i, sc) in quiet.iter().enumerate() {
        let opts = EpisodeOptions { seed: 10_000 + i as u64, duration: Some(10.0), ..Default::default() };
        let ep = run_episode(&engine, sc, &opts).unwrap();
        if let Some(t) = ep.summary.detection_time {
            false_alarms += 1;
            failures.push(format!("contact-free episode {i} detected at {t:.3} s"));
        }
    }
    let detail = format!(
        "{}/{} detectable scenarios detected; {false_alarms} alarms in {} contact-free 10 s episodes",
        detectable.len() - missed,
        detectable.len(),
        quiet.len()
    );
    report(4, "detection", &failures, &detail);
}

fn blobs(n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut s = LabeledSet::default();
    for i in 0..n {
        let kind = if i % 2 == 0 { ContactKind::Collision } else { ContactKind::Clamping };
        let c = if kind == ContactKind::Collision { [-4.0, 2.0, 0.5] } else { [4.0, -2.0, -0.5] };
        s.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng), c[2] + 0.2 * noise.sample(&mut rng)], kind, i as u64);
    }
    s
}

struct Pipeline {
    cfg: ExperimentConfig,
    rows: usize,
    model: MlpModel,
    meta: ModelMeta,
    fit_time: Duration,
    evaluation: Evaluation,
    total_time: Duration,
}

/// Dataset, default-grid fit and held-out evaluation at default settings,
/// shared by criteria 5 and 6.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let start = Instant::now();
        let ds = cli::generate_dataset(&cfg).unwrap();
        let rows = ds.rows.len();
        let fit_start = Instant::now();
        let (model, meta, _, _) = cli::train_model(&cfg, ds.rows).unwrap();
        let fit_time = fit_start.elapsed();
        let evaluation = cli::run_evaluation(&cfg, &model, &meta).unwrap();
        Pipeline { cfg, rows, model, meta, fit_time, evaluation, total_time: start.elapsed() }
    })
}

#[test]
fn criterion_5_classifier_integrity() {
    let mut failures = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = blobs(40, 6);
    let mut worst_grad = 0.0f64;
    for layers in [vec![3, 8, 2], vec![3, 16, 16, 2]] {
        let mut m = MlpModel::random(&layers, &mut rng);
        let (mean, std) = classifier::normalization(&data);
        m.mean = mean;
        m.std = std;
        for b in &mut m.biases {
            b.apply(|v| *v = rng.random_range(-0.5..0.5));
        }
        worst_grad = worst_grad.max(gradient_check(&m, &data, 1e-3, 1e-6));
    }
    check(&mut failures, worst_grad < 1e-6, || format!("gradient check {worst_grad:e}"));

    let quick = TrainConfig { step_size: 1e-2, epochs: 60, patience: 10, batch_size: 64, ..TrainConfig::default() };
    let cell = GridCell { hidden: vec![8], lambda: 1e-4, lambda_index: 0 };
    let (blob_model, _) = classifier::train(&blobs(2000, 7), &quick, &cell, None).unwrap();
    let (_, blob_acc) = blob_model.loss(&blobs(1000, 8), 0.0).unwrap();
    check(&mut failures, blob_acc >= 0.99, || format!("blob accuracy {blob_acc}"));

    let p = pipeline();
    check(&mut failures, p.fit_time.as_secs_f64() < 120.0, || format!("default-grid fit took {:.1} s", p.fit_time.as_secs_f64()));

    // retrain from the same rows: byte-identical model file
    let ds = cli::generate_dataset(&p.cfg).unwrap();
    let (again, meta_again, _, _) = cli::train_model(&p.cfg, ds.rows).unwrap();
    let identical = again.to_text(&meta_again) == p.model.to_text(&p.meta);
    check(&mut failures, identical, || "retraining changed the model".into());

    let held_out = p.cfg.evaluation.held_out_config;
    check(&mut failures, !p.meta.train_configs.contains(&held_out), || format!("trained on held-out {held_out}"));
    let leaky = ModelMeta { train_configs: vec![0, 1, 2], ..p.meta.clone() };
    let refused = matches!(cli::run_evaluation(&p.cfg, &p.model, &leaky), Err(e) if e.kind() == "SplitViolation");
    check(&mut failures, refused, || "evaluation accepted a model trained on the held-out configuration".into());

    let detail = format!(
        "gradient check {worst_grad:.1e}; blob accuracy {blob_acc:.4}; default-grid fit {:.1} s on {} rows; retrain identical {identical}; split refused {refused}",
        p.fit_time.as_secs_f64(),
        p.rows
    );
    report(5, "classifier", &failures, &detail);
}

#[test]
fn criterion_6_end_to_end_trends() {
    let p = pipeline();
    let grid = sweep_grid();
    let rows = threshold_sweep(&p.evaluation.episodes, &grid, DFCR_MARGIN).unwrap();
    let checks = trend_checks(&rows, &grid, p.cfg.evaluation.min_misclassified);
    let mut failures = Vec::new();
    check(&mut failures, p.rows >= p.cfg.dataset.target_rows, || format!("dataset has {} rows", p.rows));
    check(&mut failures, p.total_time.as_secs_f64() < 600.0, || format!("pipeline took {:.1} s", p.total_time.as_secs_f64()));
    let mut lines = Vec::new();
    for (label, c) in ["a", "b", "c"].iter().zip(&checks) {
        let v = match c.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        };
        lines.push(format!("({label}) {v}: {}; {}", c.name, c.detail));
        if c.verdict == Verdict::Fail {
            failures.push(format!("({label}) {}: {}", c.name, c.detail));
        }
    }
    let cm = p.evaluation.confusion().unwrap();
    let detail = format!(
        "{} rows; {} evaluated episodes ({} undetected, {} failed); FCA rate {:.3}, FCB rate {:.3}; {:.0} s\n    {}",
        p.rows,
        p.evaluation.episodes.len(),
        p.evaluation.undetected.len(),
        p.evaluation.failed.len(),
        cm.fca_rate(),
        cm.fcb_rate(),
        p.total_time.as_secs_f64(),
        lines.join("\n    ")
    );
    report(6, "end-to-end trends", &failures, &detail);
}

struct Case {
    name: &'static str,
    truth: ContactKind,
    predicted: ContactKind,
    mode: ModeKind,
    retraction: Option<[f64; 3]>,
    gradient: Option<[f64; 3]>,
    pre: f64,
    post: f64,
    zero_g_post: f64,
    expected: Outcome,
}

fn executed(c: &Case) -> EpisodeSummary {
    EpisodeSummary {
        truth: c.truth,
        detection_time: Some(0.4),
        reaction_time: Some(0.41),
        prediction: Some(Prediction { class: c.predicted, p: 0.9 }),
        mode: c.mode,
        requested: c.mode,
        reaction_chain: 1,
        retraction_direction: c.retraction,
        opening_gradient: c.gradient,
        pre_peak: c.pre,
        post_peak: c.post,
        end_time: 1.5,
        steps: 1500,
        stopped_early: false,
        fallback: None,
    }
}

#[test]
fn criterion_7_outcome_labeling() {
    use ContactKind::{Clamping, Collision};
    use ModeKind::{Retraction, StructureOpening, ZeroG};
    let grad = Some([0.2, -1.0, 0.5]);
    // retraction that closes the clamp (negative product with the gradient) and one that opens it
    let closing = Some([-0.2, 1.0, 0.0]);
    let opening = Some([0.2, -1.0, 0.0]);
    let sideways = Some([1.0, 0.0, -0.4]);
    let case = |name, truth, predicted, mode, retraction, pre, post, zero_g_post, expected| Case {
        name,
        truth,
        predicted,
        mode,
        retraction,
        gradient: grad,
        pre,
        post,
        zero_g_post,
        expected,
    };
    let mut cases = vec![
        case("FCA, closing retraction raises the clamp force", Clamping, Collision, Retraction, closing, 20.0, 40.0, 18.0, Outcome::Dfcr),
        case("FCA, opening retraction with a higher force", Clamping, Collision, Retraction, opening, 20.0, 40.0, 18.0, Outcome::Ldfcr),
        case("FCA, closing retraction that lowers the force", Clamping, Collision, Retraction, closing, 20.0, 15.0, 18.0, Outcome::Ldfcr),
        case("FCA, closing retraction below the zero-g peak", Clamping, Collision, Retraction, closing, 20.0, 30.0, 35.0, Outcome::Ldfcr),
        case("FCA, closing retraction at exactly the margin", Clamping, Collision, Retraction, closing, 20.0, 21.0, 10.0, Outcome::Ldfcr),
        case("FCA, closing retraction just past the margin", Clamping, Collision, Retraction, closing, 20.0, 21.01, 10.0, Outcome::Dfcr),
        case("FCA, retraction orthogonal to the gradient", Clamping, Collision, Retraction, sideways, 20.0, 40.0, 18.0, Outcome::Ldfcr),
        case("FCA, closing retraction without a clamp gradient", Clamping, Collision, Retraction, closing, 20.0, 40.0, 18.0, Outcome::Ldfcr),
        case("FCA, gate fell back to zero-g", Clamping, Collision, ZeroG, closing, 20.0, 40.0, 40.0, Outcome::MisclassSfr),
        case("FCB, opening toward the collided body", Collision, Clamping, StructureOpening, None, 25.0, 60.0, 20.0, Outcome::Dfcr),
        case("FCB, opening away from the collided body", Collision, Clamping, StructureOpening, None, 25.0, 5.0, 20.0, Outcome::Ldfcr),
        case("FCB, above the pre-peak but not the zero-g peak", Collision, Clamping, StructureOpening, None, 25.0, 30.0, 40.0, Outcome::Ldfcr),
        case("FCB, at exactly the margin", Collision, Clamping, StructureOpening, None, 20.0, 21.0, 20.0, Outcome::Ldfcr),
        case("FCB, raised, geometry ignored", Collision, Clamping, StructureOpening, opening, 20.0, 30.0, 20.0, Outcome::Dfcr),
        case("FCB, gate fell back to zero-g", Collision, Clamping, ZeroG, None, 25.0, 60.0, 60.0, Outcome::MisclassSfr),
        case("correct clamping, structure opening", Clamping, Clamping, StructureOpening, None, 30.0, 45.0, 20.0, Outcome::CorrectOptimal),
        case("correct collision, retraction", Collision, Collision, Retraction, closing, 30.0, 45.0, 20.0, Outcome::CorrectOptimal),
        case("correct clamping, zero-g", Clamping, Clamping, ZeroG, None, 30.0, 25.0, 25.0, Outcome::CorrectSfr),
        case("correct collision, zero-g", Collision, Collision, ZeroG, None, 30.0, 5.0, 5.0, Outcome::CorrectSfr),
        case("FCA, pre-peak dominates the reference", Clamping, Collision, Retraction, closing, 50.0, 45.0, 10.0, Outcome::Ldfcr),
    ];
    cases[7].gradient = None;
    let mut failures = Vec::new();
    for c in &cases {
        let exec = executed(c);
        let base = EpisodeSummary { mode: ZeroG, post_peak: c.zero_g_post, ..exec.clone() };
        match label_outcome(&exec, Some(&base), DFCR_MARGIN) {
            Ok(l) => {
                check(&mut failures, l.outcome == c.expected, || format!("{}: {:?}, expected {:?}", c.name, l.outcome, c.expected));
                check(&mut failures, l.misclass == Misclass::of(c.truth, c.predicted), || format!("{}: misclass {:?}", c.name, l.misclass));
            }
            Err(e) => failures.push(format!("{}: {e}", c.name)),
        }
    }
    let detail = format!("{} of {} hand-built episodes labeled as expected", cases.len() - failures.len(), cases.len());
    report(7, "outcome labeling", &failures, &detail);
}

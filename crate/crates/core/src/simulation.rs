//! Closed-loop episode engine at a fixed 1 ms step.
//!
//! Per step: true contact wrench, detection and gating on the observer
//! estimate, controller command, plant integration, observer update. The plant
//! integrates the true contact wrench; the observer only sees the motor
//! command, the (optionally noisy) measured velocity and its own model.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ContactClassifier, OracleClassifier, Prediction};
use crate::contact::{ContactKind, ContactScenario, ContactTracker};
use crate::controller::{Controller, ControlMode, ImpedanceGains, ModeKind, ReactionConfig};
use crate::dynamics::{DynamicsTerms, RobotModel, RobotState};
use crate::error::{Error, Result};
use crate::kinematics;
use crate::observer::{self, ObserverConfig, ObserverState};
use crate::reaction::{self, GateHold};

/// Engine timing and episode-termination settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Control and integration step [s].
    pub dt: f64,
    /// Samples averaged before the gate decides.
    pub classification_window: usize,
    /// A clamping episode ends once the contact force stays below this [N] ...
    pub release_force: f64,
    /// ... held for this long [s].
    pub release_time: f64,
    /// Abort when the condition number of the actuator Jacobian exceeds this.
    pub singularity_limit: f64,
    /// Post-detection span whose estimates are kept as classifier features [s].
    pub feature_window: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            classification_window: 10,
            release_force: 0.5,
            release_time: 0.2,
            singularity_limit: 1e6,
            feature_window: 0.1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.01) {
            return Err(Error::Config("dt must lie in (0, 10 ms]".into()));
        }
        if self.classification_window == 0 {
            return Err(Error::Config("classification_window must be >= 1".into()));
        }
        if !(self.release_force >= 0.0 && self.release_time >= 0.0 && self.feature_window >= 0.0) {
            return Err(Error::Config("release and feature settings must be >= 0".into()));
        }
        if !(self.singularity_limit > 1.0) {
            return Err(Error::Config("singularity_limit must be > 1".into()));
        }
        Ok(())
    }
}

/// Everything an episode needs apart from the scenario.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Engine {
    pub model: RobotModel,
    pub observer: ObserverConfig,
    pub gains: ImpedanceGains,
    pub reactions: ReactionConfig,
    pub thresholds: [f64; 3],
    pub sim: SimulationConfig,
}

impl Engine {
    pub fn new(model: RobotModel) -> Self {
        Self { model, thresholds: observer::DEFAULT_THRESHOLDS, ..Default::default() }
    }
}

/// How the gate turns a prediction into a mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gate {
    /// Reaction only when `p > p_th`, zero-g otherwise.
    Threshold(f64),
    /// Always the reaction of the predicted class.
    Optimal,
    /// Always zero-g.
    ZeroG,
}

/// Source of class probabilities during an episode.
#[derive(Clone, Copy)]
pub enum ClassifierChoice<'a> {
    /// No model: zero-g as soon as contact is detected.
    None,
    Model(&'a dyn ContactClassifier),
    /// Ground truth with the given confidence.
    Oracle { confidence: f64 },
}

#[derive(Clone, Copy)]
pub struct EpisodeOptions<'a> {
    pub classifier: ClassifierChoice<'a>,
    pub gate: Gate,
    /// Seed of the measurement noise.
    pub seed: u64,
    pub record_trace: bool,
    /// Overrides the scenario's episode length [s].
    pub duration: Option<f64>,
    /// End the episode once the feature window after detection is complete.
    pub stop_after_features: bool,
}

impl Default for EpisodeOptions<'_> {
    fn default() -> Self {
        Self { classifier: ClassifierChoice::None, gate: Gate::Threshold(0.75), seed: 0, record_trace: false, duration: None, stop_after_features: false }
    }
}

/// One recorded step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: [f64; 3],
    pub xdot: [f64; 3],
    /// `(q_a, q_p, q_c)` per chain.
    pub q: [f64; 9],
    pub f_m: [f64; 3],
    pub f_hat: [f64; 3],
    /// True contact wrench on the platform.
    pub wrench: [f64; 3],
    /// True contact force magnitude [N].
    pub force: f64,
    pub mode: ModeKind,
    pub prediction: Option<Prediction>,
}

/// Observer estimate kept for the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub t: f64,
    pub f_hat: [f64; 3],
}

/// Per-episode facts needed for outcome labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub truth: ContactKind,
    pub detection_time: Option<f64>,
    /// Instant the mode was latched.
    pub reaction_time: Option<f64>,
    pub prediction: Option<Prediction>,
    /// Latched mode (nominal when nothing was detected).
    pub mode: ModeKind,
    /// Mode the gate asked for before any fallback.
    pub requested: ModeKind,
    /// Chain that structure opening acts on.
    pub reaction_chain: usize,
    /// Retraction direction implied by the estimate at the gate instant.
    pub retraction_direction: Option<[f64; 3]>,
    /// Clamp-angle gradient of `reaction_chain` at the gate instant.
    pub opening_gradient: Option<[f64; 3]>,
    /// Largest true contact force before the reaction [N].
    pub pre_peak: f64,
    /// Largest true contact force from the reaction on [N].
    pub post_peak: f64,
    pub end_time: f64,
    pub steps: usize,
    pub stopped_early: bool,
    /// Why a requested reaction fell back to zero-g.
    pub fallback: Option<String>,
}

impl EpisodeSummary {
    pub fn detected(&self) -> bool {
        self.detection_time.is_some()
    }

    pub fn peak(&self) -> f64 {
        self.pre_peak.max(self.post_peak)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scenario: ContactScenario,
    pub summary: EpisodeSummary,
    pub features: Vec<FeatureSample>,
    pub trace: Option<Vec<Sample>>,
    /// SHA-256 over the sampled trajectory.
    pub hash: String,
}

struct Measurement {
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Measurement {
    fn velocity(&mut self, state: &RobotState, terms: &DynamicsTerms) -> Vector3<f64> {
        match &self.noise {
            None => state.xdot,
            Some(n) => {
                let jac = &terms.jacobians;
                let qdot = jac.j_qax() * state.xdot;
                let noisy = qdot + Vector3::from_fn(|_, _| n.sample(&mut self.rng));
                jac.j_xqa * noisy
            }
        }
    }
}

fn condition(terms: &DynamicsTerms) -> f64 {
    let s = terms.jacobians.j_xqa.singular_values();
    let lo = s.min();
    if lo > 0.0 {
        s.max() / lo
    } else {
        f64::INFINITY
    }
}

/// Runs one episode from rest at the scenario's starting pose.
pub fn run_episode(engine: &Engine, scenario: &ContactScenario, options: &EpisodeOptions) -> Result<Episode> {
    let model = &engine.model;
    let dt = engine.sim.dt;
    let steps = (options.duration.unwrap_or(scenario.duration) / dt).round() as usize;

    let exact_observer = engine.observer.inertia_mismatch == 1.0 && engine.observer.velocity_noise_std == 0.0;
    let observer_model = RobotModel {
        params: model.params.scaled_inertia(engine.observer.inertia_mismatch),
        ..model.clone()
    };
    let mut meas = Measurement {
        rng: ChaCha8Rng::seed_from_u64(options.seed),
        noise: (engine.observer.velocity_noise_std > 0.0)
            .then(|| Normal::new(0.0, engine.observer.velocity_noise_std))
            .transpose()
            .map_err(|e| Error::Config(format!("velocity noise: {e}")))?,
    };
    let observer_terms = |state: &RobotState, terms: &DynamicsTerms, xdot_m: &Vector3<f64>| -> Result<DynamicsTerms> {
        if exact_observer {
            Ok(terms.clone())
        } else {
            observer_model.terms(&RobotState { xdot: *xdot_m, ..state.clone() })
        }
    };

    let oracle;
    let classifier: Option<&dyn ContactClassifier> = match options.classifier {
        ClassifierChoice::None => None,
        ClassifierChoice::Model(m) => Some(m),
        ClassifierChoice::Oracle { confidence } => {
            oracle = OracleClassifier { class: scenario.kind, confidence };
            Some(&oracle)
        }
    };

    let nominal = scenario.nominal_trajectory();
    let mut controller = Controller::new(engine.gains.clone(), engine.reactions.clone(), nominal);
    let mut tracker = ContactTracker::new(scenario.clone());
    let mut state = model.state(nominal.origin, Vector3::zeros())?;
    let mut terms = model.terms(&state)?;
    let mut xdot_m = meas.velocity(&state, &terms);
    let mut obs_terms = observer_terms(&state, &terms, &xdot_m)?;
    let mut obs = ObserverState::from_config(&engine.observer, &obs_terms.mass, &xdot_m);

    let reaction_chain = scenario.reaction_chain(model);
    // only clamping episodes end at release; collisions run their full length
    let may_stop_early = scenario.kind == ContactKind::Clamping;
    let mut summary = EpisodeSummary {
        truth: scenario.kind,
        detection_time: None,
        reaction_time: None,
        prediction: None,
        mode: ModeKind::Nominal,
        requested: ModeKind::Nominal,
        reaction_chain,
        retraction_direction: None,
        opening_gradient: None,
        pre_peak: 0.0,
        post_peak: 0.0,
        end_time: 0.0,
        steps: 0,
        stopped_early: false,
        fallback: None,
    };
    let mut hold = GateHold::new(engine.sim.classification_window);
    let mut features = Vec::new();
    let mut trace = options.record_trace.then(|| Vec::with_capacity(steps));
    let mut hasher = Sha256::new();
    let mut released_for = 0.0;
    let mut prediction = None;

    for k in 0..steps {
        let t = k as f64 * dt;
        let cond = condition(&terms);
        if !(cond <= engine.sim.singularity_limit) {
            return Err(Error::SingularityAbort { t, condition: cond });
        }
        let contact = tracker.evaluate(t, &state, model, &terms.jacobians);
        let f_hat = obs.estimate;

        // detection and gate
        if summary.detection_time.is_none() && observer::detect_contact(&f_hat, &engine.thresholds).any {
            summary.detection_time = Some(t);
            if classifier.is_none() {
                summary.requested = ModeKind::ZeroG;
                latch(&mut controller, &mut summary, ControlMode::ZeroG, &state, t);
            }
        }
        if let Some(t_det) = summary.detection_time {
            if t - t_det < engine.sim.feature_window - 1e-9 {
                features.push(FeatureSample { t, f_hat: [f_hat.x, f_hat.y, f_hat.z] });
            }
            if let (Some(c), None) = (classifier, summary.reaction_time) {
                if let Some(p) = hold.push(c.probabilities(&f_hat)?) {
                    prediction = Some(p);
                    summary.prediction = Some(p);
                    let kind = match options.gate {
                        Gate::Threshold(p_th) => reaction::select_reaction(true, &p, p_th),
                        Gate::Optimal => reaction::optimal_reaction(p.class),
                        Gate::ZeroG => ModeKind::ZeroG,
                    };
                    summary.requested = kind;
                    let jac = &terms.jacobians;
                    summary.retraction_direction = crate::controller::retraction_command(&f_hat)
                        .ok()
                        .and_then(|m| match m {
                            ControlMode::Retraction { direction } => Some([direction.x, direction.y, direction.z]),
                            _ => None,
                        });
                    let g = kinematics::clamp_angle_gradient(&state.q, jac, reaction_chain);
                    summary.opening_gradient = Some([g.x, g.y, g.z]);
                    let (mode, why) = reaction::realize(kind, &f_hat, reaction_chain, &state.q, jac);
                    summary.fallback = why.map(|e| e.to_string());
                    latch(&mut controller, &mut summary, mode, &state, t);
                }
            }
        }

        let f_m = controller.command(model, t, dt, &state, &terms);

        if summary.reaction_time.is_some() {
            summary.post_peak = summary.post_peak.max(contact.force);
        } else {
            summary.pre_peak = summary.pre_peak.max(contact.force);
        }
        for v in state.x.iter().chain(f_hat.iter()).chain(contact.wrench.iter()) {
            hasher.update(v.to_le_bytes());
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(Sample {
                t,
                x: state.x.into(),
                xdot: state.xdot.into(),
                q: state.q.stacked().into(),
                f_m: f_m.into(),
                f_hat: f_hat.into(),
                wrench: contact.wrench.into(),
                force: contact.force,
                mode: controller.mode().kind(),
                prediction,
            });
        }
        summary.steps = k + 1;
        summary.end_time = t;
        if options.stop_after_features
            && summary.detection_time.is_some_and(|t_det| t - t_det >= engine.sim.feature_window - dt - 1e-9)
        {
            summary.stopped_early = k + 1 < steps;
            break;
        }

        if may_stop_early && summary.reaction_time.is_some() {
            if contact.force < engine.sim.release_force {
                released_for += dt;
                if released_for >= engine.sim.release_time - 1e-9 {
                    summary.stopped_early = k + 1 < steps;
                    break;
                }
            } else {
                released_for = 0.0;
            }
        }

        let beta = observer::beta_hat(&obs_terms, &xdot_m);
        let next = model.step(&state, &terms, &f_m, &contact.wrench, dt)?;
        let next_terms = model.terms(&next)?;
        xdot_m = meas.velocity(&next, &next_terms);
        obs_terms = observer_terms(&next, &next_terms, &xdot_m)?;
        obs = observer::observer_step(&obs, &f_m, &beta, &obs_terms.mass, &xdot_m, dt);
        state = next;
        terms = next_terms;
    }

    Ok(Episode {
        scenario: scenario.clone(),
        summary,
        features,
        trace,
        hash: hex::encode(hasher.finalize()),
    })
}

fn latch(controller: &mut Controller, summary: &mut EpisodeSummary, mode: ControlMode, state: &RobotState, t: f64) {
    controller.set_mode(mode, state);
    summary.mode = mode.kind();
    summary.reaction_time = Some(t);
}

/// Seed of episode `index` within a batch seeded with `seed`.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs every scenario with its own derived seed; results keep the input order
/// and do not depend on `workers`.
pub fn run_batch(
    engine: &Engine,
    scenarios: &[ContactScenario],
    options: &EpisodeOptions,
    seed: u64,
    workers: usize,
) -> Vec<Result<Episode>> {
    let job = |(i, s): (usize, &ContactScenario)| {
        let o = EpisodeOptions { seed: episode_seed(seed, i as u64), ..*options };
        run_episode(engine, s, &o)
    };
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(|| scenarios.par_iter().enumerate().map(job).collect()),
        Err(_) => scenarios.iter().enumerate().map(job).collect(),
    }
}

/// Writes a recorded trace as CSV.
pub fn write_trace<W: std::io::Write>(episode: &Episode, out: W) -> Result<()> {
    let trace = episode.trace.as_ref().ok_or_else(|| Error::Config("episode was run without a trace".into()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t", "x", "y", "phi", "xd", "yd", "phid", "fm_x", "fm_y", "fm_z", "fx_hat", "fy_hat", "mz_hat", "wx", "wy",
        "wz", "force", "mode", "pred_class", "pred_p",
    ])?;
    for s in trace {
        let mut row: Vec<String> = [s.t]
            .iter()
            .chain(&s.x)
            .chain(&s.xdot)
            .chain(&s.f_m)
            .chain(&s.f_hat)
            .chain(&s.wrench)
            .chain([s.force].iter())
            .map(|v| format!("{v:?}"))
            .collect();
        row.push(s.mode.as_str().into());
        row.push(s.prediction.map_or(String::new(), |p| p.class.as_str().into()));
        row.push(s.prediction.map_or(String::new(), |p| format!("{:?}", p.p)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

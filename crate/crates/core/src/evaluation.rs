//! Outcome labeling, confusion matrices and p_th sweeps.
//!
//! Every evaluated episode is simulated twice from the same seed: once with
//! the reaction of the predicted class and once with zero-g. Both forks share
//! the trajectory up to the gate instant, so a sweep only has to pick the fork
//! each cached probability selects.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ContactClassifier, Prediction};
use crate::contact::{ContactKind, ContactScenario};
use crate::controller::ModeKind;
use crate::error::{Error, Result};
use crate::simulation::{self, ClassifierChoice, Engine, EpisodeOptions, EpisodeSummary, Gate};

/// Relative force increase that counts as "raised".
pub const DFCR_MARGIN: f64 = 0.05;

/// Threshold grid of the sweep: 0.50 to 0.95 in steps of 0.05, then 0.99.
pub fn sweep_grid() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).chain([0.99]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    CorrectOptimal,
    CorrectSfr,
    Dfcr,
    Ldfcr,
    MisclassSfr,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::CorrectOptimal => "correct_optimal",
            Outcome::CorrectSfr => "correct_sfr",
            Outcome::Dfcr => "dfcr",
            Outcome::Ldfcr => "ldfcr",
            Outcome::MisclassSfr => "misclass_sfr",
        }
    }
}

/// Kind of false classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Misclass {
    None,
    /// True clamping predicted as collision.
    Fca,
    /// True collision predicted as clamping.
    Fcb,
}

impl Misclass {
    pub fn of(truth: ContactKind, predicted: ContactKind) -> Self {
        match (truth, predicted) {
            (ContactKind::Clamping, ContactKind::Collision) => Misclass::Fca,
            (ContactKind::Collision, ContactKind::Clamping) => Misclass::Fcb,
            _ => Misclass::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Misclass::None => "none",
            Misclass::Fca => "fca",
            Misclass::Fcb => "fcb",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeLabel {
    pub outcome: Outcome,
    pub misclass: Misclass,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Labels one episode from the executed run and, for misclassified episodes
/// with an executed reaction, the paired zero-g run from the same seed.
///
/// A misclassified reaction is dangerous when its post-reaction peak force
/// exceeds both the pre-reaction peak and what zero-g would have produced by
/// `margin`. For true clampings the retraction must in addition close the
/// clamp, i.e. point against the clamp-opening gradient.
pub fn label_outcome(
    executed: &EpisodeSummary,
    baseline: Option<&EpisodeSummary>,
    margin: f64,
) -> Result<OutcomeLabel> {
    let (Some(_), Some(pred)) = (executed.detection_time, executed.prediction) else {
        return Err(Error::NotDetected);
    };
    let misclass = Misclass::of(executed.truth, pred.class);
    let outcome = match (executed.mode, misclass) {
        (ModeKind::ZeroG, Misclass::None) => Outcome::CorrectSfr,
        (ModeKind::ZeroG, _) => Outcome::MisclassSfr,
        (_, Misclass::None) => Outcome::CorrectOptimal,
        (_, kind) => {
            let base = baseline.ok_or(Error::MissingBaseline)?;
            let reference = executed.pre_peak.max(base.post_peak);
            let raised = executed.post_peak > (1.0 + margin) * reference;
            let closes_clamp = match (executed.retraction_direction, executed.opening_gradient) {
                (Some(r), Some(g)) => dot(&r, &g) < 0.0,
                _ => false,
            };
            if raised && (kind == Misclass::Fcb || closes_clamp) {
                Outcome::Dfcr
            } else {
                Outcome::Ldfcr
            }
        }
    };
    Ok(OutcomeLabel { outcome, misclass })
}

/// Row-normalised 2x2 confusion matrix; rows are truth, columns prediction,
/// both ordered (collision, clamping).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 2]; 2],
    pub rates: [[f64; 2]; 2],
}

impl ConfusionMatrix {
    /// Share of true clampings predicted as collision.
    pub fn fca_rate(&self) -> f64 {
        self.rates[1][0]
    }

    /// Share of true collisions predicted as clamping.
    pub fn fcb_rate(&self) -> f64 {
        self.rates[0][1]
    }
}

pub fn confusion_matrix(pairs: impl IntoIterator<Item = (ContactKind, ContactKind)>) -> Result<ConfusionMatrix> {
    let mut counts = [[0usize; 2]; 2];
    for (truth, pred) in pairs {
        counts[truth.index()][pred.index()] += 1;
    }
    let mut rates = [[0.0; 2]; 2];
    for (row, kind) in [ContactKind::Collision, ContactKind::Clamping].into_iter().enumerate() {
        let n = counts[row][0] + counts[row][1];
        if n == 0 {
            return Err(Error::EmptyClass(kind.as_str()));
        }
        for col in 0..2 {
            rates[row][col] = counts[row][col] as f64 / n as f64;
        }
    }
    Ok(ConfusionMatrix { counts, rates })
}

/// An episode with both gate forks simulated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedEpisode {
    /// Position in the evaluated scenario list.
    pub index: usize,
    pub archetype: usize,
    pub config_id: usize,
    pub truth: ContactKind,
    pub prediction: Prediction,
    /// Fork with the reaction of the predicted class.
    pub optimal: EpisodeSummary,
    /// Fork with zero-g from the gate instant.
    pub zero_g: EpisodeSummary,
}

impl EvaluatedEpisode {
    pub fn misclass(&self) -> Misclass {
        Misclass::of(self.truth, self.prediction.class)
    }

    /// Fork the gate executes at `p_th`.
    pub fn executed(&self, p_th: f64) -> &EpisodeSummary {
        if self.prediction.p > p_th {
            &self.optimal
        } else {
            &self.zero_g
        }
    }

    pub fn outcome_at(&self, p_th: f64, margin: f64) -> Result<OutcomeLabel> {
        label_outcome(self.executed(p_th), Some(&self.zero_g), margin)
    }
}

/// Result of evaluating a scenario list.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub episodes: Vec<EvaluatedEpisode>,
    /// Scenarios whose contact was never detected.
    pub undetected: Vec<usize>,
    /// Scenarios whose simulation failed, with the reason.
    pub failed: Vec<(usize, String)>,
}

impl Evaluation {
    pub fn confusion(&self) -> Result<ConfusionMatrix> {
        confusion_matrix(self.episodes.iter().map(|e| (e.truth, e.prediction.class)))
    }
}

fn evaluate_one(
    engine: &Engine,
    scenario: &ContactScenario,
    classifier: &dyn ContactClassifier,
    seed: u64,
) -> Result<Option<(EpisodeSummary, EpisodeSummary)>> {
    let opts = |gate| EpisodeOptions { classifier: ClassifierChoice::Model(classifier), gate, seed, ..Default::default() };
    let optimal = simulation::run_episode(engine, scenario, &opts(Gate::Optimal))?.summary;
    if optimal.prediction.is_none() {
        return Ok(None);
    }
    let zero_g = simulation::run_episode(engine, scenario, &opts(Gate::ZeroG))?.summary;
    Ok(Some((optimal, zero_g)))
}

/// Simulates both forks of every scenario. Episode `i` uses
/// `episode_seed(seed, i)`; results do not depend on `workers`.
pub fn evaluate(
    engine: &Engine,
    scenarios: &[ContactScenario],
    classifier: &dyn ContactClassifier,
    seed: u64,
    workers: usize,
) -> Evaluation {
    let job = |(i, s): (usize, &ContactScenario)| evaluate_one(engine, s, classifier, simulation::episode_seed(seed, i as u64));
    let results: Vec<_> = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(|| scenarios.par_iter().enumerate().map(job).collect()),
        Err(_) => scenarios.iter().enumerate().map(job).collect(),
    };
    let mut out = Evaluation::default();
    for (i, (scenario, r)) in scenarios.iter().zip(results).enumerate() {
        match r {
            Ok(Some((optimal, zero_g))) => out.episodes.push(EvaluatedEpisode {
                index: i,
                archetype: scenario.archetype,
                config_id: scenario.config_id,
                truth: scenario.kind,
                prediction: optimal.prediction.expect("checked in evaluate_one"),
                optimal,
                zero_g,
            }),
            Ok(None) => out.undetected.push(i),
            Err(e) => out.failed.push((i, e.to_string())),
        }
    }
    out
}

/// Episode subsets the sweep reports on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Fca,
    Fcb,
    /// FCA and FCB together.
    Misclassified,
    CorrectClamping,
    CorrectCollision,
}

impl Family {
    pub const ALL: [Family; 5] =
        [Family::Fca, Family::Fcb, Family::Misclassified, Family::CorrectClamping, Family::CorrectCollision];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Fca => "fca",
            Family::Fcb => "fcb",
            Family::Misclassified => "misclassified",
            Family::CorrectClamping => "correct_clamping",
            Family::CorrectCollision => "correct_collision",
        }
    }

    pub fn contains(self, e: &EvaluatedEpisode) -> bool {
        let m = e.misclass();
        match self {
            Family::Fca => m == Misclass::Fca,
            Family::Fcb => m == Misclass::Fcb,
            Family::Misclassified => m != Misclass::None,
            Family::CorrectClamping => m == Misclass::None && e.truth == ContactKind::Clamping,
            Family::CorrectCollision => m == Misclass::None && e.truth == ContactKind::Collision,
        }
    }
}

/// Outcome shares of one family at one threshold. For misclassified families
/// `dfcr + ldfcr + sfr = 1`; for correct families `optimal + sfr = 1`. An
/// empty family has NaN shares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p_th: f64,
    pub family: Family,
    pub episodes: usize,
    pub dfcr: f64,
    pub ldfcr: f64,
    pub sfr: f64,
    pub optimal: f64,
}

pub fn sweep_row(episodes: &[EvaluatedEpisode], family: Family, p_th: f64, margin: f64) -> Result<SweepRow> {
    let mut counts = [0usize; 5];
    let mut n = 0;
    for e in episodes.iter().filter(|e| family.contains(e)) {
        n += 1;
        counts[e.outcome_at(p_th, margin)?.outcome as usize] += 1;
    }
    let share = |c: usize| if n == 0 { f64::NAN } else { c as f64 / n as f64 };
    Ok(SweepRow {
        p_th,
        family,
        episodes: n,
        dfcr: share(counts[Outcome::Dfcr as usize]),
        ldfcr: share(counts[Outcome::Ldfcr as usize]),
        sfr: share(counts[Outcome::CorrectSfr as usize] + counts[Outcome::MisclassSfr as usize]),
        optimal: share(counts[Outcome::CorrectOptimal as usize]),
    })
}

/// Re-gates the cached predictions at every threshold of `grid`. Rows are
/// ordered by threshold, then by `Family::ALL`.
pub fn threshold_sweep(episodes: &[EvaluatedEpisode], grid: &[f64], margin: f64) -> Result<Vec<SweepRow>> {
    grid.iter()
        .flat_map(|&p| Family::ALL.map(|f| (p, f)))
        .map(|(p, f)| sweep_row(episodes, f, p, margin))
        .collect()
}

/// Writes the sweep as CSV, preceded by a `# config_hash=` comment line.
pub fn write_sweep<W: std::io::Write>(rows: &[SweepRow], config_hash: &str, mut out: W) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p_th", "family", "episodes", "dfcr", "ldfcr", "sfr", "optimal"])?;
    for r in rows {
        w.write_record([
            format!("{:?}", r.p_th),
            r.family.as_str().to_string(),
            r.episodes.to_string(),
            format!("{:?}", r.dfcr),
            format!("{:?}", r.ldfcr),
            format!("{:?}", r.sfr),
            format!("{:?}", r.optimal),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a sweep CSV written by [`write_sweep`].
pub fn read_sweep<R: std::io::Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Parse(format!("sweep row has {} fields", rec.len())));
        }
        let family = Family::ALL
            .into_iter()
            .find(|f| f.as_str() == &rec[1])
            .ok_or_else(|| Error::Parse(format!("unknown family {:?}", &rec[1])))?;
        rows.push(SweepRow {
            p_th: num(&rec[0])?,
            family,
            episodes: rec[2].parse().map_err(|e| Error::Parse(format!("episodes: {e}")))?,
            dfcr: num(&rec[3])?,
            ldfcr: num(&rec[4])?,
            sfr: num(&rec[5])?,
            optimal: num(&rec[6])?,
        });
    }
    Ok(rows)
}

/// Per-episode labels at one threshold as CSV.
pub fn write_outcomes<W: std::io::Write>(
    episodes: &[EvaluatedEpisode],
    p_th: f64,
    margin: f64,
    config_hash: &str,
    mut out: W,
) -> Result<()> {
    writeln!(out, "# config_hash={config_hash} p_th={p_th:?} labeling=per_episode")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "index", "archetype", "config_id", "truth", "predicted", "p", "mode", "outcome", "misclass", "pre_peak",
        "post_peak", "zero_g_post_peak",
    ])?;
    for e in episodes {
        let label = e.outcome_at(p_th, margin)?;
        let ex = e.executed(p_th);
        w.write_record([
            e.index.to_string(),
            e.archetype.to_string(),
            e.config_id.to_string(),
            e.truth.as_str().into(),
            e.prediction.class.as_str().into(),
            format!("{:?}", e.prediction.p),
            ex.mode.as_str().into(),
            label.outcome.as_str().into(),
            label.misclass.as_str().into(),
            format!("{:?}", ex.pre_peak),
            format!("{:?}", ex.post_peak),
            format!("{:?}", e.zero_g.post_peak),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn row(rows: &[SweepRow], family: Family, p_th: f64) -> Option<&SweepRow> {
    rows.iter().find(|r| r.family == family && r.p_th == p_th)
}

/// Verdict of one trend check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    /// Fewer misclassified episodes than the check needs.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: &'static str,
    pub verdict: Verdict,
    pub detail: String,
}

fn non_decreasing(rows: &[SweepRow], family: Family, grid: &[f64], value: impl Fn(&SweepRow) -> f64) -> bool {
    let v: Vec<f64> = grid.iter().filter_map(|p| row(rows, family, *p)).map(value).collect();
    v.len() == grid.len() && v.windows(2).all(|w| w[1] >= w[0] || (w[0].is_nan() && w[1].is_nan()))
}

/// Checks the qualitative sweep pattern: fallback shares rise with p_th,
/// misclassified collisions are more often dangerous than misclassified
/// clampings, and clampings fall back at least as often as collisions at the
/// top threshold. Share comparisons need `min_misclassified` episodes in both
/// misclassified families.
pub fn trend_checks(rows: &[SweepRow], grid: &[f64], min_misclassified: usize) -> Vec<TrendCheck> {
    let (Some(&lo), Some(&hi)) = (grid.first(), grid.last()) else {
        return Vec::new();
    };
    let n = |f| row(rows, f, lo).map_or(0, |r| r.episodes);
    let (n_fca, n_fcb) = (n(Family::Fca), n(Family::Fcb));
    let enough = n_fca >= min_misclassified && n_fcb >= min_misclassified;
    let gate = |ok: bool| if ok { Verdict::Pass } else { Verdict::Fail };
    let counted = |ok: bool| if !enough { Verdict::Inconclusive } else { gate(ok) };

    let mono_mis = [Family::Fca, Family::Fcb].iter().all(|f| non_decreasing(rows, *f, grid, |r| r.sfr));
    let sfr_hi: Vec<f64> = [Family::Fca, Family::Fcb].iter().map(|f| row(rows, *f, hi).map_or(f64::NAN, |r| r.sfr)).collect();
    let dfcr_lo: Vec<f64> = [Family::Fca, Family::Fcb].iter().map(|f| row(rows, *f, lo).map_or(f64::NAN, |r| r.dfcr)).collect();
    let mono_ok =
        [Family::CorrectClamping, Family::CorrectCollision].iter().all(|f| non_decreasing(rows, *f, grid, |r| r.sfr));
    let ok_hi: Vec<f64> = [Family::CorrectClamping, Family::CorrectCollision]
        .iter()
        .map(|f| row(rows, *f, hi).map_or(f64::NAN, |r| r.sfr))
        .collect();
    vec![
        TrendCheck {
            name: "misclassified SFR share non-decreasing and >= 50% at top threshold",
            verdict: counted(mono_mis && sfr_hi.iter().all(|s| *s >= 0.5)),
            detail: format!("FCA n={n_fca} SFR@{hi}={:.3}; FCB n={n_fcb} SFR@{hi}={:.3}", sfr_hi[0], sfr_hi[1]),
        },
        TrendCheck {
            name: "FCB DFCR share > FCA DFCR share at lowest threshold",
            verdict: counted(dfcr_lo[1] > dfcr_lo[0]),
            detail: format!("FCA DFCR@{lo}={:.3}; FCB DFCR@{lo}={:.3}", dfcr_lo[0], dfcr_lo[1]),
        },
        TrendCheck {
            name: "correct-class SFR non-decreasing and clamping >= collision at top threshold",
            verdict: gate(mono_ok && ok_hi[0] >= ok_hi[1]),
            detail: format!("clamping SFR@{hi}={:.3}; collision SFR@{hi}={:.3}", ok_hi[0], ok_hi[1]),
        },
    ]
}

/// Human-readable report of the confusion matrix and the endpoint shares.
pub fn summary_text(evaluation: &Evaluation, rows: &[SweepRow], grid: &[f64]) -> String {
    let mut s = String::new();
    if let Ok(c) = evaluation.confusion() {
        s += "confusion (rows truth, cols predicted; collision, clamping)\n";
        for (name, r) in ["collision", "clamping"].iter().zip(0..2) {
            s += &format!("  {name:<9} {:.3} {:.3}   (n={})\n", c.rates[r][0], c.rates[r][1], c.counts[r][0] + c.counts[r][1]);
        }
    }
    s += &format!(
        "episodes {} undetected {} failed {}\n",
        evaluation.episodes.len(),
        evaluation.undetected.len(),
        evaluation.failed.len()
    );
    for p in [grid.first(), grid.last()].into_iter().flatten() {
        for r in rows.iter().filter(|r| r.p_th == *p) {
            s += &format!(
                "  p_th={:.2} {:<17} n={:<4} dfcr={:.3} ldfcr={:.3} sfr={:.3} optimal={:.3}\n",
                r.p_th,
                r.family.as_str(),
                r.episodes,
                r.dfcr,
                r.ldfcr,
                r.sfr,
                r.optimal
            );
        }
    }
    s
}

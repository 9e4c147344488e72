//! Labeled observer features from simulated contact episodes.
//!
//! Each round samples a fresh set of scenario archetypes and simulates them
//! until contact is detected and the feature window has passed. The robot
//! behaves as it would in deployment: nominal control during the gate hold,
//! zero-g afterwards.

use serde::{Deserialize, Serialize};

use crate::classifier::LabeledSet;
use crate::contact::{sample_scenarios, ContactKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::simulation::{self, ClassifierChoice, Engine, EpisodeOptions, Gate};

/// One feature row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub episode_id: u64,
    /// Time since episode start [s].
    pub t: f64,
    pub config_id: usize,
    pub fx_hat: f64,
    pub fy_hat: f64,
    pub mz_hat: f64,
    /// 0 for collision, 1 for clamping.
    pub label: usize,
    pub scenario_kind: ContactKind,
    /// 1-based chain, 0 for the platform.
    pub chain: usize,
    /// 1 proximal, 2 distal, 0 for the platform.
    pub link: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Generation stops after the first round that reaches this many rows.
    pub target_rows: usize,
    /// Upper bound on rounds, in case detection rarely fires.
    pub max_rounds: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { target_rows: 80_000, max_rounds: 400 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_rows == 0 || self.max_rounds == 0 {
            return Err(Error::Config("target_rows and max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
    pub episodes: usize,
    pub undetected: usize,
    /// Episodes whose simulation failed, with the reason.
    pub failed: Vec<(u64, String)>,
}

impl Dataset {
    /// Rows of the given joint configurations as a classifier training set.
    pub fn labeled(&self, configs: &[usize]) -> LabeledSet {
        let mut set = LabeledSet::default();
        for r in self.rows.iter().filter(|r| configs.contains(&r.config_id)) {
            set.push([r.fx_hat, r.fy_hat, r.mz_hat], r.scenario_kind, r.episode_id);
        }
        set
    }

    pub fn config_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.config_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Simulates rounds of archetypes until `config.target_rows` rows exist.
pub fn generate(
    engine: &Engine,
    scenarios: &ScenarioConfig,
    config: &DatasetConfig,
    seed: u64,
    workers: usize,
) -> Result<Dataset> {
    let options = EpisodeOptions {
        // ground-truth confidence below any threshold: the hold runs, then zero-g
        classifier: ClassifierChoice::Oracle { confidence: 0.5 },
        gate: Gate::ZeroG,
        stop_after_features: true,
        ..Default::default()
    };
    let mut out = Dataset::default();
    let mut next_id = 0u64;
    for round in 0..config.max_rounds as u64 {
        if out.rows.len() >= config.target_rows {
            break;
        }
        let round_seed = simulation::episode_seed(seed, round);
        let list = sample_scenarios(&engine.model, &engine.gains.stiffness, scenarios, round_seed)?;
        let results = simulation::run_batch(engine, &list, &options, round_seed, workers);
        for (scenario, r) in list.iter().zip(results) {
            let id = next_id;
            next_id += 1;
            out.episodes += 1;
            let ep = match r {
                Ok(ep) => ep,
                Err(e) => {
                    out.failed.push((id, e.to_string()));
                    continue;
                }
            };
            if ep.features.is_empty() {
                out.undetected += 1;
            }
            for f in &ep.features {
                out.rows.push(DatasetRow {
                    episode_id: id,
                    t: f.t,
                    config_id: scenario.config_id,
                    fx_hat: f.f_hat[0],
                    fy_hat: f.f_hat[1],
                    mz_hat: f.f_hat[2],
                    label: scenario.kind.index(),
                    scenario_kind: scenario.kind,
                    chain: scenario.site.chain_number(),
                    link: scenario.site.link_number(),
                });
            }
        }
    }
    Ok(out)
}

const COLUMNS: [&str; 10] =
    ["episode_id", "t", "config_id", "fx_hat", "fy_hat", "mz_hat", "label", "scenario_kind", "chain", "link"];

/// Writes rows as CSV behind a `# config_hash=` line.
pub fn write_csv<W: std::io::Write>(rows: &[DatasetRow], config_hash: &str, mut out: W) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.episode_id.to_string(),
            format!("{:?}", r.t),
            r.config_id.to_string(),
            format!("{:?}", r.fx_hat),
            format!("{:?}", r.fy_hat),
            format!("{:?}", r.mz_hat),
            r.label.to_string(),
            r.scenario_kind.as_str().to_string(),
            r.chain.to_string(),
            r.link.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]; returns the rows and the embedded
/// config hash, if any.
pub fn read_csv<R: std::io::Read>(mut input: R) -> Result<(Vec<DatasetRow>, Option<String>)> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let hash = text.lines().next().and_then(|l| l.trim().strip_prefix("# config_hash=")).map(str::to_string);
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(Error::Parse(format!("unexpected dataset columns {headers:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("dataset row {}: bad {what}", line + 1));
        let f = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what));
        let u = |i: usize, what: &str| rec[i].parse::<usize>().map_err(|_| bad(what));
        let kind = match &rec[7] {
            "collision" => ContactKind::Collision,
            "clamping" => ContactKind::Clamping,
            _ => return Err(bad("scenario_kind")),
        };
        let label = u(6, "label")?;
        if label != kind.index() {
            return Err(bad("label (disagrees with scenario_kind)"));
        }
        rows.push(DatasetRow {
            episode_id: rec[0].parse().map_err(|_| bad("episode_id"))?,
            t: f(1, "t")?,
            config_id: u(2, "config_id")?,
            fx_hat: f(3, "fx_hat")?,
            fy_hat: f(4, "fy_hat")?,
            mz_hat: f(5, "mz_hat")?,
            label,
            scenario_kind: kind,
            chain: u(8, "chain")?,
            link: u(9, "link")?,
        });
    }
    Ok((rows, hash))
}

//! Experiment cells, seed fan-out and aggregation.
//!
//! A cell is one `(assistant, seed)` pair. Each cell writes into its own
//! directory `<out>/<assistant>/seed-<seed>/`:
//!
//! * `eval.csv`: `episode,success,steps` for the final evaluation episodes
//! * `metrics.csv`: per-epoch training metrics (learning assistants only)
//! * `checkpoint.json`: encoders and critic (learning assistants, when enabled)
//!
//! The experiment directory gets `aggregate.csv` and `manifest.json`. Cells
//! run on a bounded pool of threads; every cell draws randomness only from
//! its own seed, so results do not depend on the pool size or order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{
    assistant_action, evaluate, rollout, train_esr, write_metrics_csv, AgentCheckpoint, AssistEnv, EvalStats, GridEnv,
    RewardMode, TrainConfig,
};
use crate::baselines::{ave_action, random_action, AveConfig, OracleLookahead};
use crate::error::{Error, Result};
use crate::features::Featurizer;
use crate::grid::{GridConfig, DEFAULT_HORIZON, NOOP};
use crate::human::GridHuman;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "EMPOWER_WORKERS";
pub const DEFAULT_CELL_BUDGET_SECS: u64 = 2 * 60 * 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssistantKind {
    Esr,
    EsrSimplified,
    /// Encoders without the robot action in the conditioning.
    EsrNoAr,
    /// `gamma_rl = 0`: the critic maximizes the immediate reward only.
    EsrGreedy,
    Ave,
    Random,
    /// The robot always plays the no-op.
    None,
    OracleEmpowerment,
}

impl AssistantKind {
    pub const ALL: [AssistantKind; 8] = [
        Self::Esr,
        Self::EsrSimplified,
        Self::EsrNoAr,
        Self::EsrGreedy,
        Self::Ave,
        Self::Random,
        Self::None,
        Self::OracleEmpowerment,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Esr => "esr",
            Self::EsrSimplified => "esr-simplified",
            Self::EsrNoAr => "esr-no-ar",
            Self::EsrGreedy => "esr-greedy",
            Self::Ave => "ave",
            Self::Random => "random",
            Self::None => "none",
            Self::OracleEmpowerment => "oracle-empowerment",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Self::Esr | Self::EsrSimplified | Self::EsrNoAr | Self::EsrGreedy)
    }

    /// The training config of a learned variant.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::EsrSimplified => c.reward_mode = RewardMode::Simplified,
            Self::EsrNoAr => c.repr.condition_on_robot = false,
            Self::EsrGreedy => c.gamma_rl = 0.0,
            _ => {}
        }
        c
    }
}

impl fmt::Display for AssistantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.tag())
    }
}

impl FromStr for AssistantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown assistant tag {s:?}")))
    }
}

/// Grid layout. Without `goal_cell` the goal is drawn from `layout_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub num_blocks: usize,
    pub goal_cell: Option<usize>,
    pub horizon: usize,
    pub layout_seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            num_blocks: 2,
            goal_cell: None,
            horizon: DEFAULT_HORIZON,
            layout_seed: 0,
        }
    }
}

impl GridSpec {
    pub fn to_config(&self) -> Result<GridConfig> {
        let c = match self.goal_cell {
            Some(g) => GridConfig::new(self.width, self.height, self.num_blocks, g, self.layout_seed)?,
            None => GridConfig::from_seed(self.width, self.height, self.num_blocks, self.layout_seed)?,
        };
        c.with_horizon(self.horizon)
    }
}

/// The simulated human: a Boltzmann planner toward the goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanSpec {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for HumanSpec {
    fn default() -> Self {
        Self { beta: 5.0, gamma: 0.9 }
    }
}

impl HumanSpec {
    pub fn build(&self) -> Result<GridHuman> {
        if !(self.beta >= 0.0) || !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("human needs beta >= 0 and gamma in [0,1)".into()));
        }
        Ok(GridHuman::new(self.beta, self.gamma))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub grid: GridSpec,
    pub assistants: Vec<AssistantKind>,
    pub human: HumanSpec,
    pub train: TrainConfig,
    pub ave: AveConfig,
    /// Evaluation episodes for the assistants that are not trained.
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub cell_budget_secs: u64,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            grid: GridSpec::default(),
            assistants: vec![AssistantKind::Esr],
            human: HumanSpec::default(),
            train: TrainConfig::default(),
            ave: AveConfig::default(),
            eval_episodes: 50,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            cell_budget_secs: DEFAULT_CELL_BUDGET_SECS,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.assistants.is_empty() {
            return Err(Error::Config("assistants must be nonempty".into()));
        }
        self.grid.to_config()?;
        self.human.build()?;
        if self.assistants.iter().any(|a| a.is_learned()) {
            self.train.validate()?;
        }
        if self.assistants.contains(&AssistantKind::Ave) {
            self.ave.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }
}

/// Worker count from [`WORKERS_ENV`], at least 1.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum CellStatus {
    Ok,
    /// The wall-clock budget stopped training after this many epochs.
    Truncated { epochs_completed: usize },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub assistant: AssistantKind,
    pub seed: u64,
    #[serde(flatten)]
    pub status: CellStatus,
    pub eval: Option<EvalStats>,
    /// Paths relative to the experiment directory.
    pub artifacts: Vec<PathBuf>,
    pub wall_secs: f64,
}

impl CellRecord {
    pub fn failed(&self) -> bool {
        matches!(self.status, CellStatus::Failed { .. })
    }
}

/// Mean and standard error over seeds of one assistant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub assistant: AssistantKind,
    pub seeds: usize,
    pub success_mean: f64,
    pub success_se: f64,
    /// Over seeds with at least one success.
    pub steps_mean: Option<f64>,
    pub steps_se: Option<f64>,
}

pub const AGGREGATE_COLUMNS: [&str; 6] = ["assistant", "seeds", "success_mean", "success_se", "steps_mean", "steps_se"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn num_failed(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `(mean, sample SD / sqrt(n))`; the SE is 0 for a single value.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// One aggregate row per assistant, in the order given, over the cells that
/// produced an evaluation.
pub fn aggregate_cells(assistants: &[AssistantKind], cells: &[CellRecord]) -> Vec<AggregateRow> {
    assistants
        .iter()
        .map(|&a| {
            let evals: Vec<&EvalStats> = cells
                .iter()
                .filter(|c| c.assistant == a && !c.failed())
                .filter_map(|c| c.eval.as_ref())
                .collect();
            let succ: Vec<f64> = evals.iter().map(|e| e.success_rate).collect();
            let steps: Vec<f64> = evals.iter().filter_map(|e| e.mean_steps_to_goal).collect();
            let (success_mean, success_se) = mean_se(&succ);
            let (steps_mean, steps_se) = if steps.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_se(&steps);
                (Some(m), Some(s))
            };
            AggregateRow {
                assistant: a,
                seeds: succ.len(),
                success_mean,
                success_se,
                steps_mean,
                steps_se,
            }
        })
        .collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_eval_csv(results: &[(bool, usize)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "success", "steps"])?;
    for (i, (s, n)) in results.iter().enumerate() {
        w.write_record([i.to_string(), (*s as u8).to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation with per-episode outcomes kept for `eval.csv`.
fn evaluate_logged<E: AssistEnv>(
    env: &E,
    seed: u64,
    episodes: usize,
    mut policy: impl FnMut(&E::Obs, &mut rand_chacha::ChaCha8Rng) -> Result<usize>,
) -> Result<(EvalStats, Vec<(bool, usize)>)> {
    let mut log = Vec::with_capacity(episodes);
    let stats = evaluate(env, seed, episodes, |obs, rng| policy(obs, rng))?;
    // the same seeds and policy replayed to list per-episode outcomes
    for i in 0..episodes {
        let ep_seed = crate::agent::eval_episode_seed(seed, i);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(ep_seed ^ 0x5EED);
        let (ep, success) = rollout(env, ep_seed, &mut rng, &mut policy)?;
        log.push((success, ep.len()));
    }
    Ok((stats, log))
}

struct CellOutput {
    eval: EvalStats,
    truncated: Option<usize>,
    artifacts: Vec<PathBuf>,
}

fn cell_dir(assistant: AssistantKind, seed: u64) -> PathBuf {
    PathBuf::from(assistant.tag()).join(format!("seed-{seed}"))
}

/// Runs one cell, writing its artifacts under `root`.
fn run_cell(config: &ExperimentConfig, assistant: AssistantKind, seed: u64, root: &Path) -> Result<CellOutput> {
    let rel = cell_dir(assistant, seed);
    let dir = root.join(&rel);
    std::fs::create_dir_all(&dir)?;
    let grid = config.grid.to_config()?;
    let human = config.human.build()?;
    let mut artifacts = Vec::new();
    let mut truncated = None;

    let (eval, log) = if assistant.is_learned() {
        let train = assistant.train_config(&config.train);
        let mut env = GridEnv::new(grid, human, train.oracle_every > 0 || train.resolve_human)?;
        let deadline = Instant::now() + Duration::from_secs(config.cell_budget_secs);
        let out = train_esr(&mut env, &train, seed, Some(deadline))?;
        truncated = out.truncated_at_epoch;
        let f = std::fs::File::create(dir.join("metrics.csv"))?;
        write_metrics_csv(&out.metrics, std::io::BufWriter::new(f))?;
        artifacts.push(rel.join("metrics.csv"));
        if config.save_checkpoints {
            AgentCheckpoint::new(&out.repr, &out.critic, train.reward_mode).save(&dir.join("checkpoint.json"))?;
            artifacts.push(rel.join("checkpoint.json"));
        }
        let feat = env.featurizer().clone();
        evaluate_logged(&env, seed, train.eval_episodes, |obs, rng| {
            Ok(assistant_action(&out.critic, &feat.active(obs, None, None), rng, true))
        })?
    } else {
        let env = GridEnv::new(grid.clone(), human.clone(), false)?;
        let n = config.eval_episodes;
        match assistant {
            AssistantKind::Ave => evaluate_logged(&env, seed, n, |obs, rng| ave_action(obs, &grid, &config.ave, rng))?,
            AssistantKind::Random => evaluate_logged(&env, seed, n, |_, rng| Ok(random_action(&grid, rng)))?,
            AssistantKind::None => evaluate_logged(&env, seed, n, |_, _| Ok(NOOP))?,
            AssistantKind::OracleEmpowerment => {
                let oracle = OracleLookahead::new(&grid, &human, config.train.repr.gamma_future)?;
                evaluate_logged(&env, seed, n, |obs, _| oracle.action(obs))?
            }
            _ => unreachable!("learned assistants handled above"),
        }
    };
    write_eval_csv(&log, &dir.join("eval.csv"))?;
    artifacts.push(rel.join("eval.csv"));
    Ok(CellOutput {
        eval,
        truncated,
        artifacts,
    })
}

/// Runs every `(assistant, seed)` cell on `workers` threads and writes the
/// aggregate and manifest. A failing cell is recorded, not propagated; check
/// [`Manifest::num_failed`].
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<Manifest> {
    config.validate()?;
    let root = &config.out_dir;
    std::fs::create_dir_all(root)?;
    let jobs: Vec<(AssistantKind, u64)> = config
        .assistants
        .iter()
        .flat_map(|&a| config.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<Mutex<Option<CellRecord>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(assistant, seed)) = jobs.get(i) else { break };
                let start = Instant::now();
                let (status, eval, artifacts) = match run_cell(config, assistant, seed, root) {
                    Ok(o) => (
                        match o.truncated {
                            Some(e) => CellStatus::Truncated { epochs_completed: e },
                            None => CellStatus::Ok,
                        },
                        Some(o.eval),
                        o.artifacts,
                    ),
                    Err(e) => {
                        log::error!("cell {assistant} seed {seed} failed: {e}");
                        (CellStatus::Failed { error: e.to_string() }, None, Vec::new())
                    }
                };
                *results[i].lock().expect("no panics while holding the lock") = Some(CellRecord {
                    assistant,
                    seed,
                    status,
                    eval,
                    artifacts,
                    wall_secs: start.elapsed().as_secs_f64(),
                });
            });
        }
    });
    let cells: Vec<CellRecord> = results
        .into_iter()
        .map(|m| m.into_inner().expect("lock not poisoned").expect("every job ran"))
        .collect();
    finish_manifest(config, cells)
}

fn finish_manifest(config: &ExperimentConfig, cells: Vec<CellRecord>) -> Result<Manifest> {
    let root = &config.out_dir;
    let aggregate = aggregate_cells(&config.assistants, &cells);
    write_aggregate_csv(&aggregate, &root.join("aggregate.csv"))?;
    let mut artifacts: Vec<PathBuf> = cells.iter().flat_map(|c| c.artifacts.iter().cloned()).collect();
    artifacts.push(PathBuf::from("aggregate.csv"));
    let manifest = Manifest {
        name: config.name.clone(),
        config_hash: config.hash()?,
        config: config.clone(),
        cells,
        aggregate,
        artifacts,
    };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Recomputes the aggregate of an experiment directory from its manifest and
/// the per-cell `eval.csv` files, and rewrites `aggregate.csv`.
pub fn aggregate(dir: &Path) -> Result<Vec<AggregateRow>> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let mut cells = manifest.cells.clone();
    for c in cells.iter_mut().filter(|c| !c.failed()) {
        let path = dir.join(cell_dir(c.assistant, c.seed)).join("eval.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let mut results = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("malformed row in {}", path.display())))
            };
            results.push((parse(1)? == 1, parse(2)?));
        }
        let wins: Vec<usize> = results.iter().filter(|r| r.0).map(|r| r.1).collect();
        c.eval = Some(EvalStats {
            episodes: results.len(),
            success_rate: if results.is_empty() { 0.0 } else { wins.len() as f64 / results.len() as f64 },
            mean_steps_to_goal: (!wins.is_empty()).then(|| wins.iter().sum::<usize>() as f64 / wins.len() as f64),
        });
    }
    let rows = aggregate_cells(&manifest.config.assistants, &cells);
    write_aggregate_csv(&rows, &dir.join("aggregate.csv"))?;
    Ok(rows)
}

pub const ABLATION_BLOCKS: [usize; 4] = [2, 5, 7, 10];
pub const ABLATION_ASSISTANTS: [AssistantKind; 5] = [
    AssistantKind::Esr,
    AssistantKind::EsrNoAr,
    AssistantKind::EsrGreedy,
    AssistantKind::Ave,
    AssistantKind::Random,
];
/// Column order of `ablation.csv`.
pub const ABLATION_COLUMNS: [&str; 7] = [
    "num_blocks",
    "assistant",
    "seeds",
    "success_mean",
    "success_se",
    "steps_mean",
    "steps_se",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub num_blocks: usize,
    #[serde(flatten)]
    pub row: AggregateRow,
}

/// Expands `base` over [`ABLATION_ASSISTANTS`] and the given block counts,
/// one sub-experiment per count under `<out>/N<n>/`, and writes
/// `ablation.csv`. Rows are ordered by block count, then assistant.
pub fn ablation_suite(base: &ExperimentConfig, blocks: &[usize], workers: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut failed = 0;
    for &n in blocks {
        let mut c = base.clone();
        c.name = format!("{}-N{n}", base.name);
        c.grid.num_blocks = n;
        c.assistants = ABLATION_ASSISTANTS.to_vec();
        c.out_dir = base.out_dir.join(format!("N{n}"));
        let m = run_experiment(&c, workers)?;
        failed += m.num_failed();
        rows.extend(m.aggregate.into_iter().map(|row| AblationRow { num_blocks: n, row }));
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(base.out_dir.join("ablation.csv"))?;
    w.write_record(ABLATION_COLUMNS)?;
    for r in &rows {
        let a = &r.row;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.num_blocks.to_string(),
            a.assistant.to_string(),
            a.seeds.to_string(),
            a.success_mean.to_string(),
            a.success_se.to_string(),
            opt(a.steps_mean),
            opt(a.steps_se),
        ])?;
    }
    w.flush()?;
    if failed > 0 {
        log::warn!("{failed} ablation cells failed");
    }
    Ok(rows)
}

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::InvarianceKind;
use crate::rng::split_seed;
use crate::simgen::{d2_spec, simulate, three_env_spec, MixingSpec, ScmSpec};

use super::diagnostics::{identifiability_report, IdentifiabilityReport};
use super::methods::{estimate, Latents, Method};
use super::select::{cross_validate, CvRun, Lambda2Subset, LambdaGrid, Selection};
use super::train::{train, TrainConfig};

/// Seed of the mixing functions; only the data seed varies across replicates.
pub const MIXING_SEED: u64 = 0;
/// An experiment fails when more than this fraction of its seeds error.
pub const MAX_FAILED_SEED_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    MixingAblation,
    MisspecDims,
    IndependenceAblation,
    ThreeEnv,
    InvarianceLossAblation,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] = [
        ExperimentName::MixingAblation,
        ExperimentName::MisspecDims,
        ExperimentName::IndependenceAblation,
        ExperimentName::ThreeEnv,
        ExperimentName::InvarianceLossAblation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::MixingAblation => "mixing_ablation",
            ExperimentName::MisspecDims => "misspec_dims",
            ExperimentName::IndependenceAblation => "independence_ablation",
            ExperimentName::ThreeEnv => "three_env",
            ExperimentName::InvarianceLossAblation => "invariance_loss_ablation",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'; valid names: {}", Self::valid_names())))
    }
}

/// Sample sizes, training length and whether `λ` is chosen by validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleParams {
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Select `λ` over the default grid; otherwise `λ1 = λ2 = 10` (or `λ2 = 0` where ablated).
    pub select_lambda: bool,
}

impl ScaleParams {
    /// Laptop scale: n = 4,000 per environment, 100 epochs, fixed `λ`.
    pub fn desk() -> Self {
        Self {
            n_train: 4000,
            n_val: 800,
            epochs: 100,
            batch_size: 500,
            select_lambda: false,
        }
    }

    /// n = 10,000 / 2,000 per environment, 400 epochs, `λ` chosen over the 12-point grid.
    pub fn full() -> Self {
        Self {
            n_train: 10_000,
            n_val: 2000,
            epochs: 400,
            batch_size: 500,
            select_lambda: true,
        }
    }
}

/// Fixed weights used when `λ` is not selected.
pub const DESK_LAMBDA: f64 = 10.0;

/// One training configuration of an experiment, run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTask {
    pub index: usize,
    pub mixing_label: String,
    pub spec: ScmSpec,
    pub mixing: MixingSpec,
    /// `λ1`, `λ2` here are used as-is unless `grid` is set.
    pub config: TrainConfig,
    pub grid: Option<LambdaGrid>,
    pub subset: Lambda2Subset,
    /// Appended to model-based method names, e.g. the invariance criterion.
    pub method_suffix: Option<String>,
    /// Whether the `Z`/oracle baselines are reported (they do not depend on the model).
    pub baselines: bool,
}

fn mixing_for(label: &str, latent_dim: usize) -> MixingSpec {
    match label {
        "mlp" => MixingSpec::invertible_mlp(latent_dim, MIXING_SEED),
        _ => {
            let degree = label.trim_start_matches("poly").parse().expect("poly<degree> label");
            MixingSpec::polynomial(degree, latent_dim, MIXING_SEED)
        }
    }
}

/// Expands an experiment into its training configurations.
pub fn experiment_tasks(name: ExperimentName, scale: &ScaleParams) -> Vec<ExperimentTask> {
    let base = TrainConfig {
        lambda1: DESK_LAMBDA,
        lambda2: DESK_LAMBDA,
        epochs: scale.epochs,
        batch_size: scale.batch_size,
        ..TrainConfig::default()
    };
    let grid = scale.select_lambda.then(LambdaGrid::default);
    let task = |label: &str, spec: ScmSpec, config: TrainConfig, subset: Lambda2Subset| ExperimentTask {
        index: 0,
        mixing_label: label.to_string(),
        mixing: mixing_for(label, spec.p + spec.q),
        spec,
        config,
        grid: grid.clone(),
        subset,
        method_suffix: None,
        baselines: true,
    };
    let mut tasks = match name {
        ExperimentName::MixingAblation => ["poly1", "poly2", "poly3", "mlp"]
            .iter()
            .map(|m| task(m, d2_spec(), base.clone(), Lambda2Subset::NonZero))
            .collect(),
        ExperimentName::MisspecDims => (1..=4)
            .map(|p_hat| {
                task("poly3", d2_spec(), TrainConfig { p_hat, ..base.clone() }, Lambda2Subset::NonZero)
            })
            .collect(),
        ExperimentName::IndependenceAblation => vec![
            task("mlp", d2_spec(), TrainConfig { lambda2: 0.0, ..base.clone() }, Lambda2Subset::Zero),
            task("mlp", d2_spec(), base.clone(), Lambda2Subset::NonZero),
        ],
        ExperimentName::ThreeEnv => vec![task("poly1", three_env_spec(), base.clone(), Lambda2Subset::NonZero)],
        ExperimentName::InvarianceLossAblation => {
            [InvarianceKind::MmdPoly2, InvarianceKind::MmdPoly3, InvarianceKind::MeanVar]
                .into_iter()
                .enumerate()
                .map(|(i, invariance)| ExperimentTask {
                    method_suffix: Some(invariance.as_str().to_string()),
                    baselines: i == 0,
                    ..task("poly1", d2_spec(), TrainConfig { invariance, ..base.clone() }, Lambda2Subset::NonZero)
                })
                .collect()
        }
    };
    for (i, t) in tasks.iter_mut().enumerate() {
        t.index = i;
    }
    tasks
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub mixing: String,
    pub p_hat: usize,
    pub q_hat: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub method: String,
    pub coord: usize,
    pub theta_hat: f64,
    pub bias: f64,
    pub se: f64,
    /// Smallest clipped R² of `Ŵ ~ [1, W]` for the task's model.
    pub r2_w_min: f64,
    pub min_sv_firststage: f64,
}

pub const RESULT_COLUMNS: [&str; 14] = [
    "experiment",
    "seed",
    "mixing",
    "p_hat",
    "q_hat",
    "lambda1",
    "lambda2",
    "method",
    "coord",
    "theta_hat",
    "bias",
    "se",
    "r2_w_min",
    "min_sv_firststage",
];

impl ResultRow {
    fn sort_key(&self) -> impl Ord + '_ {
        (
            self.seed,
            self.mixing.as_str(),
            self.p_hat,
            self.q_hat,
            OrdF64(self.lambda1),
            OrdF64(self.lambda2),
            self.method.as_str(),
            self.coord,
        )
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.seed,
            self.mixing,
            self.p_hat,
            self.q_hat,
            self.lambda1,
            self.lambda2,
            self.method,
            self.coord,
            self.theta_hat,
            self.bias,
            self.se,
            self.r2_w_min,
            self.min_sv_firststage
        )
    }
}

/// Total order on `f64` for sort keys.
#[derive(Clone, Copy)]
struct OrdF64(f64);

impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// A method or task that produced no rows.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub task: usize,
    /// `None` when the whole task (simulation or training) failed.
    pub method: Option<String>,
    pub error: String,
}

/// Everything one `(seed, task)` pair produced.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub seed: u64,
    pub task: usize,
    pub config: TrainConfig,
    pub rows: Vec<ResultRow>,
    pub report: IdentifiabilityReport,
    pub selection: Option<Vec<CvRun>>,
    pub failures: Vec<Failure>,
}

/// Simulates, trains (selecting `λ` when the task has a grid) and evaluates every method.
pub fn run_task(
    experiment: ExperimentName,
    task: &ExperimentTask,
    scale: &ScaleParams,
    seed: u64,
) -> Result<TaskOutcome> {
    let data = simulate(&task.spec, &task.mixing, scale.n_train, scale.n_val, seed)?;
    let config = TrainConfig {
        seed: split_seed(seed, task.index as u64),
        ..task.config.clone()
    };
    let (output, selection) = match &task.grid {
        Some(grid) => {
            let cv = cross_validate(&data, grid, &config, task.subset, Selection::OwnWeights)?;
            (cv.output, Some(cv.runs))
        }
        None => (train(&data, &config)?, None),
    };
    let model = &output.model;
    let report = identifiability_report(model, &data)?;
    let pooled = data.pooled_train()?;
    let (w_hat, v_hat) = model.encode(&pooled.z)?;
    let latents = Latents { w_hat: &w_hat, v_hat: &v_hat };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for method in Method::EXPERIMENT {
        if !method.needs_model() && !task.baselines {
            continue;
        }
        let name = match (&task.method_suffix, method.needs_model()) {
            (Some(s), true) => format!("{}@{s}", method.as_str()),
            _ => method.as_str().to_string(),
        };
        match estimate(method, &pooled, Some(latents), Some(&task.spec.theta)) {
            Ok(r) => {
                let bias = r.bias.clone().expect("truth supplied");
                for coord in 0..r.theta_hat.len() {
                    rows.push(ResultRow {
                        experiment: experiment.as_str().to_string(),
                        seed,
                        mixing: task.mixing_label.clone(),
                        p_hat: output.config.p_hat,
                        q_hat: output.config.q_hat,
                        lambda1: output.config.lambda1,
                        lambda2: output.config.lambda2,
                        method: name.clone(),
                        coord,
                        theta_hat: r.theta_hat[coord],
                        bias: bias[coord],
                        se: r.se[coord],
                        r2_w_min: report.w_fit.min_r2(),
                        min_sv_firststage: r.min_sv_first_stage,
                    });
                }
            }
            Err(e) => failures.push(Failure {
                seed,
                task: task.index,
                method: Some(name),
                error: e.to_string(),
            }),
        }
    }
    Ok(TaskOutcome {
        seed,
        task: task.index,
        config: output.config,
        rows,
        report,
        selection,
        failures,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub name: ExperimentName,
    pub seeds: Vec<u64>,
    pub scale: ScaleParams,
    pub tasks: Vec<ExperimentTask>,
    /// Sorted by seed, mixing, dimensions, weights, method and coordinate.
    pub rows: Vec<ResultRow>,
    /// Successful task outcomes, sorted by `(seed, task)`.
    pub outcomes: Vec<TaskOutcome>,
    pub failures: Vec<Failure>,
}

/// Runs every `(seed, task)` pair on up to `jobs` threads; output order does not depend on `jobs`.
///
/// A seed counts as failed when any of its tasks fails. More than a quarter of failed
/// seeds fails the experiment; otherwise failures are recorded and their rows omitted.
pub fn run_experiment(
    name: ExperimentName,
    seeds: &[u64],
    scale: &ScaleParams,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentOutput> {
    if seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let tasks = experiment_tasks(name, scale);
    let work: Vec<(u64, &ExperimentTask)> =
        seeds.iter().flat_map(|&s| tasks.iter().map(move |t| (s, t))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(u64, usize, Result<TaskOutcome>)>> = Mutex::new(Vec::with_capacity(work.len()));
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(seed, task)) = work.get(i) else { break };
        progress(&format!("{name}: seed {seed}, task {} ({})", task.index, task.mixing_label));
        let r = run_task(name, task, scale, seed);
        results.lock().expect("results lock").push((seed, task.index, r));
    };
    let jobs = jobs.clamp(1, work.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(s, t, _)| (*s, *t));

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    let mut failed_seeds = std::collections::BTreeSet::new();
    for (seed, task, r) in results {
        match r {
            Ok(o) => {
                failures.extend(o.failures.iter().cloned());
                outcomes.push(o);
            }
            Err(e) => {
                failed_seeds.insert(seed);
                failures.push(Failure { seed, task, method: None, error: e.to_string() });
            }
        }
    }
    let distinct: std::collections::BTreeSet<u64> = seeds.iter().copied().collect();
    if failed_seeds.len() as f64 > MAX_FAILED_SEED_FRACTION * distinct.len() as f64 {
        let detail: Vec<String> = failures
            .iter()
            .filter(|f| f.method.is_none())
            .map(|f| format!("seed {} task {}: {}", f.seed, f.task, f.error))
            .collect();
        return Err(Error::TooManyFailures {
            failed: failed_seeds.len(),
            total: distinct.len(),
            detail: detail.join("; "),
        });
    }
    let mut rows: Vec<ResultRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(ExperimentOutput {
        name,
        seeds: seeds.to_vec(),
        scale: scale.clone(),
        tasks,
        rows,
        outcomes,
        failures,
    })
}

/// Bias statistics of one method over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mixing: String,
    pub p_hat: usize,
    pub q_hat: usize,
    /// Whether the independence loss was active (`λ2 > 0`).
    pub independence: bool,
    pub method: String,
    pub coord: usize,
    pub n: usize,
    pub mean_bias: f64,
    pub mean_abs_bias: f64,
    pub sd_bias: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Groups rows by setting and method; `sd` is the sample standard deviation (0 for one seed).
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, usize, bool, String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.mixing.clone(), r.p_hat, r.q_hat, r.lambda2 > 0.0, r.method.clone(), r.coord);
        groups.entry(key).or_default().push(r.bias);
    }
    groups
        .into_iter()
        .map(|((mixing, p_hat, q_hat, independence, method, coord), mut b)| {
            let n = b.len();
            let mean = b.iter().sum::<f64>() / n as f64;
            let mean_abs = b.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            b.sort_by(f64::total_cmp);
            SummaryRow {
                mixing,
                p_hat,
                q_hat,
                independence,
                method,
                coord,
                n,
                mean_bias: mean,
                mean_abs_bias: mean_abs,
                sd_bias: sd,
                q25: quantile(&b, 0.25),
                median: quantile(&b, 0.5),
                q75: quantile(&b, 0.75),
            }
        })
        .collect()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = RESULT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("mixing,p_hat,q_hat,independence,method,coord,n,mean_bias,mean_abs_bias,sd_bias,q25,median,q75\n");
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.mixing,
            s.p_hat,
            s.q_hat,
            s.independence,
            s.method,
            s.coord,
            s.n,
            s.mean_bias,
            s.mean_abs_bias,
            s.sd_bias,
            s.q25,
            s.median,
            s.q75
        );
    }
    out
}

/// Git-style object hash: SHA-256 of `"blob <len>\0"` followed by the bytes, in hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Configuration record of an experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment: ExperimentName,
    pub seeds: Vec<u64>,
    pub scale: ScaleParams,
    pub tasks: Vec<ExperimentTask>,
    /// [`content_hash`] of the JSON encoding of `(experiment, seeds, scale, tasks)`.
    pub input_hash: String,
    pub failures: Vec<Failure>,
    /// Selected `λ` per `(seed, task)` when selection ran.
    pub selected: Vec<SelectedConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedConfig {
    pub seed: u64,
    pub task: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ExperimentOutput {
    pub fn results_csv(&self) -> String {
        results_csv(&self.rows)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.rows)
    }

    pub fn manifest(&self) -> Result<ExperimentManifest> {
        let inputs = serde_json::to_vec(&(&self.name, &self.seeds, &self.scale, &self.tasks))?;
        Ok(ExperimentManifest {
            experiment: self.name,
            seeds: self.seeds.clone(),
            scale: self.scale.clone(),
            tasks: self.tasks.clone(),
            input_hash: content_hash(&inputs),
            failures: self.failures.clone(),
            selected: self
                .outcomes
                .iter()
                .map(|o| SelectedConfig {
                    seed: o.seed,
                    task: o.task,
                    lambda1: o.config.lambda1,
                    lambda2: o.config.lambda2,
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_expansion_matches_the_designs() {
        let desk = ScaleParams::desk();
        let mix = experiment_tasks(ExperimentName::MixingAblation, &desk);
        let dz: Vec<usize> = mix.iter().map(|t| t.mixing.d_z).collect();
        assert_eq!(dz, vec![5, 15, 35, 4]);
        let mis = experiment_tasks(ExperimentName::MisspecDims, &desk);
        assert_eq!(mis.iter().map(|t| t.config.p_hat).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let ind = experiment_tasks(ExperimentName::IndependenceAblation, &desk);
        assert_eq!(ind[0].config.lambda2, 0.0);
        assert!(ind[1].config.lambda2 > 0.0);
        assert_eq!(experiment_tasks(ExperimentName::ThreeEnv, &desk)[0].spec.num_envs(), 3);
        let full = experiment_tasks(ExperimentName::MixingAblation, &ScaleParams::full());
        assert!(full.iter().all(|t| t.grid.is_some()));
    }

    #[test]
    fn names_parse_and_reject() {
        for e in ExperimentName::ALL {
            assert_eq!(e.as_str().parse::<ExperimentName>().unwrap(), e);
        }
        let err = "bogus".parse::<ExperimentName>().unwrap_err().to_string();
        assert!(err.contains("mixing_ablation") && err.contains("three_env"));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn content_hash_matches_git_blob_layout() {
        // sha256 of "blob 0\0"
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}

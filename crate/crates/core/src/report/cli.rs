// SPDX-License-Identifier: MIT OR Apache-2.0

//! `circuit-align` command line. Each subcommand loads its models and
//! dataset, delegates to the library, and writes artifacts plus a
//! `manifest.json` under `<out-dir>/<subcommand>/`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::{cache_dir_from_env, error_json, resolve_model, ArtifactWriter, ModelRef, RunManifest};
use crate::alignment::{
    compression_brittleness, noise_injection_experiment, robustness_summary, sigma_grid, AlignOptions,
    AlignmentInputs, CompressionPair, HeadSite, ModelSide, Normalization, Strategy,
};
use crate::analysis::{
    collect_mlp_activations, mlp_attribution, mlp_similarity_matrix, probe_layer_curve, successor_copy_scores,
    PositionSelect, ProbeSource, ProbeSpec, ProbeTarget,
};
use crate::circuit::{discover_circuit, sweep_csv, threshold_sweep, DiscoveryOptions, SweepMode};
use crate::error::{Error, Result};
use crate::exec::{init_threads, Exec};
use crate::intervention::{
    ablate_and_score, ablate_set_and_score, activation_patch_mean, baseline, clean_caches, edge_source_hooks,
    path_patch_edge, path_patch_edges, CorruptedMeans, Direction, EdgeId, InterventionRecord, PatchPath,
    PatchSpec, RunConfig,
};
use crate::model::{ComponentId, ModelBundle};
use crate::task::{corrupt_dataset, generate, load_external_jsonl, load_jsonl, TaskDataset, TaskTag};

#[derive(Debug, Parser, Serialize)]
#[command(name = "circuit-align", version, about = "Circuit discovery and teacher/student alignment for transformers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Model bundle directory, or `toy:teacher` / `toy:student-{high,medium,low}`.
    #[arg(long, global = true, default_value = "toy:teacher")]
    pub model: String,
    /// Second model (student) for pairwise commands.
    #[arg(long, global = true)]
    pub model2: Option<String>,
    #[arg(long, global = true, default_value = "numeral_seq")]
    pub task: TaskTag,
    /// Number of prompts.
    #[arg(long, global = true, default_value_t = 100)]
    pub n: usize,
    /// Dataset generation seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Corruption seed; defaults to `seed + 1`.
    #[arg(long, global = true)]
    pub corrupt_seed: Option<u64>,
    /// JSONL dataset to load instead of generating one.
    #[arg(long, global = true)]
    pub dataset_path: Option<PathBuf>,
    /// JSONL of corrupted prompts aligned with the dataset (needed for
    /// external tasks, which cannot be corrupted automatically).
    #[arg(long, global = true)]
    pub corrupted_path: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; defaults to hardware parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every batch loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Mean logit difference of each model on the task.
    Baseline,
    /// Node and edge circuit discovery with evaluation.
    Discover(DiscoverArgs),
    /// Mean ablations, edge path patching or activation patching.
    Intervene(InterveneArgs),
    /// MLP attribution, MLP similarity, successor scores and probes.
    Analyze(AnalyzeArgs),
    /// Teacher/student alignment score.
    Align(AlignArgs),
    /// Alignment under Gaussian noise on student component outputs.
    Noise(NoiseArgs),
    /// Bootstrap summary of per-component ablation drops.
    Robustness(RobustnessArgs),
    /// Circuit size and quality across thresholds.
    Sweep(SweepArgs),
    /// Layerwise linear probes.
    Probe(ProbeArgs),
    /// Write the planted toy bundles as loadable directories.
    ToyExport,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Baseline => "baseline",
            Command::Discover(_) => "discover",
            Command::Intervene(_) => "intervene",
            Command::Analyze(_) => "analyze",
            Command::Align(_) => "align",
            Command::Noise(_) => "noise",
            Command::Robustness(_) => "robustness",
            Command::Sweep(_) => "sweep",
            Command::Probe(_) => "probe",
            Command::ToyExport => "toy-export",
        }
    }
}

fn parse_sweep_mode(s: &str) -> std::result::Result<SweepMode, String> {
    match s {
        "score-reuse" | "score_reuse" => Ok(SweepMode::ScoreReuse),
        "rediscover" => Ok(SweepMode::Rediscover),
        _ => Err(format!("unknown sweep mode `{s}` (score-reuse, rediscover)")),
    }
}

fn parse_patch_path(s: &str) -> std::result::Result<PatchPath, String> {
    match s {
        "full" => Ok(PatchPath::Full),
        "qk" | "qk-only" => Ok(PatchPath::QkOnly),
        "ov" | "ov-only" => Ok(PatchPath::OvOnly),
        _ => Err(format!("unknown patch path `{s}` (full, qk, ov)")),
    }
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    match s {
        "clean-into-corrupted" => Ok(Direction::PatchCleanIntoCorrupted),
        "ablate" => Ok(Direction::AblateWithMeans),
        _ => Err(format!("unknown direction `{s}` (clean-into-corrupted, ablate)")),
    }
}

fn parse_layers(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once("..").ok_or_else(|| format!("expected `lo..hi`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(lo)?, p(hi)?))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiscoverArgs {
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Also sweep these thresholds (comma separated, ascending).
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    /// Test each component with nothing else ablated.
    #[arg(long)]
    pub independent: bool,
    /// Score edges between all components, not only retained nodes.
    #[arg(long)]
    pub dense_edges: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InterveneArgs {
    /// Ablate these components jointly (comma separated, e.g. `L0.H1,L1.MLP`).
    #[arg(long, value_delimiter = ',')]
    pub component: Option<Vec<ComponentId>>,
    /// Path-patch these edges, each alone and then jointly.
    #[arg(long, value_delimiter = ',')]
    pub edge: Option<Vec<EdgeId>>,
    /// Activation-patch one component.
    #[arg(long)]
    pub patch: Option<ComponentId>,
    #[arg(long, default_value = "full", value_parser = parse_patch_path)]
    pub path: PatchPath,
    #[arg(long, default_value = "clean-into-corrupted", value_parser = parse_direction)]
    pub direction: Direction,
    /// Token positions to patch (comma separated); all when absent.
    #[arg(long, value_delimiter = ',')]
    pub positions: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Head for successor/copy scores, e.g. `L1.H2`.
    #[arg(long)]
    pub head: Option<ComponentId>,
    /// Also run a layerwise probe for this target.
    #[arg(long)]
    pub probe_target: Option<ProbeTarget>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetricArgs {
    #[arg(long, default_value = "max")]
    pub normalization: Normalization,
    #[arg(long, default_value = "greedy")]
    pub strategy: Strategy,
    /// Candidates per teacher for soft top-k.
    #[arg(long, default_value_t = 5)]
    pub soft_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub soft_temperature: f64,
    /// Restrict matching to each model's most influential components.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, default_value = "head_out")]
    pub head_site: HeadSite,
}

impl MetricArgs {
    fn options(&self) -> AlignOptions {
        let strategy = match self.strategy {
            Strategy::SoftTopK { .. } => Strategy::SoftTopK { k: self.soft_k, temperature: self.soft_temperature },
            s => s,
        };
        AlignOptions {
            normalization: self.normalization,
            strategy,
            top_k: self.topk,
            head_site: self.head_site,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NoiseGridArgs {
    #[arg(long, default_value_t = 2.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_step: f64,
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AlignArgs {
    #[command(flatten)]
    pub metric: MetricArgs,
    /// Also score all normalization × strategy variants.
    #[arg(long)]
    pub variants: bool,
    /// Also run the noise-injection sweep.
    #[arg(long)]
    pub noise_sweep: bool,
    #[command(flatten)]
    pub grid: NoiseGridArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub metric: MetricArgs,
    #[command(flatten)]
    pub grid: NoiseGridArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RobustnessArgs {
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    /// Compression of `--model2` relative to `--model`, in (0, 1).
    #[arg(long)]
    pub compression: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, default_value = "0.1,0.15,0.2,0.25,0.3", value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value = "score-reuse", value_parser = parse_sweep_mode)]
    pub mode: SweepMode,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long, default_value = "next_numeral")]
    pub probe_target: ProbeTarget,
    /// Probe this head's value vectors instead of the residual stream.
    #[arg(long)]
    pub head: Option<ComponentId>,
    /// Inclusive layer range `lo..hi`.
    #[arg(long, value_parser = parse_layers)]
    pub layers: Option<(usize, usize)>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// L2 penalty on the probe weights (biases are not penalized).
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub probe_seed: u64,
}

struct Session {
    global: GlobalArgs,
    run: RunConfig,
    cache: Option<PathBuf>,
    models: Vec<(String, ModelBundle)>,
    start: std::time::Instant,
}

impl Session {
    fn new(global: &GlobalArgs, n_models: usize) -> Result<Self> {
        let start = std::time::Instant::now();
        init_threads(global.threads);
        let exec = if global.sequential { Exec::Sequential } else { Exec::Parallel };
        let mut specs = vec![global.model.clone()];
        if n_models > 1 {
            specs.push(
                global
                    .model2
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("this command needs --model2".into()))?,
            );
        } else if let Some(m2) = &global.model2 {
            specs.push(m2.clone());
        }
        let models = specs
            .into_iter()
            .map(|s| resolve_model(&s).map(|m| (s, m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            global: global.clone(),
            run: RunConfig::new(exec),
            cache: cache_dir_from_env(),
            models,
            start,
        })
    }

    fn model(&self, i: usize) -> &ModelBundle {
        &self.models[i].1
    }

    fn dataset(&self) -> Result<TaskDataset> {
        let m = self.model(0);
        let g = &self.global;
        let ds = match (&g.dataset_path, g.task) {
            (Some(p), TaskTag::External) => load_external_jsonl(p, &m.tokenizer)?,
            (Some(p), _) => load_jsonl(p, &m.tokenizer)?,
            (None, TaskTag::External) => {
                return Err(Error::InvalidArgument("--task external needs --dataset-path".into()))
            }
            (None, task) => generate(task, g.n, g.seed, &m.tokenizer)?,
        };
        let ds = if ds.len() > g.n { ds.truncated(g.n)? } else { ds };
        for (_, model) in &self.models {
            ds.check_vocab(model.config.vocab_size, model.config.max_positions)?;
        }
        Ok(ds)
    }

    fn corrupted(&self, ds: &TaskDataset) -> Result<TaskDataset> {
        let m = self.model(0);
        let cd = match &self.global.corrupted_path {
            Some(p) => {
                let cd = load_jsonl(p, &m.tokenizer)?;
                if cd.len() < ds.len() {
                    return Err(Error::InvalidArgument("corrupted dataset is shorter than the clean one".into()));
                }
                cd.truncated(ds.len())?
            }
            None => corrupt_dataset(ds, &m.tokenizer, self.corrupt_seed())?,
        };
        Ok(cd)
    }

    fn corrupt_seed(&self) -> u64 {
        self.global.corrupt_seed.unwrap_or(self.global.seed.wrapping_add(1))
    }

    fn means(&self, model: &ModelBundle, corrupted: &TaskDataset) -> Result<CorruptedMeans> {
        let hooks = edge_source_hooks(&model.config);
        CorruptedMeans::compute_cached(model, corrupted, &hooks, &self.run, self.cache.as_deref())
    }

    fn writer(&self, cli: &Cli, ds: Option<&TaskDataset>, cd: Option<&TaskDataset>) -> Result<ArtifactWriter> {
        let models = self
            .models
            .iter()
            .map(|(spec, m)| ModelRef { name: m.name.clone(), spec: spec.clone(), digest: m.digest.clone() })
            .collect();
        let mut seeds = vec![self.global.seed];
        if cd.is_some() && self.global.corrupted_path.is_none() {
            seeds.push(self.corrupt_seed());
        }
        let manifest = RunManifest::new(
            cli.command.name(),
            serde_json::to_value(cli)?,
            models,
            ds.map(|d| d.content_hash.clone()),
            cd.map(|d| d.content_hash.clone()),
            seeds,
        )?;
        Ok(ArtifactWriter::new(&self.global.out_dir.join(cli.command.name()), manifest)?.started_at(self.start))
    }
}

/// Run a parsed command line and return its manifest.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let g = &cli.global;
    match &cli.command {
        Command::ToyExport => {
            let s = Session::new(g, 1)?;
            let mut w = s.writer(cli, None, None)?;
            let dirs = crate::toy::write_fixtures(w.dir())?;
            for d in dirs {
                let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                w.manifest.outputs.push(name);
            }
            w.finish()
        }
        Command::Baseline => cmd_baseline(cli),
        Command::Discover(a) => cmd_discover(cli, a),
        Command::Intervene(a) => cmd_intervene(cli, a),
        Command::Analyze(a) => cmd_analyze(cli, a),
        Command::Align(a) => cmd_align(cli, a),
        Command::Noise(a) => cmd_noise(cli, a),
        Command::Robustness(a) => cmd_robustness(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Probe(a) => cmd_probe(cli, a),
    }
}

#[derive(Debug, Serialize)]
struct BaselineRow {
    model: String,
    task: TaskTag,
    n: usize,
    mean_logit_diff: f64,
    std_logit_diff: f64,
}

fn cmd_baseline(cli: &Cli) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let ds = s.dataset()?;
    let mut rows = Vec::new();
    for (_, m) in &s.models {
        let scores = baseline(m, &ds, &s.run)?;
        rows.push(BaselineRow {
            model: m.name.clone(),
            task: ds.task,
            n: ds.len(),
            mean_logit_diff: scores.mean,
            std_logit_diff: crate::tensor_math::std_dev(&scores.per_example),
        });
    }
    let mut csv = String::from("model,task,n,mean_logit_diff,std_logit_diff\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.model,
            r.task.name(),
            r.n,
            r.mean_logit_diff,
            r.std_logit_diff
        ));
    }
    let mut w = s.writer(cli, Some(&ds), None)?;
    w.write_json("baseline.json", "rows", &rows)?;
    w.write_csv("baseline.csv", &csv)?;
    w.finish()
}

fn cmd_discover(cli: &Cli, a: &DiscoverArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let (ds, model) = (s.dataset()?, s.model(0));
    let cd = s.corrupted(&ds)?;
    let means = s.means(model, &cd)?;
    let opts = DiscoveryOptions {
        threshold: a.threshold,
        independent: a.independent,
        dense_edges: a.dense_edges,
        run: s.run,
    };
    let graph = discover_circuit(model, &ds, &means, &opts)?;
    let mut w = s.writer(cli, Some(&ds), Some(&cd))?;
    w.write_json("circuit.json", "circuit", &graph)?;
    w.write_dot("circuit.dot", &graph.to_dot())?;
    if let Some(ts) = &a.sweep {
        let rows = threshold_sweep(model, &ds, &means, ts, SweepMode::ScoreReuse, &opts)?;
        w.write_csv("sweep.csv", &sweep_csv(&rows))?;
    }
    w.finish()
}

fn cmd_intervene(cli: &Cli, a: &InterveneArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let (ds, model) = (s.dataset()?, s.model(0));
    let cd = s.corrupted(&ds)?;
    let means = s.means(model, &cd)?;
    let base = baseline(model, &ds, &s.run)?.mean;
    let mut w = s.writer(cli, Some(&ds), Some(&cd))?;
    let mut records = Vec::new();
    let record = |target: String, scores: &crate::intervention::ScoreSummary| {
        InterventionRecord::new(target, scores, base, &ds.content_hash)
    };
    if let Some(edges) = &a.edge {
        let caches = clean_caches(model, &ds, &s.run)?;
        for e in edges {
            records.push(record(e.to_string(), &path_patch_edge(model, &ds, *e, &means, Some(&caches), &s.run)?)?);
        }
        if edges.len() > 1 {
            let joint = path_patch_edges(model, &ds, edges, &means, Some(&caches), &s.run)?;
            let names: Vec<String> = edges.iter().map(|e| e.to_string()).collect();
            records.push(record(names.join("+"), &joint)?);
        }
    }
    if let Some(cs) = &a.component {
        let names: Vec<String> = cs.iter().map(|c| c.to_string()).collect();
        records.push(record(names.join("+"), &ablate_set_and_score(model, &ds, cs, &means, &s.run)?)?);
    }
    if let Some(c) = a.patch {
        let mut spec = PatchSpec::new(c, a.path, a.direction);
        if let Some(ps) = &a.positions {
            spec = spec.at_positions(ps.clone());
        }
        let rec = activation_patch_mean(model, &ds, &cd, &spec, Some(&means), &s.run)?;
        w.write_json("patch.json", "recovery", &serde_json::json!({ "spec": spec, "recovery": rec }))?;
    }
    if a.edge.is_none() && a.component.is_none() && a.patch.is_none() {
        for c in ComponentId::all(&model.config) {
            records.push(record(c.to_string(), &ablate_and_score(model, &ds, c, &means, &s.run)?)?);
        }
    }
    if !records.is_empty() {
        let mut csv = String::from("target,mean_logit_diff,perf_change_pct,n\n");
        for r in &records {
            csv.push_str(&format!("{},{:.6},{:.4},{}\n", r.target, r.mean_logit_diff, r.perf_change_pct, r.n));
        }
        w.write_json("interventions.json", "records", &serde_json::json!({ "base_logit_diff": base, "records": records }))?;
        w.write_csv("interventions.csv", &csv)?;
    }
    w.finish()
}

fn cmd_analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let (ds, model) = (s.dataset()?, s.model(0));
    let mut w = s.writer(cli, Some(&ds), None)?;
    let table = mlp_attribution(model, &ds, s.run.exec)?;
    w.write_json("attribution.json", "attribution", &table)?;
    w.write_csv("attribution.csv", &table.to_csv())?;
    if s.models.len() > 1 {
        let acts_a = collect_mlp_activations(model, &ds, PositionSelect::All, s.run.exec)?;
        let acts_b = collect_mlp_activations(s.model(1), &ds, PositionSelect::All, s.run.exec)?;
        let sim = mlp_similarity_matrix(&acts_a, &acts_b, s.run.exec)?;
        w.write_csv("mlp_similarity.csv", &sim.to_csv())?;
    }
    if let Some(h) = a.head {
        let scores = successor_copy_scores(model, &ds, h, s.run.exec)?;
        w.write_json("successor.json", "scores", &scores)?;
    }
    if let Some(t) = a.probe_target {
        let curve = probe_layer_curve(model, &ds, &ProbeSpec::new(t, cli.global.seed), s.run.exec)?;
        w.write_csv("probe.csv", &curve.to_csv())?;
    }
    w.finish()
}

fn cmd_align(cli: &Cli, a: &AlignArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 2)?;
    let ds = s.dataset()?;
    let cd = s.corrupted(&ds)?;
    let opts = a.metric.options();
    let side = |m: &ModelBundle| -> Result<ModelSide> {
        let means = s.means(m, &cd)?;
        ModelSide::with_means(m, &ds, &means, opts.head_site, &s.run)
    };
    let inputs = AlignmentInputs::new(side(s.model(0))?, side(s.model(1))?, &s.run)?;
    let mut report = inputs.report(opts.normalization, opts.strategy, opts.top_k)?;
    report.teacher_model = s.model(0).name.clone();
    report.student_model = s.model(1).name.clone();
    let mut w = s.writer(cli, Some(&ds), Some(&cd))?;
    w.write_json("alignment.json", "report", &report)?;
    w.write_csv("alignment_pairs.csv", &report.to_csv())?;
    if a.variants {
        let grid = inputs.variant_grid(opts.top_k)?;
        let mut csv = String::from("normalization,strategy,A,abs_delta_vs_max_greedy\n");
        let reference = grid[0].score;
        for r in &grid {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.normalization.name(),
                r.strategy.name(),
                r.score,
                (r.score - reference).abs()
            ));
        }
        w.write_csv("variants.csv", &csv)?;
    }
    if a.noise_sweep {
        let curve = noise_curve(&s, &ds, &cd, &opts, &a.grid)?;
        w.write_json("noise.json", "curve", &curve)?;
        w.write_csv("noise.csv", &curve.to_csv())?;
    }
    w.finish()
}

fn noise_curve(
    s: &Session,
    ds: &TaskDataset,
    cd: &TaskDataset,
    opts: &AlignOptions,
    grid: &NoiseGridArgs,
) -> Result<crate::alignment::NoiseCurve> {
    let sigmas = sigma_grid(grid.sigma_max, grid.sigma_step)?;
    noise_injection_experiment(s.model(0), s.model(1), ds, cd, &sigmas, &grid.seeds, opts, &s.run)
}

fn cmd_noise(cli: &Cli, a: &NoiseArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 2)?;
    let ds = s.dataset()?;
    let cd = s.corrupted(&ds)?;
    let curve = noise_curve(&s, &ds, &cd, &a.metric.options(), &a.grid)?;
    let mut w = s.writer(cli, Some(&ds), Some(&cd))?;
    w.write_json("noise.json", "curve", &curve)?;
    w.write_csv("noise.csv", &curve.to_csv())?;
    w.finish()
}

fn cmd_robustness(cli: &Cli, a: &RobustnessArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let ds = s.dataset()?;
    let cd = s.corrupted(&ds)?;
    let mut summaries = Vec::new();
    for (_, m) in &s.models {
        let means = s.means(m, &cd)?;
        summaries.push(robustness_summary(m, &ds, &means, &s.run, a.resamples, a.bootstrap_seed)?);
    }
    let mut csv = String::from("model,mean_drop_pp,ci_low,ci_high,n_components,pct_over_10,pct_over_20\n");
    for r in &summaries {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{:.4},{:.4}\n",
            r.model, r.bootstrap.mean, r.bootstrap.ci_low, r.bootstrap.ci_high, r.n_components, r.pct_over_10, r.pct_over_20
        ));
    }
    let mut w = s.writer(cli, Some(&ds), Some(&cd))?;
    let overlap = match &summaries[..] {
        [t, st] => Some(t.bootstrap.overlaps(&st.bootstrap)),
        _ => None,
    };
    w.write_json(
        "robustness.json",
        "summaries",
        &serde_json::json!({ "summaries": summaries, "ci_overlap": overlap }),
    )?;
    w.write_csv("robustness.csv", &csv)?;
    if let (Some(c), [t, st]) = (a.compression, &summaries[..]) {
        let rows = compression_brittleness(&[CompressionPair {
            compression: c,
            teacher_drop: t.bootstrap.mean,
            student_drop: st.bootstrap.mean,
        }])?;
        let mut csv = String::from("compression,delta_pp,beta,per_tenth\n");
        for r in &rows {
            csv.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.compression, r.delta_pp, r.beta, r.per_tenth));
        }
        w.write_csv("brittleness.csv", &csv)?;
    }
    w.finish()
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let (ds, model) = (s.dataset()?, s.model(0));
    let cd = s.corrupted(&ds)?;
    let means = s.means(model, &cd)?;
    let first = *a.thresholds.first().ok_or_else(|| Error::InvalidArgument("no thresholds".into()))?;
    let opts = DiscoveryOptions::new(first).with_run(s.run);
    let rows = threshold_sweep(model, &ds, &means, &a.thresholds, a.mode, &opts)?;
    let mut w = s.writer(cli, Some(&ds), Some(&cd))?;
    w.write_json("sweep.json", "rows", &rows)?;
    w.write_csv("sweep.csv", &sweep_csv(&rows))?;
    w.finish()
}

fn cmd_probe(cli: &Cli, a: &ProbeArgs) -> Result<RunManifest> {
    let s = Session::new(&cli.global, 1)?;
    let (ds, model) = (s.dataset()?, s.model(0));
    let mut spec = ProbeSpec::new(a.probe_target, a.probe_seed);
    spec.layers = a.layers;
    spec.epochs = a.epochs;
    spec.learning_rate = a.lr;
    spec.weight_decay = a.weight_decay;
    if let Some(h) = a.head {
        spec.source = ProbeSource::HeadValues(h);
    }
    let curve = probe_layer_curve(model, &ds, &spec, s.run.exec)?;
    let mut w = s.writer(cli, Some(&ds), None)?;
    w.write_json("probe.json", "curve", &curve)?;
    w.write_csv("probe.csv", &curve.to_csv())?;
    w.finish()
}

/// Parse `args`, run, and map the outcome to a process exit code. Module
/// errors print a JSON object on stderr and return 1.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(m) => {
            log::info!("{} finished in {:.2}s; outputs: {}", m.command, m.wall_clock_secs, m.outputs.join(", "));
            println!("{}", cli.global.out_dir.join(cli.command.name()).join("manifest.json").display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(cli.command.name(), &e));
            1
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite on the shipped toy models. Prints one line per
//! criterion and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::time::Instant;

use circuit_align::alignment::{
    align_models, alignment_score, noise_injection_experiment, robustness_summary, sigma_grid, AlignOptions,
    AlignmentInputs, HeadSite, InfluenceTable, MatchCandidate, MatchSet, MatchedTeacher, ModelSide, Normalization,
    Strategy,
};
use circuit_align::analysis::{separable_fixture, train_linear_probe, ProbeSpec, ProbeTarget};
use circuit_align::circuit::{component_means, discover_edges, discover_nodes_with, evaluate_circuit, DiscoveryOptions};
use circuit_align::intervention::{edge_source_hooks, perf_change_pct, RunConfig};
use circuit_align::model::{
    logit_difference, ComponentId, HookPoint, HookSet, Interventions, ModelBundle, Replacement, Site,
};
use circuit_align::task::{corrupt_dataset, gen_numeral_sequences, TaskDataset};
use circuit_align::tensor_math::{kl_divergence, pca_top3, softmax_with_temperature, Matrix};
use circuit_align::toy::{build_model, IdleStyle, PlantedSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_PROMPTS: usize = 100;
const DATA_SEED: u64 = 0;
const CORRUPT_SEED: u64 = 1;
const NODE_THRESHOLD: f64 = 0.20;
const BOOTSTRAP_RESAMPLES: usize = 10_000;
const NOISE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CLOSED_FORM_TOL: f64 = 1e-9;
const PATCH_TOL: f32 = 1e-6;
const GPT2_ENV: &str = "CIRCUIT_ALIGN_GPT2_DIR";

struct Outcome {
    name: &'static str,
    status: Status,
    secs: f64,
    detail: String,
}

enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Toys {
    teacher: ModelBundle,
    students: Vec<ModelBundle>,
    ds: TaskDataset,
    corrupted: TaskDataset,
}

fn toys() -> Toys {
    let teacher = build_model(&PlantedSpec::teacher()).expect("teacher builds");
    let students = [IdleStyle::Base, IdleStyle::Rotated, IdleStyle::Orthogonal]
        .into_iter()
        .map(|s| build_model(&PlantedSpec::student(s)).expect("student builds"))
        .collect();
    let ds = gen_numeral_sequences(N_PROMPTS, DATA_SEED, &teacher.tokenizer).expect("dataset");
    let corrupted = corrupt_dataset(&ds, &teacher.tokenizer, CORRUPT_SEED).expect("corrupted dataset");
    Toys { teacher, students, ds, corrupted }
}

type Check = Result<(bool, String), String>;

fn run(name: &'static str, limit_secs: Option<f64>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    let (ok, mut detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let in_time = limit_secs.is_none_or(|l| secs < l);
    if let Some(l) = limit_secs {
        detail.push_str(&format!("; limit {l:.0}s"));
    }
    Outcome { name, status: if ok && in_time { Status::Pass } else { Status::Fail }, secs, detail }
}

fn self_alignment(t: &Toys) -> Check {
    let r = align_models(&t.teacher, &t.teacher, &t.ds, &t.corrupted, &AlignOptions::default(), &RunConfig::default())
        .map_err(|e| e.to_string())?;
    Ok((r.score == 1.0, format!("A={:?} over {} matched components", r.score, r.n_matched)))
}

fn planted_recovery(t: &Toys) -> Check {
    let spec = PlantedSpec::teacher();
    let m = &t.teacher;
    let opts = DiscoveryOptions::new(NODE_THRESHOLD);
    let means = component_means(m, &t.corrupted, opts.run.exec).map_err(|e| e.to_string())?;
    let nodes = discover_nodes_with(m, &t.ds, &means, &opts).map_err(|e| e.to_string())?;
    let edges = discover_edges(m, &t.ds, &nodes.nodes, &means, &opts).map_err(|e| e.to_string())?;
    let eval = evaluate_circuit(m, &t.ds, &nodes.nodes, &means, NODE_THRESHOLD, &opts.run).map_err(|e| e.to_string())?;

    let found_nodes: BTreeSet<ComponentId> = nodes.nodes.iter().copied().collect();
    let planted_nodes: BTreeSet<ComponentId> = spec.circuit_nodes().into_iter().collect();
    let found_edges: BTreeSet<_> = edges.edges.iter().copied().collect();
    let planted_edges: BTreeSet<_> = spec.circuit_edges().into_iter().collect();
    let base = eval.base_logit_diff;
    let ok = found_nodes == planted_nodes
        && found_edges == planted_edges
        && eval.completeness_drop_pct < 5.0
        && eval.faithfulness_logit_diff <= 0.1 * base;
    let names = |v: &BTreeSet<ComponentId>| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
    Ok((
        ok,
        format!(
            "nodes [{}] (planted [{}]), {} edges (planted {}), completeness drop {:.2}%, faithfulness {:.3} vs 0.1*base {:.3}",
            names(&found_nodes),
            names(&planted_nodes),
            found_edges.len(),
            planted_edges.len(),
            eval.completeness_drop_pct,
            eval.faithfulness_logit_diff,
            0.1 * base
        ),
    ))
}

fn redundancy_asymmetry(t: &Toys) -> Check {
    let run = RunConfig::default();
    let summary = |m: &ModelBundle| {
        let means = component_means(m, &t.corrupted, run.exec)?;
        robustness_summary(m, &t.ds, &means, &run, BOOTSTRAP_RESAMPLES, 0)
    };
    let teacher = summary(&t.teacher).map_err(|e| e.to_string())?;
    let tb = &teacher.bootstrap;
    let mut ok = true;
    let mut detail = format!("teacher {:.2} [{:.2}, {:.2}]", tb.mean, tb.ci_low, tb.ci_high);
    for s in &t.students {
        let sb = summary(s).map_err(|e| e.to_string())?.bootstrap;
        ok &= sb.mean > tb.mean && !sb.overlaps(tb);
        detail.push_str(&format!("; {} {:.2} [{:.2}, {:.2}]", s.name, sb.mean, sb.ci_low, sb.ci_high));
    }
    Ok((ok, detail))
}

fn noise_validation(t: &Toys) -> Check {
    let run = RunConfig::default();
    let opts = AlignOptions::default();
    let student = &t.students[0];
    let sigmas = sigma_grid(2.0, 0.05).map_err(|e| e.to_string())?;
    let curve = noise_injection_experiment(&t.teacher, student, &t.ds, &t.corrupted, &sigmas, &NOISE_SEEDS, &opts, &run)
        .map_err(|e| e.to_string())?;
    let independent = align_models(&t.teacher, student, &t.ds, &t.corrupted, &opts, &run).map_err(|e| e.to_string())?;
    let a0 = curve.points[0].mean_score;
    let rho = curve.spearman_pre_plateau;
    let ok = sigmas.len() == 41
        && rho.is_some_and(|r| r <= -0.9)
        && (a0 - independent.score).abs() <= CLOSED_FORM_TOL
        && (a0 - curve.noiseless_score).abs() <= CLOSED_FORM_TOL;
    Ok((
        ok,
        format!(
            "A(0)={a0:.12} noiseless={:.12}, rho={} over {} pre-plateau points, plateau {:.3} at sigma {:.2}",
            independent.score,
            rho.map_or("n/a".into(), |r| format!("{r:.4}")),
            curve.n_pre_plateau,
            curve.plateau_level,
            curve.plateau_sigma
        ),
    ))
}

fn variant_stability(t: &Toys) -> Check {
    let run = RunConfig::default();
    let site = HeadSite::Output;
    let err = |e: circuit_align::Error| e.to_string();
    let teacher = ModelSide::compute(&t.teacher, &t.ds, &t.corrupted, site, &run).map_err(err)?;
    let mut grids = Vec::new();
    for s in &t.students {
        let side = ModelSide::compute(s, &t.ds, &t.corrupted, site, &run).map_err(err)?;
        let grid = AlignmentInputs::new(teacher.clone(), side, &run).map_err(err)?.variant_grid(None).map_err(err)?;
        grids.push(grid.iter().map(|r| r.score).collect::<Vec<f64>>());
    }
    let n_variants = grids[0].len();
    let ranking = |v: usize| {
        let mut idx: Vec<usize> = (0..grids.len()).collect();
        idx.sort_by(|&a, &b| grids[b][v].total_cmp(&grids[a][v]));
        idx
    };
    let reference = ranking(0);
    let stable = (0..n_variants).all(|v| ranking(v) == reference);
    // Per pair: mean over the non-baseline variants of |A_v - A_max/greedy|.
    let per_pair: Vec<f64> = grids
        .iter()
        .map(|g| g[1..].iter().map(|a| (a - g[0]).abs()).sum::<f64>() / (n_variants - 1) as f64)
        .collect();
    let mean_delta = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    let rows: Vec<String> = grids
        .iter()
        .zip(&t.students)
        .map(|(g, s)| format!("{} {}", s.name, g.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/")))
        .collect();
    Ok((
        n_variants == 9 && stable && reference == vec![0, 1, 2] && mean_delta < 0.1,
        format!("ranking stable={stable}, mean |dA|={mean_delta:.4}; {}", rows.join("; ")),
    ))
}

/// Power iteration with deflation on the explicit covariance.
fn power_iteration(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let (n, d) = (rows.len(), rows[0].len());
    let means: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - means[i]) * (r[j] - means[j]) / (n - 1) as f64;
            }
        }
    }
    let mut out = Vec::new();
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
            lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.into_iter().map(|x| x / lambda).collect();
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(v);
    }
    out
}

fn formula_oracles() -> Check {
    let err = |e: circuit_align::Error| e.to_string();
    let mut worst = 0.0f64;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // Softmax at two temperatures against exp / sum.
    for temp in [1.0f64, 2.0] {
        let logits = [1.0, 2.0, 3.0, -0.5];
        let z: f64 = logits.iter().map(|l| (l / temp).exp()).sum();
        let p = softmax_with_temperature(&logits, temp).map_err(err)?;
        for (pi, l) in p.iter().zip(logits) {
            note(*pi, (l / temp).exp() / z);
        }
    }
    // KL divergence against the direct sum.
    let (p, q) = ([0.1f64, 0.2, 0.3, 0.4], [0.25f64, 0.25, 0.25, 0.25]);
    let brute: f64 = p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum();
    note(kl_divergence(&p, &q).map_err(err)?, brute);
    // Logit difference and percent performance change, hand values.
    note(logit_difference(&[0.5, 2.5, -0.25], 1, 2).map_err(err)?, 2.75);
    note(perf_change_pct(-0.28, 6.12).map_err(err)?, -104.575_163_398_692_8);
    note(perf_change_pct(2.0, 4.0).map_err(err)?, -50.0);
    // Influence under each normalization.
    let (a, b, c) = (ComponentId::head(0, 0), ComponentId::head(0, 1), ComponentId::mlp(0));
    let drops = [(a, 2.0), (b, -1.0), (c, 1.0)];
    let expected = [
        (Normalization::Max, [1.0, 0.0, 0.5]),
        (Normalization::L1, [2.0 / 3.0, 0.0, 1.0 / 3.0]),
        (Normalization::L2, [2.0 / 5f64.sqrt(), 0.0, 1.0 / 5f64.sqrt()]),
    ];
    for (norm, want) in expected {
        let table = InfluenceTable::from_drops("m", 4.0, &drops, norm, "h").map_err(err)?;
        for (e, w) in table.entries.iter().zip(want) {
            note(e.influence, w);
        }
    }
    // Alignment score: (1.0·(1 − 0) + 0.5·(1 − |0.4 − 0.8|)) / 2 = 0.65.
    let ti = InfluenceTable::from_drops("t", 1.0, &[(a, 1.0), (b, 0.4)], Normalization::Max, "h").map_err(err)?;
    let si = InfluenceTable::from_drops("s", 1.0, &[(a, 1.0), (b, 0.8)], Normalization::Max, "h").map_err(err)?;
    let one = |t: ComponentId, s: ComponentId, sim: f64| MatchedTeacher {
        teacher: t,
        candidates: vec![MatchCandidate { student: s, similarity: sim, weight: 1.0 }],
    };
    let matches = MatchSet { strategy: Strategy::Greedy, top_k: None, pairs: vec![one(a, a, 1.0), one(b, b, 0.5)] };
    note(alignment_score(&matches, &ti, &si).map_err(err)?.score, 0.65);

    // PCA against power iteration on a fixed random matrix with distinct
    // variances.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scales = [4.0, 2.5, 1.5, 0.7, 0.3];
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let basis = pca_top3(&Matrix::from_rows(&rows).map_err(err)?).map_err(err)?;
    let oracle = power_iteration(&rows, 3);
    let min_cos = basis
        .components
        .iter()
        .zip(&oracle)
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>().abs())
        .fold(1.0, f64::min);
    Ok((
        worst <= CLOSED_FORM_TOL && min_cos >= 1.0 - 1e-9,
        format!("max closed-form error {worst:.2e}, min PCA |cos| {min_cos:.12}"),
    ))
}

fn intervention_identities(t: &Toys) -> Check {
    let m = &t.teacher;
    let cfg = &m.config;
    let err = |e: circuit_align::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sources = edge_source_hooks(cfg);
    let logits_hook = HookPoint::new(cfg.n_layers - 1, Site::Logits);
    let record = HookSet::new().with(logits_hook);
    let bos = m.tokenizer.bos_id().map_err(err)?;
    let (mut full_gap, mut empty_gap, mut causal_gap) = (0.0f32, 0.0f32, 0.0f32);
    for _ in 0..100 {
        let len = rng.random_range(4..=cfg.max_positions);
        let draw = |rng: &mut ChaCha8Rng| {
            let mut v = vec![bos];
            v.extend((1..len).map(|_| rng.random_range(1..cfg.vocab_size as u32)));
            v
        };
        let clean = draw(&mut rng);
        let corrupt = draw(&mut rng);
        let none = Interventions::none();
        let clean_run = m.forward(&clean, &sources, &none).map_err(err)?;
        let corrupt_run = m.forward(&corrupt, &record, &none).map_err(err)?;
        let gap = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);

        let mut full = Interventions::none();
        for h in sources.iter() {
            full.overrides.insert(*h, Replacement::all(clean_run.cache.get(h).map_err(err)?.clone()));
        }
        full_gap = full_gap.max(gap(&m.forward(&corrupt, &HookSet::new(), &full).map_err(err)?.logits, &clean_run.logits));

        let mut empty = Interventions::none();
        for h in sources.iter() {
            empty.overrides.insert(*h, Replacement::at(clean_run.cache.get(h).map_err(err)?.clone(), Vec::new()));
        }
        empty_gap = empty_gap.max(gap(&m.forward(&corrupt, &HookSet::new(), &empty).map_err(err)?.logits, &corrupt_run.logits));

        let p = rng.random_range(1..len);
        let mut at_p = Interventions::none();
        for h in sources.iter() {
            at_p.overrides.insert(*h, Replacement::at(clean_run.cache.get(h).map_err(err)?.clone(), vec![p]));
        }
        let patched = m.forward(&corrupt, &record, &at_p).map_err(err)?;
        let (before, after) = (patched.cache.get(&logits_hook).map_err(err)?, corrupt_run.cache.get(&logits_hook).map_err(err)?);
        for row in 0..p {
            causal_gap = causal_gap.max(gap(before.row(row), after.row(row)));
        }
    }
    Ok((
        full_gap <= PATCH_TOL && empty_gap <= PATCH_TOL && causal_gap == 0.0,
        format!("100 prompts: full-patch gap {full_gap:.1e}, empty-patch gap {empty_gap:.1e}, pre-position change {causal_gap:.1e}"),
    ))
}

fn probe_protocol() -> Check {
    let err = |e: circuit_align::Error| e.to_string();
    let (x, y) = separable_fixture(1000, 16, 0.5, 7);
    let spec = ProbeSpec::new(ProbeTarget::NextNumeral, 11);
    let protocol = spec.train_fraction == 0.8 && spec.epochs == 20 && spec.learning_rate == 1e-3;
    let r = train_linear_probe(&x, &y, &spec).map_err(err)?;
    let again = train_linear_probe(&x, &y, &spec).map_err(err)?;
    let chance_ok = (r.permutation_accuracy - r.chance).abs() <= 0.1;
    Ok((
        protocol && r.accuracy >= 0.99 && chance_ok && again == r,
        format!(
            "accuracy {:.4}, permutation {:.4} (chance {:.2}), deterministic={}",
            r.accuracy,
            r.permutation_accuracy,
            r.chance,
            again == r
        ),
    ))
}

fn extended() -> Outcome {
    let skipped = |detail: String| Outcome { name: "gpt2_reproduction", status: Status::Skipped, secs: 0.0, detail };
    let Some(dir) = std::env::var_os(GPT2_ENV).map(std::path::PathBuf::from) else {
        return skipped(format!(
            "needs exported gpt2 and distilgpt2 bundles (set {GPT2_ENV} to a directory holding gpt2/ and distilgpt2/); runs for hours at N=100-384"
        ));
    };
    run("gpt2_reproduction", None, || {
        let err = |e: circuit_align::Error| e.to_string();
        let gpt2 = ModelBundle::load_dir(&dir.join("gpt2")).map_err(err)?;
        let distil = ModelBundle::load_dir(&dir.join("distilgpt2")).map_err(err)?;
        let run = RunConfig::default();
        let ds = gen_numeral_sequences(100, DATA_SEED, &gpt2.tokenizer).map_err(err)?;
        let base = |m: &ModelBundle| circuit_align::intervention::baseline(m, &ds, &run).map(|s| s.mean);
        let (bt, bs) = (base(&gpt2).map_err(err)?, base(&distil).map_err(err)?);
        let ds384 = gen_numeral_sequences(384, DATA_SEED, &gpt2.tokenizer).map_err(err)?;
        let cd384 = corrupt_dataset(&ds384, &gpt2.tokenizer, CORRUPT_SEED).map_err(err)?;
        let a = align_models(&gpt2, &distil, &ds384, &cd384, &AlignOptions::default(), &run).map_err(err)?.score;
        let ok = (bt - 6.1127).abs() <= 0.05 && (bs - 3.7530).abs() <= 0.05 && (a - 0.9452).abs() <= 0.02;
        Ok((
            ok,
            format!("baseline {bt:.4}/{bs:.4}, A={a:.4}; robustness CIs and completeness sequence are not checked here"),
        ))
    })
}

fn print(o: &Outcome) -> bool {
    let (tag, failed) = match o.status {
        Status::Pass => ("PASS", false),
        Status::Fail => ("FAIL", true),
        Status::Skipped => ("SKIPPED", false),
    };
    println!("{tag:<7} {:<27} {:>8.2}s  {}", o.name, o.secs, o.detail);
    failed
}

fn main() {
    let t = toys();
    let checks: Vec<Box<dyn Fn() -> Outcome + '_>> = vec![
        Box::new(|| run("self_alignment", Some(10.0), || self_alignment(&t))),
        Box::new(|| run("planted_circuit_recovery", Some(60.0), || planted_recovery(&t))),
        Box::new(|| run("redundancy_asymmetry", None, || redundancy_asymmetry(&t))),
        Box::new(|| run("noise_injection", Some(600.0), || noise_validation(&t))),
        Box::new(|| run("variant_ranking_stability", None, || variant_stability(&t))),
        Box::new(|| run("formula_oracles", None, formula_oracles)),
        Box::new(|| run("intervention_identities", None, || intervention_identities(&t))),
        Box::new(|| run("probe_protocol", None, probe_protocol)),
        Box::new(extended),
    ];
    let failed = checks.iter().filter(|check| print(&check())).count();
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so the report reads top to bottom; any failure exits non-zero.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusionlab::analysis::{
    bias_variance_report, cross_rank_accuracy_by, intra_rank_accuracy_by, pairwise_winrate, verify_prop2,
    log_one_minus_sum_sq, Representative,
};
use fusionlab::config::ExperimentConfig;
use fusionlab::losses::{compute_rloo_advantages, dpo_loss, simpo_loss};
use fusionlab::pipeline::{cmd_sweep, evaluate, generate_data, run_stage1, run_stage2, EvalReport, SweepAxis};
use fusionlab::tinylm::{init_model, ArchConfig, Graph};
use fusionlab::trainer::Stage;
use fusionlab::types::{form_preference_pair, FusionSample, Method, Prompt, Response, RewardedResponse, SplitTag, Token};
use fusionlab::verify::{gradient_suite, linearity_case, LossKind, GRAD_REL_TOL};
use fusionlab::weighting::{build_fusion_sample, compute_model_weights, log_model_weights, WeightingConfig};

/// Seeds for the desk-scale comparisons; the reported figure is the median.
const DESK_SEEDS: u64 = 9;
/// Stage-two temperature for SimPO; DPO and leave-one-out use the config's.
const SIMPO_ALPHA_PO: f64 = 1e-3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn rr(source: &str, j: usize, tokens: Vec<Token>, reward: f64) -> RewardedResponse {
    RewardedResponse::new(
        Response {
            tokens,
            source_id: source.into(),
            sample_index: j,
        },
        reward,
    )
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn weighting_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc1);
    let (mut worst_sum, mut worst_shift) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let k = rng.gen_range(1..=8);
        let alpha = 10f64.powf(rng.gen_range(-4.0..=3.0));
        // Rewards on a 2^-32 grid in [0, 1) so integer shifts are exact.
        let r: Vec<f64> = (0..k).map(|_| rng.gen_range(0u64..1 << 32) as f64 / 4294967296.0).collect();
        let c = rng.gen_range(-8i32..=8) as f64;
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let w = compute_model_weights(&r, alpha).unwrap();
        let ws = compute_model_weights(&shifted, alpha).unwrap();
        let sum: f64 = w.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let shift = w.iter().zip(&ws).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_shift = worst_shift.max(shift);
        let mut ok = (sum - 1.0).abs() <= 1e-12 && shift <= 1e-12 && first_argmax(&w) == first_argmax(&r);
        if k >= 2 {
            // The plain sum of squares rounds to 1 once the weights underflow;
            // the log-domain form keeps the strict inequality visible.
            let log_gap = log_one_minus_sum_sq(&log_model_weights(&r, alpha).unwrap());
            ok &= log_gap.is_finite() && log_gap < 0.0;
        }
        if !ok {
            failures.push(case);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(1),
        format!(
            "1000 cases, max |sum-1| {worst_sum:.1e}, max shift diff {worst_shift:.1e}, failing cases {failures:?}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in LossKind::ALL {
        let checks = gradient_suite(kind, 20, 0xacc2, false).unwrap();
        let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        ok &= checks.len() == 20 && worst <= GRAD_REL_TOL && checks.iter().all(|c| c.passed);
        parts.push(format!("{} {worst:.1e}", kind.name()));
    }
    let elapsed = start.elapsed();
    outcome(
        ok && elapsed < Duration::from_secs(120),
        format!("20 cases each, max rel error: {}, {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn closed_forms() -> Outcome {
    let arch = ArchConfig {
        vocab_size: 16,
        context_width: 6,
        hidden_dims: vec![24],
        embed_dim: 8,
        init_seed: 0,
        init_scale: 0.5,
    };
    let prompt = Prompt::new("x", vec![3, 9, 4]);
    let mut dpo_worst = 0.0f64;
    let mut simpo_worst = 0.0f64;
    // ln(1 + e^3), written out independently of the loss code.
    let simpo_expected = (1.0 + 3f64.exp()).ln();
    for seed in 0..20u64 {
        let model = init_model(&ArchConfig { init_seed: seed, ..arch.clone() }).unwrap();
        let pair = form_preference_pair("x", &[rr("m", 0, vec![5, 2, 0], 0.9), rr("m", 1, vec![7, 0], 0.1)]).unwrap();
        let mut g = Graph::new(&model);
        let node = dpo_loss(&mut g, &model, &pair, &prompt, 0.1).unwrap().unwrap();
        dpo_worst = dpo_worst.max((g.scalar(node) - std::f64::consts::LN_2).abs());

        // Same tokens on both sides: equal implicit rewards, distinct scores.
        let same = form_preference_pair("x", &[rr("m", 0, vec![5, 2, 0], 0.9), rr("m", 1, vec![5, 2, 0], 0.1)]).unwrap();
        let mut g = Graph::new(&model);
        let node = simpo_loss(&mut g, &same, &prompt, 2.0, 3.0).unwrap().unwrap();
        let v = g.scalar(node);
        simpo_worst = simpo_worst.max((v - 3.048587).abs()).max((v - simpo_expected).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc3);
    let mut rloo_worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=8);
        let r: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum: f64 = compute_rloo_advantages(&r).unwrap().iter().sum();
        rloo_worst = rloo_worst.max(sum.abs());
    }
    outcome(
        dpo_worst <= 1e-9 && simpo_worst <= 1e-6 && rloo_worst <= 1e-12,
        format!(
            "dpo |loss-ln2| {dpo_worst:.1e}, simpo |loss-3.048587| {simpo_worst:.1e}, rloo max |sum adv| {rloo_worst:.1e} over 1000 cases"
        ),
    )
}

fn variance_reduction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc4);
    let random_rewards: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
    let cases = [
        ("uniform4", vec![0.25; 4], Some(0.25)),
        ("two_source", vec![0.8808, 0.1192], Some(0.7900)),
        ("random5", compute_model_weights(&random_rewards, 0.2).unwrap(), None),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, w, analytic)) in cases.iter().enumerate() {
        let r = verify_prop2(w, 0.3, 1.5, 1_000_000, 0xacc4 + i as u64).unwrap();
        let sum_sq: f64 = w.iter().map(|x| x * x).sum();
        let analytic_ok = match analytic {
            Some(a) => (sum_sq - a).abs() <= 1e-4 && (r.sum_sq_weights - sum_sq).abs() <= 1e-15,
            None => true,
        };
        let mean_ok = (r.sample_mean - 0.3).abs() <= 5.0 * r.standard_error;
        let var_rel = (r.sample_variance - 1.5 * 1.5 * sum_sq).abs() / (1.5 * 1.5 * sum_sq);
        let strict = r.strict_reduction == Some(true) && r.theoretical_variance < 1.5 * 1.5;
        ok &= r.draws == 1_000_000 && analytic_ok && mean_ok && var_rel <= 0.05 && strict;
        parts.push(format!(
            "{name} sum_w2 {sum_sq:.4} mean dev {:.2} se var rel {var_rel:.4}",
            (r.sample_mean - 0.3).abs() / r.standard_error
        ));
    }
    let elapsed = start.elapsed();
    outcome(
        ok && elapsed < Duration::from_secs(30),
        format!("n=1e6: {}, {:.1}s", parts.join("; "), elapsed.as_secs_f64()),
    )
}

fn gradient_linearity() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for method in [Method::Dpo, Method::Simpo, Method::Rloo] {
        for i in 0..20 {
            let r = linearity_case(0xacc5, i, method).unwrap();
            worst = worst.max(r.max_abs_diff);
            ok &= r.passed() && r.max_abs_diff <= 1e-10;
        }
    }
    outcome(ok, format!("20 configurations per method, max |aggregate - weighted sum| {worst:.1e}"))
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn desk_config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml")
}

fn pipeline_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = desk_config_path();
    let mut runs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let out = tmp.path().join(name);
        let steps: [&[&str]; 4] = [
            &["gen-data"],
            &["train", "--stage", "fusesft"],
            &["train", "--stage", "fusepo"],
            &["eval", "--stage", "fusepo"],
        ];
        for step in steps {
            let status = Command::new(env!("CARGO_BIN_EXE_fusionlab"))
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .args(step)
                .env("RAYON_NUM_THREADS", threads)
                .output()
                .unwrap();
            if !status.status.success() {
                return outcome(false, format!("{step:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        runs.push(snapshot(&out));
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let has = |f: &str| runs[0].contains_key(f);
    let complete = ["data/sft.jsonl", "data/po.jsonl", "fusesft.ckpt", "fusepo.ckpt", "report.fusepo.txt"]
        .iter()
        .all(|f| has(f));
    outcome(
        complete && differing.is_empty() && runs[0].len() == runs[1].len(),
        format!(
            "{} files compared across 1 and 3 worker threads, differing {differing:?}",
            runs[0].len()
        ),
    )
}

/// Metrics of one seed: per method, fused and baseline reports plus the
/// fused-over-baseline win rate.
struct SeedResult {
    methods: Vec<(Method, EvalReport, EvalReport, f64)>,
}

fn desk_runs(base: &ExperimentConfig) -> Vec<SeedResult> {
    (0..DESK_SEEDS)
        .map(|seed| {
            let cfg = ExperimentConfig { seed, ..base.clone() };
            let data = generate_data(&cfg).unwrap();
            let (fused1, _) = run_stage1(&cfg, &data.sft, Stage::Fusesft).unwrap();
            let (base1, _) = run_stage1(&cfg, &data.sft, Stage::Sft).unwrap();
            let methods = [Method::Dpo, Method::Simpo, Method::Rloo]
                .into_iter()
                .map(|method| {
                    let mut c = cfg.clone();
                    c.stage2.hyper.method = method;
                    if method == Method::Simpo {
                        c.weighting.alpha_po = SIMPO_ALPHA_PO;
                    }
                    let (fused, _) = run_stage2(&c, &data.po, &fused1, Stage::Fusepo).unwrap();
                    let (plain, _) = run_stage2(&c, &data.po, &base1, Stage::PoBaseline).unwrap();
                    let ef = evaluate(&c, &fused, &data.eval, "fused").unwrap();
                    let eb = evaluate(&c, &plain, &data.eval, "baseline").unwrap();
                    let wr = pairwise_winrate(&ef.generations.outputs, &eb.generations.outputs, &c.reward).unwrap();
                    (method, ef, eb, wr)
                })
                .collect();
            SeedResult { methods }
        })
        .collect()
}

fn per_method<F>(runs: &[SeedResult], method: Method, f: F) -> Vec<f64>
where
    F: Fn(&EvalReport, &EvalReport, f64) -> f64,
{
    runs.iter()
        .map(|r| {
            let (_, ef, eb, wr) = r.methods.iter().find(|m| m.0 == method).unwrap();
            f(ef, eb, *wr)
        })
        .collect()
}

fn fusion_benefit(runs: &[SeedResult], cfg: &ExperimentConfig, elapsed: Duration) -> Outcome {
    let heldout = runs[0].methods[0].1.prompts;
    let mut ok = cfg.sources.len() == 4 && heldout >= 200 && runs.len() >= 5;
    let wr = median(per_method(runs, Method::Dpo, |_, _, w| w));
    ok &= wr >= 0.5;
    let mut parts = vec![format!("dpo win rate {wr:.3}")];
    for method in [Method::Dpo, Method::Simpo, Method::Rloo] {
        let f = median(per_method(runs, method, |a, _, _| a.mean_reward.unwrap()));
        let b = median(per_method(runs, method, |_, b, _| b.mean_reward.unwrap()));
        ok &= f >= b;
        parts.push(format!("{method} reward {f:.4} vs {b:.4}"));
    }
    ok &= elapsed < Duration::from_secs(30 * 60);
    outcome(
        ok,
        format!(
            "K=4, {heldout} held-out prompts, {} seeds, medians: {}, {:.0}s",
            runs.len(),
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

/// Independent enumeration: over all ordered pairs, the pair with the
/// largest reward gap; the first-listed pair wins ties. `None` when every
/// gap is zero.
fn widest_pair(rewards: &[f64]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..rewards.len() {
        for b in 0..rewards.len() {
            let gap = rewards[a] - rewards[b];
            if a != b && gap > 0.0 && best.map_or(true, |(_, _, g)| gap > g) {
                best = Some((a, b, gap));
            }
        }
    }
    best.map(|(a, b, _)| (a, b))
}

fn rank_fixture() -> (Vec<FusionSample>, HashMap<Vec<Token>, f64>) {
    // rewards[prompt][source][response], scores likewise.
    let rewards = [
        [[0.2, 0.9, 0.5], [0.4, 0.1, 0.7], [0.3, 0.6, 0.35]],
        [[0.5, 0.5, 0.5], [0.8, 0.2, 0.3], [0.1, 0.2, 0.9]],
        [[0.1, 0.4, 0.3], [0.6, 0.9, 0.0], [0.2, 0.8, 0.5]],
    ];
    let scores = [
        [[0.3, 0.8, 0.1], [0.5, 0.6, 0.2], [0.1, 0.4, 0.9]],
        [[0.6, 0.1, 0.2], [0.1, 0.9, 0.5], [0.2, 0.3, 0.7]],
        [[0.5, 0.2, 0.9], [0.3, 0.15, 0.1], [0.4, 0.35, 0.6]],
    ];
    let mut table = HashMap::new();
    let samples = (0..3)
        .map(|p| {
            let sources = (0..3)
                .map(|s| {
                    let id = format!("m{s}");
                    let rs = (0..3)
                        .map(|j| {
                            let tokens = vec![(100 * p + 10 * s + j + 1) as Token, 0];
                            table.insert(tokens.clone(), scores[p][s][j]);
                            rr(&id, j, tokens, rewards[p][s][j])
                        })
                        .collect();
                    (id, rs)
                })
                .collect();
            build_fusion_sample(&Prompt::new(format!("p{p}"), vec![1]), sources, &WeightingConfig::default(), SplitTag::Po)
                .unwrap()
        })
        .collect();
    (samples, table)
}

fn rank_oracles_agree() -> (bool, String) {
    let (samples, table) = rank_fixture();
    let score = |_: &Prompt, y: &[Token]| Ok(table[y]);
    let intra = intra_rank_accuracy_by(&samples, score).unwrap();
    let (cross, cross_n) = cross_rank_accuracy_by(&samples, Representative::Best, 0, score).unwrap();

    let mut correct = [0usize; 3];
    let mut counts = [0usize; 3];
    let (mut cross_ok, mut cross_count) = (0usize, 0usize);
    for s in &samples {
        let mut reps = Vec::new();
        for (i, e) in s.per_source.iter().enumerate() {
            let r: Vec<f64> = e.responses.iter().map(|x| x.reward).collect();
            if let Some((a, b)) = widest_pair(&r) {
                counts[i] += 1;
                correct[i] += usize::from(table[e.responses[a].tokens()] > table[e.responses[b].tokens()]);
            }
            reps.push(&e.responses[first_argmax(&r)]);
        }
        let r: Vec<f64> = reps.iter().map(|x| x.reward).collect();
        if let Some((a, b)) = widest_pair(&r) {
            cross_count += 1;
            cross_ok += usize::from(table[reps[a].tokens()] > table[reps[b].tokens()]);
        }
    }
    let per_source: Vec<f64> = (0..3).map(|i| correct[i] as f64 / counts[i] as f64).collect();
    let oracle_cross = cross_ok as f64 / cross_count as f64;
    // Worked by hand: per source 1/2, 1/3, 2/3; cross 2/3.
    let hand = per_source == [1.0 / 2.0, 1.0 / 3.0, 2.0 / 3.0] && counts == [2, 3, 3] && oracle_cross == 2.0 / 3.0;
    let ok = hand
        && intra.per_source == per_source
        && intra.counts == counts
        && cross == oracle_cross
        && cross_n == cross_count;
    (ok, format!("fixture intra {:?} cross {cross:.4}", intra.per_source))
}

fn rank_accuracy(runs: &[SeedResult]) -> Outcome {
    let (fixture_ok, fixture) = rank_oracles_agree();
    let mut ok = fixture_ok;
    let mut parts = vec![fixture];
    for method in [Method::Dpo, Method::Simpo, Method::Rloo] {
        let fi = median(per_method(runs, method, |a, _, _| a.intra.as_ref().unwrap().mean));
        let bi = median(per_method(runs, method, |_, b, _| b.intra.as_ref().unwrap().mean));
        let fc = median(per_method(runs, method, |a, _, _| a.cross.unwrap().0));
        let bc = median(per_method(runs, method, |_, b, _| b.cross.unwrap().0));
        ok &= fi >= bi && fc >= bc;
        parts.push(format!("{method} intra {fi:.4} vs {bi:.4} cross {fc:.4} vs {bc:.4}"));
    }
    outcome(ok, format!("medians: {}", parts.join(", ")))
}

fn bias_variance(runs: &[SeedResult]) -> Outcome {
    let fixture = bias_variance_report(&[0.1, 0.3], &[0.0, 0.0]).unwrap();
    let fixture_ok = (fixture.absolute_bias - 0.2).abs() <= 1e-15 && (fixture.variance - 0.01).abs() <= 1e-15;
    let f = median(per_method(runs, Method::Dpo, |a, _, _| a.bias.as_ref().unwrap().absolute_bias));
    let b = median(per_method(runs, Method::Dpo, |_, b, _| b.bias.as_ref().unwrap().absolute_bias));
    outcome(
        fixture_ok && f <= b,
        format!(
            "fixture bias {:.3} variance {:.3}; dpo median absolute bias {f:.4} vs {b:.4}",
            fixture.absolute_bias, fixture.variance
        ),
    )
}

fn k_po_sweep(base: &ExperimentConfig) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let values: Vec<String> = ["1", "2", "4"].map(String::from).to_vec();
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); values.len()];
    let mut errors = Vec::new();
    for seed in 0..DESK_SEEDS {
        let cfg = ExperimentConfig {
            seed,
            output_dir: tmp.path().join(format!("seed{seed}")),
            ..base.clone()
        };
        let (table, _) = cmd_sweep(&cfg, SweepAxis::KPo, &values, None).unwrap();
        for (i, row) in table.rows.iter().enumerate() {
            match row.report.as_ref().and_then(|r| r.mean_reward) {
                Some(m) => per_k[i].push(m),
                None => errors.push(format!("seed {seed} k_po {}: {:?}", row.value, row.error)),
            }
        }
    }
    let medians: Vec<f64> = per_k.into_iter().map(median).collect();
    let ok = errors.is_empty() && medians.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        ok,
        format!(
            "median mean reward k_po=1 {:.4}, k_po=2 {:.4}, k_po=4 {:.4} over {DESK_SEEDS} seeds{}",
            medians[0],
            medians[1],
            medians[2],
            if errors.is_empty() { String::new() } else { format!(", errors {errors:?}") }
        ),
    )
}

fn main() {
    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all &= o.passed;
        println!("criterion {n:>2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "weighting exactness", weighting_exactness());
    report(2, "gradient suite", gradient_checks());
    report(3, "closed-form losses", closed_forms());
    report(4, "aggregate variance", variance_reduction());
    report(5, "gradient linearity", gradient_linearity());
    report(6, "pipeline determinism", pipeline_determinism());

    let desk = ExperimentConfig::load(&desk_config_path()).unwrap();
    let start = Instant::now();
    let runs = desk_runs(&desk);
    let elapsed = start.elapsed();
    report(7, "fusion benefit", fusion_benefit(&runs, &desk, elapsed));
    report(8, "rank accuracy", rank_accuracy(&runs));
    report(9, "bias and variance", bias_variance(&runs));
    report(10, "k_po sweep", k_po_sweep(&desk));
    if !all {
        std::process::exit(1);
    }
}

//! End-to-end acceptance run: teacher training, every transfer method over
//! ten seeds, the epsilon = 0 reduction, the advice heatmap and a fixed-seed
//! pass over the correctness properties. Prints one PASS/FAIL line per
//! criterion.
//!
//! Environment:
//! - `IAA_ACCEPTANCE_SEEDS`: number of student seeds (default 10).
//! - `IAA_ACCEPTANCE_STRICT`: exit non-zero when any criterion fails.
//! - `IAA_ACCEPTANCE_DIR`: where runs are written (default under the target
//!   directory).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use iaa_core::advising::{correct_from_batch, IntrospectiveAdvisor};
use iaa_core::env::GridWorld;
use iaa_core::experiment::{
    aggregate_heatmap, mean_return_at, read_advice, relative_change, replay_issued_count, run_seed, run_transfer,
    train_teacher, RunSummary,
};
use iaa_core::nn::{encode_layers, Activation, Mlp};
use iaa_core::policy::{softmax, ActorCritic, TeacherBundle};
use iaa_core::ppo::{collect_rollout, gae, EnvPool, MAX_WEIGHT};
use iaa_core::rng::{stream_rng, RngStreams, Stream};
use iaa_core::{ExperimentConfig, IntrospectionConfig, MetricsRow, TransferKind};

const TEACHER_SEEDS: [u64; 4] = [0, 1, 2, 3];
const TEACHER_TARGET: f64 = 0.85;
const TEACHER_BUDGET_SECONDS: f64 = 1800.0;
const EARLY_STEP: u64 = 250_000;
const FINAL_STEP: u64 = 500_000;
const TIE: f64 = 0.03;
const HEATMAP_SEEDS: usize = 3;
const BOTTOM_HALF_FROM: usize = 6;

struct Report {
    lines: Vec<(bool, String, String)>,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, name.to_string(), detail));
    }

    fn error(&mut self, name: &str, err: impl std::fmt::Display) {
        self.check(name, false, format!("error: {err}"));
    }
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn base_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn random_teacher(seed: u64, hidden: &[usize]) -> TeacherBundle {
    let cfg = ExperimentConfig::default();
    let policy = ActorCritic::new_random(cfg.source.observation_len(), hidden, 5, Activation::Tanh, &mut stream_rng(seed, Stream::Init));
    TeacherBundle::new(policy, cfg.ppo.learning_rate)
}

// ---------------------------------------------------------------- properties

fn reference_forward(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = m.layers().len();
    for (li, l) in m.layers().iter().enumerate() {
        let mut out = l.bias.clone();
        for (i, xi) in h.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * l.weights[i * l.outputs + j];
            }
        }
        if li + 1 < n {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = out;
    }
    h
}

fn worst_gradient_error(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut rng = stream_rng(seed, Stream::Init);
        let sizes = [4, 6, 6, 3];
        let mut mlp = Mlp::<f64>::zeros(&sizes, Activation::Tanh, false);
        for l in mlp.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let og: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = mlp.backward(&x, &og).unwrap();
        let f = |m: &Mlp<f64>| reference_forward(m, &x).iter().zip(&og).map(|(a, b)| a * b).sum::<f64>();
        for l in 0..mlp.layers().len() {
            for idx in 0..mlp.layers()[l].weights.len() {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                plus.layers_mut()[l].weights[idx] += 1e-6;
                minus.layers_mut()[l].weights[idx] -= 1e-6;
                let numeric = (f(&plus) - f(&minus)) / 2e-6;
                let analytic = grads.layers[l].weights[idx];
                let err = (analytic - numeric).abs();
                worst = worst.max(err / analytic.abs().max(numeric.abs()).max(1e-6));
            }
        }
    }
    worst
}

fn worst_gae_error(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut rng = stream_rng(seed, Stream::Environment);
        let envs = 1 + (seed as usize % 3);
        let n = envs * rng.random_range(1..30);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boot: Vec<f64> = (0..envs).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = 0.99;
        let (adv, _) = gae(&r, &v, &boot, &d, envs, g, 0.0).unwrap();
        let (_, ret) = gae(&r, &v, &boot, &d, envs, g, 1.0).unwrap();
        for i in 0..n {
            let next = if i + envs < n { v[i + envs] } else { boot[i % envs] };
            let live = if d[i] { 0.0 } else { 1.0 };
            worst = worst.max((adv[i] - (r[i] + g * live * next - v[i])).abs());
        }
        let mut mc = vec![0.0; n];
        for (e, &b) in boot.iter().enumerate() {
            let mut acc = b;
            for i in (e..n).step_by(envs).collect::<Vec<_>>().into_iter().rev() {
                acc = r[i] + g * if d[i] { 0.0 } else { acc };
                mc[i] = acc;
            }
        }
        worst = mc.iter().zip(&ret).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    worst
}

fn worst_softmax_error(cases: u64) -> f64 {
    let mut rng = stream_rng(9, Stream::StudentPolicy);
    (0..cases)
        .map(|_| {
            let logits: Vec<f32> = (0..5).map(|_| rng.random_range(-30.0..30.0)).collect();
            (softmax(&logits).unwrap().iter().sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn ratio_structure_violations(seeds: u64) -> usize {
    let hidden = [32, 32];
    let cfg = ExperimentConfig::default();
    let mut violations = 0;
    for seed in 0..seeds {
        let teacher = random_teacher(seed + 100, &hidden);
        let world = GridWorld::new(cfg.target).unwrap();
        let student = ActorCritic::new_random(world.observation_len(), &hidden, 5, Activation::Tanh, &mut stream_rng(seed, Stream::Init));
        let mut streams = RngStreams::new(seed);
        let mut pool = EnvPool::new(world, 2, &mut streams.environment);
        // A gate probability near one half yields both advised and own actions.
        let icfg = IntrospectionConfig {
            epsilon: 0.9,
            decay: 0.999,
            burn_in: 0,
        };
        let mut advisor = IntrospectiveAdvisor::new(&teacher, icfg);
        let batch = collect_rollout(&mut pool, &student, Some(&mut advisor), 128, 700, &mut streams).unwrap();
        let advised = batch.transitions.iter().filter(|t| t.advised).count();
        if advised == 0 || advised == batch.len() {
            violations += batch.len();
        }
        let (rt, rs) = correct_from_batch(&batch).unwrap();
        for (i, t) in batch.transitions.iter().enumerate() {
            let ones = usize::from(rt[i] == 1.0) + usize::from(rs[i] == 1.0);
            let branch_is_one = if t.advised { rt[i] == 1.0 } else { rs[i] == 1.0 };
            let in_range = rt[i].max(rs[i]) <= MAX_WEIGHT;
            let equal_probs = t.teacher_log_prob == Some(t.student_log_prob);
            if !branch_is_one || !in_range || (ones != 1 && !equal_probs) {
                violations += 1;
            }
        }
    }
    violations
}

fn small_run(method: TransferKind, steps: u64, seed: u64, iaa: IntrospectionConfig, dir: &Path, teacher: Option<TeacherBundle>) -> RunSummary {
    let cfg = ExperimentConfig {
        method,
        total_steps: steps,
        hidden: vec![32, 32],
        checkpoint_every: 1024,
        iaa,
        ..ExperimentConfig::default()
    };
    run_seed(&cfg, &cfg.target, seed, teacher, dir).unwrap()
}

fn property_suite(report: &mut Report, root: &Path) {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut note = |name: &str, ok: bool, detail: String| {
        println!("    {} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    let g = worst_gradient_error(20);
    note("gradient finite differences", g < 1e-4, format!("worst relative error {g:.2e} (< 1e-4)"));
    let e = worst_gae_error(200);
    note("GAE lambda 0/1 oracles", e <= 1e-5, format!("worst abs error {e:.2e} (<= 1e-5)"));
    let s = worst_softmax_error(10_000);
    note("softmax normalisation", s <= 1e-6, format!("worst |sum - 1| {s:.2e} (<= 1e-6)"));
    let v = ratio_structure_violations(10);
    note("exactly one ratio is 1", v == 0, format!("{v} violating samples over 10 rollouts"));

    let hidden = [32, 32];
    let mut replay_records = Vec::new();
    let mut early = 0;
    for (seed, burn_in) in [(0u64, 0u64), (1, 1500), (2, 3000)] {
        let dir = root.join(format!("burn-in-{seed}"));
        let iaa = IntrospectionConfig {
            epsilon: 1.0,
            decay: 1.0,
            burn_in,
        };
        small_run(TransferKind::Iaa, 4096, seed, iaa, &dir, Some(random_teacher(seed, &hidden)));
        let records = read_advice(&dir.join("advice.csv")).unwrap();
        early += records.iter().filter(|r| r.issued && r.global_step <= burn_in).count();
        replay_records.extend(records);
    }
    note("no advice before burn-in", early == 0, format!("{early} issued records at or before burn-in over 3 runs"));

    let teacher = random_teacher(50, &hidden);
    let want = hex::encode(Sha256::digest(encode_layers([&teacher.policy().trunk.layers()[0]])));
    let run = small_run(TransferKind::FrozenInput, 4096, 5, IntrospectionConfig::default(), &root.join("frozen"), Some(teacher));
    let stable = run.checkpoints.iter().all(|c| c.trunk_layer_digests[0] == want);
    note(
        "frozen-layer hash stability",
        stable && run.checkpoints.len() >= 4,
        format!("{} checkpoints, input-layer digest {}", run.checkpoints.len(), if stable { "unchanged" } else { "changed" }),
    );

    let a = root.join("determinism-a");
    let b = root.join("determinism-b");
    for d in [&a, &b] {
        small_run(TransferKind::Iaa, 2048, 7, IntrospectionConfig::default(), d, Some(random_teacher(7, &hidden)));
    }
    let same = fs::read(a.join("metrics.csv")).unwrap() == fs::read(b.join("metrics.csv")).unwrap();
    note("metrics.csv byte-determinism", same, format!("repeated (config, seed) runs {}", if same { "identical" } else { "differ" }));

    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
    let counts: Vec<usize> = grid.iter().map(|&e| replay_issued_count(&replay_records, e)).collect();
    let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
    note(
        "advice count monotone in epsilon",
        monotone,
        format!("{} replayed decisions, counts {} .. {}", replay_records.len(), counts[0], counts[counts.len() - 1]),
    );

    let detail = if failures.is_empty() {
        format!("8 of 8 properties hold ({:.0}s)", started.elapsed().as_secs_f64())
    } else {
        format!("failing: {}", failures.join(", "))
    };
    report.check("Property suite", failures.is_empty(), detail);
}

// --------------------------------------------------------- epsilon = 0 check

fn epsilon_zero(report: &mut Report, root: &Path, teacher_dir: Option<&Path>) {
    let name = "epsilon = 0 reduces IAA to baseline";
    let cfg = ExperimentConfig {
        total_steps: 10_240,
        iaa: IntrospectionConfig {
            epsilon: 0.0,
            ..IntrospectionConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let mut teacher = match teacher_dir {
        Some(d) => match TeacherBundle::load(d, cfg.ppo.learning_rate) {
            Ok((t, _)) => t,
            Err(e) => return report.error(name, e),
        },
        None => random_teacher(11, &cfg.hidden),
    };
    // Offset the fine-tuned critic so the two critics differ on every state.
    for b in &mut teacher.finetuned_critic.value_head.layers_mut()[0].bias {
        *b += 0.5;
    }
    let iaa_cfg = ExperimentConfig {
        method: TransferKind::Iaa,
        ..cfg.clone()
    };
    let base_cfg = ExperimentConfig {
        method: TransferKind::Baseline,
        ..cfg
    };
    let seed = 3;
    let iaa = run_seed(&iaa_cfg, &iaa_cfg.target, seed, Some(teacher), &root.join("eps0-iaa"));
    let base = run_seed(&base_cfg, &base_cfg.target, seed, None, &root.join("eps0-baseline"));
    match (iaa, base) {
        (Ok(i), Ok(b)) => {
            let min_gap = read_advice(&root.join("eps0-iaa").join("advice.csv"))
                .map(|recs| {
                    recs.iter()
                        .filter_map(|r| Some((r.value_new? - r.value_src?).abs()))
                        .fold(f64::INFINITY, f64::min)
                })
                .unwrap_or(f64::NAN);
            let same_traj = i.trajectory_digest == b.trajectory_digest;
            let same_student = i.student.digest() == b.student.digest();
            report.check(
                name,
                i.advice_issued == 0 && same_traj && same_student && min_gap > 0.0,
                format!(
                    "advice issued {}, min |V_new - V_src| {min_gap:.3}, trajectory digest {}, student digest {} over {} steps",
                    i.advice_issued,
                    if same_traj { "identical" } else { "differs" },
                    if same_student { "identical" } else { "differs" },
                    i.rows.last().map_or(0, |r| r.global_step)
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => report.error(name, e),
    }
}

// ------------------------------------------------------- full-scale training

fn teacher_quality(report: &mut Report, root: &Path) -> Option<PathBuf> {
    let name = "Teacher quality (best of 4 seeds >= 0.85 at 500K, <= 30 min per seed)";
    let cfg = ExperimentConfig {
        seeds: TEACHER_SEEDS.to_vec(),
        ..base_config(&root.join("teacher"))
    };
    match train_teacher(&cfg) {
        Ok(sel) => {
            let best = sel.final_returns.iter().filter_map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max);
            let slowest = sel.wall_seconds.iter().map(|(_, s)| *s).fold(0.0, f64::max);
            let per_seed: Vec<String> = sel
                .final_returns
                .iter()
                .map(|(s, r)| format!("s{s}={}", r.map_or("-".into(), |v| format!("{v:.3}"))))
                .collect();
            report.check(
                name,
                best >= TEACHER_TARGET && slowest <= TEACHER_BUDGET_SECONDS,
                format!("best {best:.3} ({}), slowest seed {slowest:.0}s", per_seed.join(" ")),
            );
            Some(sel.teacher_dir)
        }
        Err(e) => {
            report.error(name, e);
            None
        }
    }
}

fn transfer_runs(root: &Path, teacher: &Path, seeds: usize) -> BTreeMap<&'static str, iaa_core::Result<Vec<Vec<MetricsRow>>>> {
    let methods = [
        TransferKind::Baseline,
        TransferKind::Iaa,
        TransferKind::AaDecay,
        TransferKind::FinetuneAll,
        TransferKind::Aa,
    ];
    let mut out = BTreeMap::new();
    for kind in methods {
        let started = Instant::now();
        let cfg = ExperimentConfig {
            method: kind,
            seeds: (0..seeds as u64).collect(),
            teacher_checkpoint: Some(teacher.to_path_buf()),
            ..base_config(&root.join("transfer"))
        };
        let res = run_transfer(&cfg).map(|runs| runs.into_iter().map(|r| r.rows).collect::<Vec<_>>());
        if let Ok(rows) = &res {
            let m = mean_return_at(rows, FINAL_STEP).unwrap_or(f64::NAN);
            println!("    {:<14} {} seeds, mean return at 500K {m:.3} ({:.0}s)", kind.name(), rows.len(), started.elapsed().as_secs_f64());
        }
        out.insert(kind.name(), res);
    }
    out
}

fn transfer_criteria(report: &mut Report, runs: &BTreeMap<&'static str, iaa_core::Result<Vec<Vec<MetricsRow>>>>) {
    let mean = |m: &str, step: u64| -> Result<f64, String> {
        match runs.get(m) {
            Some(Ok(rows)) => mean_return_at(rows, step).map_err(|e| e.to_string()),
            Some(Err(e)) => Err(format!("{m}: {e}")),
            None => Err(format!("{m}: not run")),
        }
    };
    let seeds = match runs.get("iaa") {
        Some(Ok(r)) => r.len(),
        _ => 0,
    };

    match (mean("iaa", EARLY_STEP), mean("baseline", EARLY_STEP)) {
        (Ok(i), Ok(b)) => {
            let rel = relative_change(i, b);
            report.check(
                "IAA vs Baseline at 250K (>= +30% relative)",
                seeds >= 10 && rel.is_some_and(|r| r >= 30.0),
                format!(
                    "IAA {i:.3}, Baseline {b:.3}, relative {} over {seeds} seeds",
                    rel.map_or("undefined".into(), |r| format!("{r:+.1}%"))
                ),
            );
        }
        (Err(e), _) | (_, Err(e)) => report.error("IAA vs Baseline at 250K", e),
    }

    let bound = |report: &mut Report, name: &str, m: &str, ok: fn(f64) -> bool| match mean(m, FINAL_STEP) {
        Ok(v) => report.check(name, ok(v), format!("{m} mean {v:.3}")),
        Err(e) => report.error(name, e),
    };
    bound(report, "IAA mean at 500K >= 0.85", "iaa", |v| v >= 0.85);
    bound(report, "Baseline mean at 500K <= 0.70", "baseline", |v| v <= 0.70);

    let order = |report: &mut Report, hi: &str, lo: &str| {
        let name = format!("{hi} > {lo} at 500K (margin > {TIE})");
        match (mean(hi, FINAL_STEP), mean(lo, FINAL_STEP)) {
            (Ok(a), Ok(b)) => report.check(&name, a - b > TIE, format!("{hi} {a:.3}, {lo} {b:.3}, difference {:+.3}", a - b)),
            (Err(e), _) | (_, Err(e)) => report.error(&name, e),
        }
    };
    order(report, "iaa", "aa_decay");
    order(report, "aa_decay", "baseline");
    order(report, "baseline", "finetune_all");
    bound(report, "AA mean at 500K < 0.3", "aa", |v| v < 0.3);
}

fn heatmap_check(report: &mut Report, root: &Path, teacher: &Path, seeds: usize) {
    let name = "Heatmap at epsilon = 0.1 (>= 70% of advice in bottom half)";
    let mut cfg = ExperimentConfig {
        method: TransferKind::Iaa,
        seeds: (0..seeds as u64).collect(),
        teacher_checkpoint: Some(teacher.to_path_buf()),
        ..base_config(&root.join("heatmap"))
    };
    cfg.iaa.epsilon = 0.1;
    let runs = match run_transfer(&cfg) {
        Ok(r) => r,
        Err(e) => return report.error(name, e),
    };
    let files: Vec<PathBuf> = runs.iter().map(|r| r.run_dir.join("advice.csv")).collect();
    match aggregate_heatmap(&files, cfg.target.grid_side) {
        Ok(h) => {
            let frac = h.fraction_below(BOTTOM_HALF_FROM);
            report.check(
                name,
                frac.is_some_and(|f| f >= 0.7),
                format!(
                    "{} issued over {seeds} seeds, {} with y > {BOTTOM_HALF_FROM}",
                    h.total(),
                    frac.map_or("no advice".into(), |f| format!("{:.1}%", 100.0 * f))
                ),
            );
        }
        Err(e) => report.error(name, e),
    }
}

fn main() {
    let started = Instant::now();
    let seeds = env_usize("IAA_ACCEPTANCE_SEEDS", 10);
    let root = std::env::var_os("IAA_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    if root.exists() {
        fs::remove_dir_all(&root).expect("clear acceptance directory");
    }
    fs::create_dir_all(&root).expect("create acceptance directory");
    println!("acceptance: {seeds} student seeds, output under {}", root.display());

    let mut report = Report { lines: Vec::new() };
    property_suite(&mut report, &root.join("properties"));
    let teacher = teacher_quality(&mut report, &root);
    epsilon_zero(&mut report, &root, teacher.as_deref());
    match &teacher {
        Some(t) => {
            let runs = transfer_runs(&root, t, seeds);
            transfer_criteria(&mut report, &runs);
            heatmap_check(&mut report, &root, t, HEATMAP_SEEDS.min(seeds));
        }
        None => report.error("Transfer criteria", "no teacher"),
    }

    let passed = report.lines.iter().filter(|l| l.0).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1} min",
        report.lines.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    let summary: Vec<_> = report
        .lines
        .iter()
        .map(|(p, n, d)| serde_json::json!({"criterion": n, "pass": p, "detail": d}))
        .collect();
    let _ = fs::write(root.join("summary.json"), serde_json::to_vec_pretty(&summary).unwrap());
    if passed < report.lines.len() && std::env::var_os("IAA_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

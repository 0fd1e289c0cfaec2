//! Acceptance suite: one pass/fail line per criterion. Exits non-zero when
//! any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hbm_analytics::join::{self, JoinFlags, JoinParams, JoinScenario};
use hbm_analytics::mem_model::HbmGeometry;
use hbm_analytics::select::{self, RangePredicate, SelectParams, SelectionScenario};
use hbm_analytics::sgd::{
    self, generate_synthetic, generate_synthetic_noisy, DatasetPreset, LabelKind, Loss, Model,
    PipelineModel, SgdConfig, SgdPlacement, SgdScenario, PRESETS,
};
use hbm_analytics::traffic::{run_microbenchmark, MicrobenchSpec};
use hbm_analytics::{PlacementMode, SystemConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: its checks and their details.
struct Verdict {
    checks: Vec<(bool, String)>,
}

impl Verdict {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push((ok, detail.into()));
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.0)
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn timed(verdict: &mut Verdict, limit: Duration, start: Instant) {
    let elapsed = start.elapsed();
    verdict.check(elapsed < limit, format!("runtime {:.2?} < {:?}", elapsed, limit));
}

fn criterion_1() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let curve = |g: &HbmGeometry, s| {
        let spec = MicrobenchSpec {
            separation_mib: s,
            ..MicrobenchSpec::default()
        };
        run_microbenchmark(g, &spec).expect("microbenchmark")
    };
    let g200 = HbmGeometry::default();
    let ideal = curve(&g200, 256);
    let slope = ideal[0].aggregate_gbps;
    let linear = ideal
        .iter()
        .all(|p| within(p.aggregate_gbps, slope * f64::from(p.num_ports), 1e-9));
    v.check(linear, "S=256 MiB curve linear in port count");
    let top = ideal[31].aggregate_gbps;
    v.check(within(top, 190.0, 0.03), format!("32 ports @200 MHz: {top:.2} GB/s vs 190 +-3%"));
    let top300 = curve(&HbmGeometry::at_300mhz(), 256)[31].aggregate_gbps;
    v.check(within(top300, 282.0, 0.03), format!("32 ports @300 MHz: {top300:.2} GB/s vs 282 +-3%"));
    let flat = curve(&g200, 0);
    let bound = g200.channel_peak_gbps();
    v.check(
        flat.iter().all(|p| within(p.aggregate_gbps, bound, 1e-9)),
        format!("S=0 flat at single-channel bound {bound:.3} GB/s"),
    );
    timed(&mut v, Duration::from_secs(1), start);
    v
}

fn criterion_2() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut failures = 0;
    let mut unaligned = 0;
    let mut edge_hits = 0;
    let trials = 1000;
    for trial in 0..trials {
        let n = match trial {
            0 => 0,
            1 => 1_000_000,
            2 => 999_999,
            _ => (10f64.powf(rng.random_range(0.0..6.0)) as usize).min(1_000_000),
        };
        let spread = if rng.random_bool(0.5) { 100 } else { i32::MAX };
        let column: Vec<i32> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        // Bounds drawn from the data make the strict comparisons matter.
        let pick = |rng: &mut ChaCha8Rng| {
            if !column.is_empty() && rng.random_bool(0.7) {
                column[rng.random_range(0..column.len())]
            } else {
                rng.random_range(-spread..spread)
            }
        };
        let a = pick(&mut rng);
        let b = pick(&mut rng);
        let predicate = RangePredicate::new(a.min(b), a.max(b));
        let (padded, _) = select::engine_select(&column, predicate, SelectParams::default());
        let oracle = select::select_oracle(&column, predicate);
        let ok = select::compact(&padded).is_ok_and(|got| got == oracle)
            && padded.valid_slots() == oracle.num_matches as u64
            && oracle
                .indices
                .iter()
                .all(|&i| column[i as usize] != predicate.lower && column[i as usize] != predicate.upper);
        if !ok {
            failures += 1;
        }
        if n % 16 != 0 {
            unaligned += 1;
        }
        if column.iter().any(|&x| x == predicate.lower || x == predicate.upper) {
            edge_hits += 1;
        }
    }
    v.check(failures == 0, format!("{trials} trials, {failures} mismatches against the oracle"));
    v.check(unaligned > 0 && edge_hits > 0, format!("{unaligned} trials with n % 16 != 0, {edge_hits} with values on a bound"));
    timed(&mut v, Duration::from_secs(30), start);
    v
}

fn criterion_3() -> Verdict {
    let mut v = Verdict::new();
    let config = SystemConfig::default();
    let rate = |selectivity, placement| {
        let scenario = SelectionScenario {
            num_engines: 14,
            selectivity,
            placement,
            include_output_copy: false,
            input_bytes: 4 * 128_000_000,
        };
        select::model_selection_rate(&config, &scenario).expect("selection model").gbps()
    };
    let zero = rate(0.0, PlacementMode::Partitioned);
    v.check(within(zero, 154.0, 0.05), format!("14 engines, 0%: {zero:.2} GB/s vs 154 +-5%"));
    let ratio = rate(1.0, PlacementMode::Partitioned) / zero;
    v.check((0.45..=0.55).contains(&ratio), format!("100%/0% rate ratio {ratio:.3} in [0.45, 0.55]"));
    let non = rate(0.0, PlacementMode::NonPartitioned);
    v.check(
        non >= 16.0 / 1.5 && non <= 16.0 * 1.5,
        format!("nonpartitioned {non:.2} GB/s within 1.5x of 16"),
    );
    v.check(zero / non >= 8.0, format!("partitioned/nonpartitioned {:.2}x >= 8x", zero / non));
    v
}

fn criterion_4() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let trials = 500;
    let mut failures = 0;
    let mut multi_pass = 0;
    let mut duplicate_heavy = 0;
    let mut empty = 0;
    for trial in 0..trials {
        let (l_len, s_len) = match trial {
            0 => (0, 100),
            1 => (100, 0),
            2 => (0, 0),
            3 => (500, 8192),
            4 => (500, 8193),
            _ => (rng.random_range(0..1200), rng.random_range(0..20_000)),
        };
        let heavy = rng.random_bool(0.4);
        let domain = if heavy { 64 } else { 1 << 20 };
        let l: Vec<i32> = (0..l_len).map(|_| rng.random_range(0..domain)).collect();
        let s: Vec<i32> = (0..s_len).map(|_| rng.random_range(0..domain)).collect();
        let flags = JoinFlags {
            s_unique: false,
            handle_collisions: true,
            ..JoinFlags::default()
        };
        let engines = rng.random_range(1..=7);
        let got = join::join_engines(&l, &s, engines, &flags, JoinParams::default())
            .and_then(|(padded, _)| join::compact(&padded));
        let oracle = join::join_oracle(&l, &s);
        if !got.is_ok_and(|g| g == oracle) {
            failures += 1;
        }
        multi_pass += usize::from(s_len > 8192);
        duplicate_heavy += usize::from(heavy && s_len > 64);
        empty += usize::from(l_len == 0 || s_len == 0);
    }
    v.check(failures == 0, format!("{trials} trials, {failures} mismatches against the nested-loop oracle"));
    v.check(
        multi_pass > 0 && duplicate_heavy > 0 && empty > 0,
        format!("{multi_pass} multi-pass, {duplicate_heavy} duplicate-heavy, {empty} empty-side trials"),
    );
    timed(&mut v, Duration::from_secs(60), start);
    v
}

/// Rank order of `values`, highest first.
fn order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

fn criterion_5() -> Verdict {
    let mut v = Verdict::new();
    let config = SystemConfig::default();
    let rate = |num_engines, flags, s_tuples| {
        let scenario = JoinScenario {
            num_engines,
            s_tuples,
            flags,
            ..JoinScenario::default()
        };
        join::model_join_rate(&config, &scenario).expect("join model")
    };
    let best = JoinFlags::default();
    let seven = rate(7, best, 4096).gbps();
    v.check(within(seven, 80.95, 0.10), format!("best case 7 engines: {seven:.2} GB/s vs 80.95 +-10%"));
    let one = rate(1, best, 4096).gbps();
    v.check(within(one, 12.77, 0.10), format!("best case 1 engine: {one:.2} GB/s vs 12.77 +-10%"));

    let rows = join::reference_configurations();
    let measured_one = [1.81, 2.13, 6.07, 12.77, 1.61, 1.86];
    let measured_seven = [6.48, 14.68, 10.25, 80.95, 6.09, 12.79];
    let model_one: Vec<f64> = rows.iter().map(|f| rate(1, *f, 4096).gbps()).collect();
    let model_seven: Vec<f64> = rows.iter().map(|f| rate(7, *f, 4096).gbps()).collect();
    v.check(
        order(&model_one) == order(&measured_one),
        format!("1-engine row order {:?} matches", order(&model_one)),
    );
    v.check(
        order(&model_seven) == order(&measured_seven),
        format!("7-engine row order {:?} matches", order(&model_seven)),
    );

    let points: Vec<(f64, f64)> = (0..=11)
        .map(|k| {
            let s = 8192u64 << k;
            let report = rate(7, best, s);
            (join::passes_for(s as usize, join::DEFAULT_TABLE_CAPACITY) as f64, report.total_seconds())
        })
        .collect();
    let r2 = r_squared(&points);
    v.check(r2 > 0.99, format!("runtime vs passes over |S| 8K..16M: R^2 = {r2:.6} > 0.99"));
    v
}

fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn criterion_6() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let m = rng.random_range(1..40);
        let n = rng.random_range(1..12);
        let regression = generate_synthetic_noisy(m, n, LabelKind::Regression, 0.2, instance).expect("data").dataset;
        let binary = generate_synthetic(m, n, LabelKind::Binary, instance + 1000).expect("data").dataset;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = rng.random_range(0.0..0.5);
        for (data, loss) in [(&regression, Loss::Ridge), (&binary, Loss::Logistic)] {
            let model = Model { x: x.clone() };
            let g = sgd::minibatch_gradient(&model, data, 0..m, loss).expect("gradient");
            let h = 1e-6;
            for j in 0..n {
                let analytic = g[j] / m as f64 + 2.0 * lambda * x[j];
                let mut plus = model.clone();
                plus.x[j] += h;
                let mut minus = model.clone();
                minus.x[j] -= h;
                let numeric = (sgd::loss_on(&plus, data, 0..m, loss, lambda).expect("loss")
                    - sgd::loss_on(&minus, data, 0..m, loss, lambda).expect("loss"))
                    / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    v.check(worst < 1e-4, format!("finite-difference gradient, 100 instances x 2 losses: max rel err {worst:.2e} < 1e-4"));

    // One epoch with B = m against a full-batch gradient step written out here.
    let data = generate_synthetic_noisy(10, 4, LabelKind::Regression, 0.3, 5).expect("data").dataset;
    let (alpha, lambda) = (0.05, 0.1);
    let config = SgdConfig {
        step_size: alpha,
        lambda,
        minibatch: 10,
        epochs: 1,
        ..SgdConfig::default()
    };
    let mut model = Model::<f64>::zeros(4);
    sgd::sgd_epoch(&mut model, &data, &config, 1).expect("epoch");
    let mut g = [0.0f64; 4];
    for i in 0..10 {
        let a = data.row(i);
        let r = -f64::from(data.label(i));
        for j in 0..4 {
            g[j] += r * f64::from(a[j]);
        }
    }
    let rel = (0..4)
        .map(|j| {
            let want = -alpha * g[j];
            (model.x[j] - want).abs() / want.abs().max(1e-300)
        })
        .fold(0.0, f64::max);
    v.check(rel < 1e-6, format!("B=m epoch vs batch gradient step: rel err {rel:.2e} < 1e-6"));

    let synth = generate_synthetic(4000, 16, LabelKind::Regression, 77).expect("data");
    let config = SgdConfig {
        step_size: 0.01,
        minibatch: 16,
        epochs: 50,
        ..SgdConfig::default()
    };
    let (model, _) = sgd::train(&synth.dataset, &config).expect("training");
    let truth = &synth.truth[0];
    let err: f64 = model.x.iter().zip(truth).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = truth.iter().map(|b| f64::from(*b).powi(2)).sum::<f64>().sqrt();
    v.check(err / norm < 1e-2, format!("noiseless recovery after 50 epochs: rel L2 err {:.2e} < 1e-2", err / norm));
    timed(&mut v, Duration::from_secs(60), start);
    v
}

fn criterion_7() -> Verdict {
    let mut v = Verdict::new();
    let config = SystemConfig::default();
    let im = DatasetPreset::find("IM").expect("preset");
    let scenario = |num_engines, placement, preset: DatasetPreset, minibatch| SgdScenario {
        num_engines,
        dataset_bytes: preset.size_bytes(),
        n: preset.n,
        minibatch,
        placement,
        pipeline: PipelineModel::default(),
    };
    let rate = |s: SgdScenario| sgd::model_sgd_rate(&config, &s).expect("sgd model");

    let peak = rate(scenario(14, SgdPlacement::Replicated, im, 16));
    v.check(within(peak, 156.0, 0.05), format!("IM, 14 engines replicated: {peak:.2} GB/s vs 156 +-5%"));

    let flat: Vec<f64> = (1..=14).map(|k| rate(scenario(k, SgdPlacement::Nonreplicated, im, 16))).collect();
    let off = flat.iter().filter(|r| !within(**r, 12.8, 0.01)).count();
    let (lo, hi) = flat.iter().fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(*r), b.max(*r)));
    v.check(
        off == 0,
        format!("nonreplicated, 1..14 engines: {lo:.3}..{hi:.3} GB/s vs 12.8 +-1% ({off} of 14 outside)"),
    );

    let monotone = PRESETS.iter().all(|p| {
        let rates: Vec<f64> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&b| rate(scenario(14, SgdPlacement::Replicated, *p, b)))
            .collect();
        rates.windows(2).all(|w| w[1] >= w[0])
    });
    v.check(monotone, "modeled rate non-decreasing in B over {1,2,4,8,16} for every dataset shape");

    let task = generate_synthetic_noisy(4096, 32, LabelKind::Regression, 0.1, 8).expect("data").dataset;
    let finals: Vec<f64> = [1, 2, 4, 8, 16]
        .iter()
        .map(|&b| {
            let c = SgdConfig {
                step_size: 0.002,
                minibatch: b,
                epochs: 20,
                ..SgdConfig::default()
            };
            *sgd::train(&task, &c).expect("training").1.last().expect("epochs")
        })
        .collect();
    let (lo, hi) = finals.iter().fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(*r), b.max(*r)));
    v.check(
        (hi - lo) / lo <= 0.05,
        format!("final losses over B in {{1..16}} within 5%: {lo:.5}..{hi:.5}"),
    );
    v
}

fn criterion_8() -> Verdict {
    let mut v = Verdict::new();
    let dir = tempfile::tempdir().expect("temp dir");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[select]\nverify_items = 65536\n[join]\nverify_l_tuples = 65536\nverify_s_max = 16384\n[sgd]\nepochs = 3\n",
    )
    .expect("config");
    let run = |args: &[&str], out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_hbmsim"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .arg("--seed")
            .arg("7")
            .arg("--out")
            .arg(out)
            .status()
            .is_ok_and(|s| s.success())
    };
    for sub in ["ubench", "select", "join", "sgd"] {
        let a = dir.path().join(format!("{sub}-a.csv"));
        let b = dir.path().join(format!("{sub}-b.csv"));
        let ok = run(&[sub], &a) && run(&[sub], &b) && std::fs::read(&a).ok() == std::fs::read(&b).ok();
        v.check(ok, format!("`{sub}` rerun is byte-identical"));
    }
    let a = dir.path().join("report-a");
    let b = dir.path().join("report-b");
    let mut ok = run(&["report"], &a) && run(&["report"], &b);
    let mut files = 0;
    if ok {
        for entry in std::fs::read_dir(&a).expect("report dir") {
            let name = entry.expect("entry").file_name();
            ok &= std::fs::read(a.join(&name)).ok() == std::fs::read(b.join(&name)).ok();
            files += 1;
        }
    }
    v.check(ok && files > 0, format!("`report` rerun is byte-identical ({files} files)"));
    v
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 microbenchmark shape", criterion_1),
        ("2 selection correctness", criterion_2),
        ("3 selection model", criterion_3),
        ("4 join correctness", criterion_4),
        ("5 join model", criterion_5),
        ("6 SGD correctness", criterion_6),
        ("7 SGD model", criterion_7),
        ("8 determinism", criterion_8),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let verdict = run();
        let status = if verdict.passed() { "PASS" } else { "FAIL" };
        println!("[{status}] criterion {name}");
        for (ok, detail) in &verdict.checks {
            println!("       {} {detail}", if *ok { "ok  " } else { "FAIL" });
        }
        failed += usize::from(!verdict.passed());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

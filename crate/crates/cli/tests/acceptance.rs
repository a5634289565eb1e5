use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use headbalance_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Instance {
    weights: Vec<f64>,
    tp: usize,
    ch: usize,
    r_max: usize,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    Instance {
        weights: (0..rng.random_range(1..=8))
            .map(|_| rng.random_range(0.0..10.0))
            .collect(),
        tp: if rng.random_bool(0.5) { 2 } else { 4 },
        ch: rng.random_range(0..=2),
        r_max: rng.random_range(1..=2),
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let start = Instant::now();
    let (mut compared, mut both_infeasible) = (0, 0);
    while compared < 500 {
        let inst = random_instance(&mut rng);
        let cfg = AllocationConfig::new(inst.ch, inst.r_max);
        match (
            select_best(&inst.weights, inst.tp, &cfg),
            brute_force_best(&inst.weights, inst.tp, &cfg),
        ) {
            (Ok(a), Ok(b)) => {
                check(a.delta == b.delta, || {
                    format!(
                        "{:?} tp={} ch={} r_max={}: {} vs {}",
                        inst.weights, inst.tp, inst.ch, inst.r_max, a.delta, b.delta
                    )
                })?;
                compared += 1;
            }
            (Err(_), Err(_)) => both_infeasible += 1,
            (a, b) => {
                return Err(format!(
                    "feasibility differs on {:?}: {:?} vs {:?}",
                    inst.weights,
                    a.is_ok(),
                    b.is_ok()
                ))
            }
        }
    }
    let elapsed = start.elapsed();
    check(elapsed <= Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{compared} instances equal ({both_infeasible} infeasible for both) in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn worked_example() -> Outcome {
    let w = [4.0, 1.0, 1.0, 2.0];
    let plain = select_best(&w, 2, &AllocationConfig::new(0, 2)).map_err(|e| e.to_string())?;
    check(plain.delta == 2.0, || format!("CH=0 delta {}", plain.delta))?;
    let copied = select_best(&w, 2, &AllocationConfig::new(2, 2)).map_err(|e| e.to_string())?;
    check(copied.delta == 0.0, || format!("CH=2 delta {}", copied.delta))?;
    let replicas = copied.replicas(4);
    check(replicas == vec![2, 1, 1, 2], || format!("replicas {replicas:?}"))?;
    Ok(format!("CH=0 delta 2, CH=2 delta 0 with replicas {replicas:?}"))
}

fn dominance_and_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut pairs = 0;
    for _ in 0..300 {
        let inst = random_instance(&mut rng);
        let deltas: Vec<Option<f64>> = (0..=3)
            .map(|ch| {
                select_best(&inst.weights, inst.tp, &AllocationConfig::new(ch, inst.r_max))
                    .ok()
                    .map(|a| a.delta)
            })
            .collect();
        for lo in 0..deltas.len() {
            for hi in lo + 1..deltas.len() {
                if let (Some(a), Some(b)) = (deltas[lo], deltas[hi]) {
                    check(b <= a, || {
                        format!(
                            "{:?} tp={}: CH={hi} gives {b} > CH={lo} gives {a}",
                            inst.weights, inst.tp
                        )
                    })?;
                    pairs += 1;
                }
            }
        }
    }
    let mut profiles = 0;
    for _ in 0..100 {
        let tp = [1, 2, 4, 8][rng.random_range(0..4)];
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..16).map(|_| rng.random_range(0.01..10.0)).collect())
            .collect();
        let p = ModelProfile::new("r", 0, rows).map_err(|e| e.to_string())?;
        let sha = sha_plan(&p, tp).map_err(|e| e.to_string())?;
        let opt = optimize_plan(&p, tp, &AllocationConfig::no_replication()).map_err(|e| e.to_string())?;
        for (o, s) in opt.deltas().iter().zip(sha.deltas()) {
            check(*o <= s, || format!("tp={tp}: optimized {o} > SHA {s}"))?;
        }
        profiles += 1;
    }
    Ok(format!("{pairs} budget pairs and {profiles} profiles, no violations"))
}

fn efficiency_formula() -> Outcome {
    let e = allocate::efficiency_of_loads(&[3.0, 1.0]).map_err(|e| e.to_string())?;
    check((e - 2.0 / 3.0).abs() <= 1e-12, || format!("E(3,1) = {e}"))?;
    let flat = allocate::efficiency_of_loads(&[2.5; 4]).map_err(|e| e.to_string())?;
    check(flat == 1.0, || format!("E(equal) = {flat}"))?;
    let p = ModelProfile::new("t", 0, vec![vec![4.0, 1.0, 1.0, 2.0]]).map_err(|e| e.to_string())?;
    let plan = optimize_plan(&p, 2, &AllocationConfig::new(2, 2)).map_err(|e| e.to_string())?;
    let balanced = efficiency(&plan, &p).map_err(|e| e.to_string())?;
    check(balanced == 1.0, || format!("balanced plan E = {balanced}"))?;
    Ok(format!("E(3,1) = {e:.15}, E(equal) = 1"))
}

fn calibration_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let truth = LatencyModel::compute(
            rng.random_range(0.01..2.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..0.02),
            rng.random_range(1e-5..1e-3),
        );
        let samples: Vec<MeasurementSample> = [1u64, 2, 4, 8, 16, 32]
            .iter()
            .flat_map(|&b| {
                [0.0, 64.0, 256.0, 1024.0, 4096.0].map(|kv| MeasurementSample {
                    batch: b,
                    kv_load: kv,
                    latency: predict_compute(&truth, b, kv),
                })
            })
            .collect();
        let fit = calibrate(&samples).map_err(|e| e.to_string())?.model;
        for (got, want) in [
            (fit.c0, truth.c0),
            (fit.c1, truth.c1),
            (fit.c2, truth.c2),
            (fit.c3, truth.c3),
        ] {
            worst = worst.max((got - want).abs());
        }
        check(fit.c3 > 0.0, || "fitted c3 not positive".into())?;
        let slopes: Vec<f64> = [0.0, 100.0, 1000.0, 10000.0]
            .iter()
            .map(|&c| fit.batch_slope(c))
            .collect();
        check(slopes.windows(2).all(|s| s[1] > s[0]), || {
            format!("batch slopes not increasing: {slopes:?}")
        })?;
    }
    check(worst <= 1e-6, || format!("worst coefficient error {worst:e}"))?;
    Ok(format!(
        "50 models recovered, worst error {worst:.1e}, slopes steepen with C"
    ))
}

fn simulation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pairs = 0;
    let mut min_busy = f64::INFINITY;
    for _ in 0..40 {
        let tp = [2, 4][rng.random_range(0..2)];
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..8).map(|_| rng.random_range(0.0..100.0)).collect())
            .collect();
        let Ok(p) = ModelProfile::new("r", 0, rows) else {
            continue;
        };
        let model = LatencyModel::compute(
            rng.random_range(0.0..1e-3),
            rng.random_range(0.0..1e-5),
            rng.random_range(1e-7..1e-5),
            rng.random_range(0.0..1e-7),
        )
        .with_comm(rng.random_range(0.0..1e-5), 1e-10, 4096.0);
        let simcfg = SimulationConfig::new(rng.random_range(1..64), 5, tp);
        let cmp = compare(&p, tp, &AllocationConfig::new(2, 2), &model, &simcfg).map_err(|e| e.to_string())?;
        for row in &cmp.report.rows {
            let d = row.decomposition;
            check(d.d_total == d.d_idle + d.d_cache + d.d_comm, || {
                format!("decomposition {d:?}")
            })?;
            let busy = row.report.mean_busy_rate;
            check(busy > 0.0 && busy <= 1.0, || format!("busy rate {busy}"))?;
            min_busy = min_busy.min(busy);
            pairs += 1;
        }
    }
    let uniform = generate_profile(
        &SyntheticSpec {
            distribution: WeightDistribution::Uniform,
            total_budget_per_layer: 1024.0,
            seed: 0,
        },
        4,
        16,
    )
    .map_err(|e| e.to_string())?;
    let model = LatencyModel::compute(1e-4, 1e-6, 1e-7, 1e-8).with_comm(5e-6, 1e-10, 8192.0);
    for tp in [2, 4, 8] {
        let cmp = compare(
            &uniform,
            tp,
            &AllocationConfig::new(2, 2),
            &model,
            &SimulationConfig::new(8, 10, tp),
        )
        .map_err(|e| e.to_string())?;
        for row in &cmp.report.rows {
            check((row.throughput_gain - 1.0).abs() <= 1e-9, || {
                format!("uniform tp={tp} {} gain {}", row.strategy.label(), row.throughput_gain)
            })?;
        }
    }
    Ok(format!(
        "{pairs} rows exact, min busy rate {min_busy:.3}, uniform gains 1.000"
    ))
}

fn hand_checked_gain() -> Outcome {
    let p = ModelProfile::new("toy", 0, vec![vec![4.0, 1.0, 1.0, 2.0]]).map_err(|e| e.to_string())?;
    let model = LatencyModel::compute(0.0, 0.0, 1.0, 0.0);
    let cmp = compare(
        &p,
        2,
        &AllocationConfig::new(2, 2),
        &model,
        &SimulationConfig::new(4, 10, 2),
    )
    .map_err(|e| e.to_string())?;
    let gain = cmp.report.row(Strategy::Dp).ok_or("missing DP row")?.throughput_gain;
    check((gain - 1.25).abs() <= 1e-9, || format!("gain {gain}"))?;
    Ok(format!("DP gain over SHA = {gain}"))
}

fn qualitative_trend() -> Outcome {
    let spec = SyntheticSpec {
        distribution: WeightDistribution::Zipf { s: 1.2 },
        total_budget_per_layer: 32.0 * 128.0,
        seed: 2024,
    };
    let profile = generate_profile(&spec, 4, 32).map_err(|e| e.to_string())?;
    let model = LatencyModel::compute(1e-4, 1e-6, 1e-7, 1e-8).with_comm(5e-6, 1e-10, 8192.0);
    let mut sha_busy = Vec::new();
    let mut lines = Vec::new();
    for tp in [2usize, 4, 8] {
        let cmp = compare(
            &profile,
            tp,
            &AllocationConfig::new(4, 2),
            &model,
            &SimulationConfig::new(8, 16, tp),
        )
        .map_err(|e| e.to_string())?;
        let busy = |s: Strategy| cmp.report.row(s).map(|r| r.report.mean_busy_rate).unwrap_or(f64::NAN);
        let (sha, nodp, dp) = (busy(Strategy::Sha), busy(Strategy::NoDp), busy(Strategy::Dp));
        check(dp >= nodp && nodp >= sha, || {
            format!("tp={tp}: DP {dp} NoDP {nodp} SHA {sha}")
        })?;
        sha_busy.push(sha);
        lines.push(format!("tp{tp} {sha:.3}/{nodp:.3}/{dp:.3}"));
    }
    check(sha_busy.windows(2).all(|w| w[1] < w[0]), || {
        format!("SHA busy rates {sha_busy:?}")
    })?;
    Ok(format!("SHA/NoDP/DP busy: {}", lines.join(", ")))
}

fn naive_schemes(n: usize, ch: usize, r_max: usize, divisor: Option<usize>) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut r = vec![1usize; n];
    loop {
        let total: usize = r.iter().sum();
        if total - n <= ch && divisor.is_none_or(|d| total.is_multiple_of(d)) {
            out.push(r.clone());
        }
        let mut i = n;
        loop {
            if i == 0 {
                out.sort();
                return out;
            }
            i -= 1;
            if r[i] < r_max {
                r[i] += 1;
                break;
            }
            r[i] = 1;
        }
    }
}

fn enumeration_correctness() -> Outcome {
    let mut cases = 0;
    for n in 1..=6 {
        for ch in 0..=3 {
            for r_max in 1..=3 {
                for divisor in [None, Some(2), Some(3)] {
                    let mut cfg = EnumerationConfig::new(ch, r_max);
                    if let Some(d) = divisor {
                        cfg = cfg.divisible_by(d);
                    }
                    let got: Vec<Vec<usize>> = enumerate_schemes(n, &cfg)
                        .map_err(|e| e.to_string())?
                        .into_iter()
                        .map(|s| s.replicas)
                        .collect();
                    let want = naive_schemes(n, ch, r_max, divisor);
                    check(got == want, || {
                        format!("n={n} ch={ch} r_max={r_max} divisor={divisor:?}")
                    })?;
                    if divisor.is_none() {
                        check(count_schemes(n, &cfg) == want.len() as u128, || {
                            format!("count n={n} ch={ch} r_max={r_max}")
                        })?;
                    }
                    cases += 1;
                }
            }
        }
    }
    let eleven = count_schemes(4, &EnumerationConfig::new(2, 2));
    check(eleven == 11, || format!("count(4, 2, 2) = {eleven}"))?;
    Ok(format!("{cases} configurations match, count(4,2,2) = 11"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_headbalance");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .current_dir(dir.path())
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).into_owned()
        })
    };
    run(&[
        "gen-profile",
        "--layers",
        "4",
        "--heads",
        "16",
        "--dist",
        "zipf:1.2",
        "--budget",
        "2048",
        "--seed",
        "10",
        "--out",
        "p.json",
    ])?;
    fs::write(
        dir.path().join("m.json"),
        LatencyModel::compute(1e-4, 1e-6, 1e-7, 1e-8)
            .with_comm(5e-6, 1e-10, 8192.0)
            .to_json(),
    )
    .map_err(|e| e.to_string())?;
    let compare_to = |out: &str| {
        run(&[
            "compare",
            "--profile",
            "p.json",
            "--tp",
            "4",
            "--ch",
            "4",
            "--model",
            "m.json",
            "--batch",
            "8",
            "--steps",
            "16",
            "--out",
            out,
        ])
    };
    compare_to("a.json")?;
    compare_to("b.json")?;
    let a = fs::read(dir.path().join("a.json")).map_err(|e| e.to_string())?;
    let b = fs::read(dir.path().join("b.json")).map_err(|e| e.to_string())?;
    check(a == b, || "reports differ".into())?;
    Ok(format!("two compare runs wrote identical {}-byte reports", a.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("fair-copying worked example", worked_example),
        ("dominance and monotonicity", dominance_and_monotonicity),
        ("efficiency formula", efficiency_formula),
        ("calibration round trip", calibration_round_trip),
        ("simulation identity", simulation_identity),
        ("hand-checked gain", hand_checked_gain),
        ("busy-rate trend", qualitative_trend),
        ("enumeration correctness", enumeration_correctness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

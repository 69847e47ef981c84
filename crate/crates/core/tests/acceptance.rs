//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line with
//! its measurements; the process exits nonzero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use lightsign::cli::{cmd_train, read_table_csv, run_ablation, run_contamination, train_and_evaluate, CommandKind, RunConfig};
use lightsign::dataset::{self, generate_synthetic, violates_separation, GeneratorConfig};
use lightsign::eval::{average_precision, degradation_report, PrCurve};
use lightsign::losses::{hierarchical_loss, LossOptions};
use lightsign::minibatch::SelectMode;
use lightsign::taxonomy::Taxonomy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget: Duration, detail: String) -> Outcome {
    ensure(elapsed < budget, format!("{detail}; {:.1}s of {:.0}s budget", elapsed.as_secs_f64(), budget.as_secs_f64()))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for flat in [true, false] {
        let mut checked = 0;
        while checked < 100 {
            let (batch, outputs) = random_loss_case(&mut rng, flat);
            if !gate_stable(&outputs, 1e-3) {
                continue;
            }
            worst = worst.max(max_gradient_error(&batch, &outputs, flat, 1e-5));
            checked += 1;
        }
    }
    let detail = format!("100 flat + 100 hierarchical batches, worst relative error {worst:.2e}");
    if worst >= 1e-5 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(10), detail)
}

fn selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check_selection(&mut rng, 1000).map(|n| format!("{n} instances, both rules exact, threshold negatives a subset"))
}

fn gate_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = LossOptions { lambda: 2.0, ..Default::default() };
    let mut perturbed = 0;
    for case in 0..100 {
        let (batch, outputs) = random_loss_case(&mut rng, false);
        let (base, _) = hierarchical_loss(&batch, &outputs, &opts).map_err(|e| e.to_string())?;
        for (i, gate) in base.gates.iter().enumerate() {
            if *gate {
                continue;
            }
            let mut moved = outputs.clone();
            for v in moved[i].classes.iter_mut() {
                *v += rng.random_range(-50.0..50.0);
            }
            let (after, _) = hierarchical_loss(&batch, &moved, &opts).map_err(|e| e.to_string())?;
            if after.total.to_bits() != base.total.to_bits() {
                return Err(format!("case {case} member {i}: total {} became {}", base.total, after.total));
            }
            perturbed += 1;
        }
    }
    Ok(format!("100 batches, {perturbed} ungated members perturbed, totals bitwise unchanged"))
}

fn evaluator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = check_evaluator(&mut rng, 1000)?;
    let one = average_precision(&PrCurve::from_scored(&[(0.9, true), (0.8, false)], 1));
    let half = average_precision(&PrCurve::from_scored(&[(0.9, false), (0.8, true)], 1));
    ensure(one == Some(1.0) && half == Some(0.5), format!("{n} random cases agree; hand examples give {one:?} and {half:?}"))
}

fn degradation(fixture: &Path) -> Outcome {
    let naive = degradation_report((0.53, 0.40), (0.43, 0.26)).map_err(|e| e.to_string())?;
    let best = degradation_report((0.53, 0.40), (0.46, 0.31)).map_err(|e| e.to_string())?;
    let table = read_table_csv(fixture).map_err(|e| e.to_string())?;
    let pct = |name: &str| table.degradation.iter().find(|d| d.config == name).map(|d| d.percent);
    let (csv_naive, csv_best) = (pct("flat+baseline"), pct("hier+threshold"));
    let close = |x: f64, want: f64| (x - want).abs() <= 0.5;
    let ok = close(naive, 27.0)
        && close(best, 18.0)
        && csv_naive.is_some_and(|x| close(x, 27.0))
        && csv_best.is_some_and(|x| close(x, 18.0));
    ensure(ok, format!("naive {naive:.2}%, best {best:.2}%; from the table file {csv_naive:?} and {csv_best:?}"))
}

fn ablation(out: PathBuf) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::new(CommandKind::Ablate, out);
    let table = run_ablation(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let get = |name: &str, f: fn(&lightsign::cli::TableRow) -> Option<f64>| table.row(name).and_then(f).unwrap_or(f64::NAN);
    let total = |name: &str| get(name, |r| r.total.median);
    let (fb, hb, ft, ht) = (total("flat+baseline"), total("hier+baseline"), total("flat+threshold"), total("hier+threshold"));
    let (sl, ss) = (get("single-lights", |r| r.light.median), get("single-signs", |r| r.sign.median));
    let (fbl, fbs) = (get("flat+baseline", |r| r.light.median), get("flat+baseline", |r| r.sign.median));
    let detail = format!(
        "{} seeds, total mAP flat+baseline {fb:.3}, hier+baseline {hb:.3}, flat+threshold {ft:.3}, hier+threshold {ht:.3}; \
         lights {sl:.3} vs joint {fbl:.3}, signs {ss:.3} vs joint {fbs:.3}",
        cfg.seeds.len()
    );
    let ordered = ht > fb && hb >= fb && ft >= fb && sl > fbl && ss > fbs;
    if !ordered {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(300), detail)
}

fn contamination(out: PathBuf) -> Outcome {
    let mut cfg = RunConfig::new(CommandKind::Contamination, out);
    let audit = run_contamination(&cfg).map_err(|e| e.to_string())?;
    let base = audit.median_rate(SelectMode::Baseline).ok_or("no baseline negatives")?;
    let thr = audit.median_rate(SelectMode::BackgroundThreshold).ok_or("no threshold negatives")?;
    cfg.generator.violation_prob = 0.0;
    let clean = run_contamination(&cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for seed in clean.seeds() {
        for mode in [SelectMode::Baseline, SelectMode::BackgroundThreshold] {
            worst = worst.max(clean.tally(Some(seed), mode, None).rate().map_err(|e| e.to_string())?);
        }
    }
    ensure(
        thr <= 0.5 * base && worst < 0.005,
        format!("median rates at 0.07: baseline {base:.5}, threshold {thr:.5}; worst rate at 0: {worst:.5}"),
    )
}

fn generator_statistic() -> Outcome {
    let cfg = GeneratorConfig::default();
    let ds = generate_synthetic(&cfg, &Taxonomy::traffic_default(), 10_000, 0).map_err(|e| e.to_string())?;
    let frac = ds.frames.iter().filter(|f| violates_separation(f, &ds.config)).count() as f64 / ds.frames.len() as f64;
    ensure((frac - 0.07).abs() <= 0.01, format!("violating fraction {frac:.4} over 10000 frames"))
}

fn determinism(dir: &Path) -> Outcome {
    let names = ["checkpoint.txt", "train_log.csv", "epochs.csv", "eval.csv", "pr_curves.csv", "eval_summary.json"];
    let run = |sub: &str| -> Result<Vec<Vec<u8>>, String> {
        let cfg = RunConfig::new(CommandKind::Train, dir.join(sub));
        cmd_train(&cfg).map_err(|e| e.to_string())?;
        names.iter().map(|n| std::fs::read(cfg.out.join(n)).map_err(|e| e.to_string())).collect()
    };
    let (a, b) = (run("a")?, run("b")?);
    for ((x, y), n) in a.iter().zip(&b).zip(names) {
        if x != y {
            return Err(format!("{n} differs between identical runs"));
        }
    }
    let ds = generate_synthetic(&GeneratorConfig::default(), &Taxonomy::traffic_default(), 300, 9).map_err(|e| e.to_string())?;
    let path = dir.join("dataset.tsv");
    dataset::save(&ds, &path).map_err(|e| e.to_string())?;
    let back = dataset::load(&path).map_err(|e| e.to_string())?;
    ensure(back == ds, format!("{} output files identical across two runs; 300-frame dataset round trip exact", names.len()))
}

fn learnability(out: PathBuf) -> Outcome {
    let cfg = RunConfig::new(CommandKind::Train, out);
    let ds = generate_synthetic(&cfg.generator, &Taxonomy::traffic_default(), cfg.frames, cfg.seed).map_err(|e| e.to_string())?;
    let t = train_and_evaluate(&ds, &cfg.train, &cfg.eval, cfg.test_fraction).map_err(|e| e.to_string())?;
    let epochs = &t.log.epochs;
    let (first, last) = match (epochs.first(), epochs.last()) {
        (Some(f), Some(l)) => (f.median_total, l.median_total),
        _ => return Err("no epochs logged".into()),
    };
    let reduction = 1.0 - last / first;
    let map = t.report.total_map.unwrap_or(0.0);
    ensure(
        epochs.len() == 20 && reduction >= 0.5 && map >= 0.5,
        format!(
            "{} epochs, median loss {first:.3} -> {last:.3} ({:.1}% lower), total mAP {map:.3}",
            epochs.len(),
            100.0 * reduction
        ),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/reference_table.csv");
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("selection oracle equivalence", Box::new(selection)),
        ("gate exactness", Box::new(gate_exactness)),
        ("evaluator oracle equivalence", Box::new(evaluator)),
        ("degradation arithmetic", Box::new(|| degradation(&fixture))),
        ("ablation ordering", Box::new(|| ablation(tmp.path().join("ablate")))),
        ("contamination reduction", Box::new(|| contamination(tmp.path().join("contamination")))),
        ("generator statistic", Box::new(generator_statistic)),
        ("determinism", Box::new(|| determinism(tmp.path()))),
        ("learnability", Box::new(|| learnability(tmp.path().join("learn")))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any failed.
//!
//! The desk-scale pipeline writes to `target/acceptance/runs` and resumes
//! from whatever is already there; delete that directory for a fresh run.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indoorworld::{house_set, sample_from_houses, Domain, ImageBank, Split, IMAGE_LEN};
use jrt::fadapt::{adv_loss, cls_loss, probe_accuracy, ProbeConfig};
use jrt::harness::{encoder_bytes, file_digest, recorded_digest, run_pipeline, sweep, PipelineConfig, SeedPaths, SweepParam, SweepSpec};
use jrt::pmimic::mimic_loss;
use jrt::rl::load_checkpoint;
use nncore::{cross_entropy, softmax, Exec, Graph, ParamSet, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::load(workspace().join("configs/desk.conf")).unwrap();
    cfg.out_dir = workspace().join("target/acceptance/runs");
    cfg
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    for seed in 0..2 {
        for (name, err) in common::gradient_suite(seed) {
            if err >= worst.1 {
                worst = (name, err);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst.1 < 1e-3 && secs < 120.0, format!("worst relative error {:.2e} ({}), {secs:.1}s", worst.1, worst.0))
}

fn closed_forms() -> Verdict {
    let ps = ParamSet::<f64>::new();
    let mut g = Graph::inference(&ps);
    let v = |xs: &[f64]| Tensor::vector(xs.to_vec());
    let m = |r: usize, c: usize, xs: &[f64]| Tensor::new(vec![r, c], xs.to_vec()).unwrap();
    let ln2 = 2f64.ln();
    let ln3 = 3f64.ln();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let s = softmax(&v(&[0.0, 0.0, 0.0])).unwrap();
    checks.extend(s.data().iter().map(|&x| ("softmax uniform", x, 1.0 / 3.0)));
    let s = softmax(&v(&[ln2, 0.0])).unwrap();
    checks.push(("softmax [ln2,0]", s.data()[0], 2.0 / 3.0));
    checks.push(("softmax [ln2,0]", s.data()[1], 1.0 / 3.0));
    let s = softmax(&v(&[1000.0, 0.0])).unwrap();
    checks.push(("softmax [1000,0]", s.data()[0], 1.0));
    checks.push(("softmax [1000,0]", s.data()[1], 0.0));
    let u = v(&[1.0 / 3.0; 3]);
    checks.push(("ce uniform", cross_entropy(&u, &u).unwrap(), ln3));
    let one = v(&[1.0, 0.0, 0.0]);
    checks.push(("ce one-hot", cross_entropy(&one, &one).unwrap(), 0.0));
    checks.push(("ce [.5,.5] vs [.25,.75]", cross_entropy(&v(&[0.5, 0.5]), &v(&[0.25, 0.75])).unwrap(), -0.5 * (0.25f64.ln() + 0.75f64.ln())));
    let half = g.input(m(4, 1, &[0.5; 4]));
    let l = cls_loss(&mut g, half, half);
    checks.push(("cls D=0.5", g.item(l), 2.0 * ln2));
    let (ds, dr) = (g.input(m(4, 1, &[1.0; 4])), g.input(m(4, 1, &[0.0; 4])));
    let l = cls_loss(&mut g, ds, dr);
    checks.push(("cls perfect", g.item(l), 0.0));
    let l = adv_loss(&mut g, half);
    checks.push(("adv D=0.5", g.item(l), ln2));
    let l = adv_loss(&mut g, ds);
    checks.push(("adv D=1", g.item(l), 0.0));
    let zeros = g.input(m(1, 3, &[0.0; 3]));
    let l = mimic_loss(&mut g, &m(1, 3, &[1.0 / 3.0; 3]), zeros).unwrap();
    checks.push(("mimic uniform", g.item(l), ln3));
    let sharp = g.input(m(1, 3, &[1000.0, 0.0, 0.0]));
    let l = mimic_loss(&mut g, &m(1, 3, &[1.0, 0.0, 0.0]), sharp).unwrap();
    checks.push(("mimic one-hot", g.item(l), 0.0));
    let l = mimic_loss(&mut g, &m(1, 3, &[0.7, 0.2, 0.1]), zeros).unwrap();
    checks.push(("mimic [.7,.2,.1] vs uniform", g.item(l), ln3));
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !((got - want).abs() < 1e-5))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    verdict(bad.is_empty(), if bad.is_empty() { format!("{} values", checks.len()) } else { bad.join("; ") })
}

fn metrics() -> Verdict {
    let (above, worst) = common::metric_identities(200, 31);
    verdict(above == 0 && worst < 1e-9, format!("{above} reports with SPL > SR, max formula gap {worst:.1e}"))
}

fn pixels(bank: &ImageBank) -> Tensor {
    let data: Vec<f32> = bank.images.iter().flat_map(|im| im.pixels.iter().copied()).collect();
    Tensor::new(vec![bank.len(), IMAGE_LEN], data).unwrap()
}

fn environment() -> Verdict {
    let mismatches = common::bfs_mismatches(12);
    let off_floor = common::fuzz_walls(100_000, 13);
    // 1000 training images per domain; the probe holds out a second 1000
    let syn = house_set(Domain::Synthetic, Split::Train, 8, 40).unwrap();
    let real = house_set(Domain::Real, Split::Train, 8, 40).unwrap();
    let s = pixels(&sample_from_houses(&syn, Domain::Synthetic, 2000, 41, Exec::default()));
    let r = pixels(&sample_from_houses(&real, Domain::Real, 2000, 42, Exec::default()));
    let acc = probe_accuracy(&s, &r, &ProbeConfig::default()).unwrap();
    verdict(
        mismatches == 0 && off_floor == 0 && acc > 0.95,
        format!("{mismatches}/100 BFS mismatches, {off_floor} off-floor poses in 1e5 steps, raw-pixel probe {acc:.3}"),
    )
}

fn read_probe(paths: &SeedPaths) -> (f64, f64) {
    let text = fs::read_to_string(paths.probe()).unwrap();
    let get = |k: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k},")))
            .and_then(|v| v.parse().ok())
            .unwrap()
    };
    (get("before"), get("after"))
}

fn timings(paths: &SeedPaths) -> Vec<(String, f64)> {
    fs::read_to_string(paths.root.join("timings.csv"))
        .unwrap_or_default()
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit_once(','))
        .filter_map(|(k, v)| Some((k.to_string(), v.parse().ok()?)))
        .collect()
}

fn freezing(cfg: &PipelineConfig) -> Verdict {
    let mut problems = Vec::new();
    for &seed in &cfg.seeds {
        let paths = SeedPaths { root: cfg.seed_dir(seed) };
        for ckpt in [paths.model("sim"), paths.encoder()] {
            match recorded_digest(&ckpt).unwrap() {
                Some(d) if d == file_digest(&ckpt).unwrap() => {}
                Some(_) => problems.push(format!("seed {seed}: {} changed after its stage", ckpt.display())),
                None => problems.push(format!("seed {seed}: no digest recorded for {}", ckpt.display())),
            }
        }
        let sim = load_checkpoint(paths.model("sim")).unwrap().0;
        let fa_pm = load_checkpoint(paths.model("sim+FA+PM")).unwrap().0;
        let pm = load_checkpoint(paths.model("sim+PM")).unwrap().0;
        if encoder_bytes(&fa_pm) != fs::read(paths.encoder()).unwrap() {
            problems.push(format!("seed {seed}: sim+FA+PM encoder differs from the adapted encoder"));
        }
        if encoder_bytes(&pm) != encoder_bytes(&sim) {
            problems.push(format!("seed {seed}: sim+PM encoder differs from the source encoder"));
        }
    }
    verdict(problems.is_empty(), if problems.is_empty() { format!("{} seeds", cfg.seeds.len()) } else { problems.join("; ") })
}

fn adaptation(cfg: &PipelineConfig) -> Verdict {
    let (mut before, mut after, mut secs) = (Vec::new(), Vec::new(), 0f64);
    for &seed in &cfg.seeds {
        let paths = SeedPaths { root: cfg.seed_dir(seed) };
        let (b, a) = read_probe(&paths);
        before.push(b);
        after.push(a);
        secs = secs.max(timings(&paths).iter().filter(|(k, _)| k == "adapt").map(|t| t.1).sum());
    }
    let (b, a) = (median(before.clone()), median(after.clone()));
    verdict(
        b > 0.8 && (0.35..=0.65).contains(&a) && cfg.adapt.iterations == 1000 && secs <= 300.0,
        format!("median probe before {b:.3} {before:.3?}, after {a:.3} {after:.3?}, slowest adaptation {secs:.0}s"),
    )
}

fn trend(cfg: &PipelineConfig) -> Verdict {
    let summary = run_pipeline(cfg, true).unwrap();
    let mean = |m: &str| summary.rows.iter().find(|r| r.model == m).unwrap().success_mean;
    let (sim, fa, ft, both) = (mean("sim"), mean("sim+FA"), mean("sim+FT"), mean("sim+FA+PM"));
    let secs: f64 = cfg.seeds.iter().flat_map(|&s| timings(&SeedPaths { root: cfg.seed_dir(s) })).map(|t| t.1).sum();
    let table: Vec<String> = summary.rows.iter().map(|r| format!("{} {:.1}±{:.1}", r.model, r.success_mean, r.success_std)).collect();
    verdict(
        both > fa && fa > sim && both > ft && both - sim >= 10.0 && secs <= 1800.0,
        format!("{}; pipeline {secs:.0}s", table.join(", ")),
    )
}

fn best(rows: &[(f64, f64, f64, f64, f64)]) -> usize {
    (0..rows.len()).max_by(|&a, &b| rows[a].1.total_cmp(&rows[b].1).then(b.cmp(&a))).unwrap()
}

fn ablations(cfg: &PipelineConfig) -> Verdict {
    let idt = sweep(cfg, &SweepSpec::new(SweepParam::Idt, cfg.idt_sweep.clone()).unwrap(), true).unwrap().summary();
    let mimic = sweep(cfg, &SweepSpec::new(SweepParam::Mimic, cfg.mimic_sweep.clone()).unwrap(), true).unwrap().summary();
    let show = |rows: &[(f64, f64, f64, f64, f64)]| rows.iter().map(|r| format!("{}:{:.1}", r.0, r.1)).collect::<Vec<_>>().join(" ");
    let (bi, bm) = (best(&idt), best(&mimic));
    let idt_ok = idt[bi].0 != 0.0;
    let half = mimic.iter().find(|r| r.0 == 0.5);
    let mimic_ok = bm != 0 && bm != mimic.len() - 1 && mimic[bm].0 != 0.0 && half.is_some_and(|h| h.1 < mimic[bm].1);
    verdict(idt_ok && mimic_ok, format!("idt [{}], mimic [{}]", show(&idt), show(&mimic)))
}

fn determinism() -> Verdict {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-det");
    let _ = fs::remove_dir_all(&root);
    let (a, b) = (root.join("a"), root.join("b"));
    run_pipeline(&common::tiny_pipeline(&a), false).unwrap();
    run_pipeline(&common::tiny_pipeline(&b), false).unwrap();
    let (ta, tb) = (common::file_tree(&a), common::file_tree(&b));
    let differ: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|((na, ba), (nb, bb))| na != nb || (ba != bb && !na.ends_with("config.resolved")))
        .map(|((na, _), _)| na.as_str())
        .collect();
    let ok = ta.len() == tb.len() && differ.is_empty();
    verdict(ok, format!("{} files compared, {} differ {:?}", ta.len(), differ.len(), differ))
}

fn main() {
    let cfg = desk_config();
    let mut failed = Vec::new();
    let mut report = |n: u32, v: Verdict| {
        println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(n);
        }
    };
    report(1, gradients());
    report(2, closed_forms());
    report(3, metrics());
    report(4, environment());
    // runs or resumes the desk pipeline and both sweeps; the freezing check
    // comes after every later stage has had its chance to touch a checkpoint
    let rows = trend(&cfg);
    let sweeps = ablations(&cfg);
    report(5, freezing(&cfg));
    report(6, adaptation(&cfg));
    report(7, rows);
    report(8, sweeps);
    report(9, determinism());
    assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    if !failed.is_empty() {
        println!("failed criteria {failed:?}");
        std::process::exit(1);
    }
}

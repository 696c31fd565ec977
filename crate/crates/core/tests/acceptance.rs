//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use afn_core::afn::AfnLayer;
use afn_core::cli::{self, gradcheck_layer, EXIT_NUMERIC};
use afn_core::data::{
    cell_prng, corrupt, encode_images, encode_labels, load_idx, synth_shapes, write_idx, CorruptionKind, CorruptionSpec,
};
use afn_core::experiment::{
    build_model, checkpoint_to_string, load_checkpoint, parse_run_results, save_checkpoint, train, ExperimentConfig,
    Report, RowKind, CHECKPOINT_FILE, RESULTS_FILE,
};
use afn_core::nn::Module;
use afn_core::norm::{reduce_stats, BatchNorm2d, BinLayer, ScopedNorm, StatScope};
use afn_core::tensor::sigmoid;
use afn_core::{Mode, Prng, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn jitter<M: Module>(m: &mut M, p: &mut Prng, std: f64) {
    for param in m.params_mut() {
        for v in param.value.data_mut() {
            *v += std * p.next_gaussian();
        }
        param.constraint.apply(param.value);
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    for layer in ["batch", "layer", "instance", "group", "bin", "asr", "afn"] {
        for seed in 1..=3 {
            let r = gradcheck_layer(layer, [4, 8, 5, 5], seed, Mode::Train, 1e-5).map_err(|e| e.to_string())?;
            if r.max() > worst.0 {
                worst = (r.max(), format!("{layer} seed {seed}"));
            }
            check(r.max() <= 1e-4, format!("{layer} seed {seed}: {:.3e} > 1e-4", r.max()))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs <= 60.0, format!("took {secs:.1}s > 60s"))?;
    Ok(format!("21 checks, worst {:.2e} ({}), {secs:.1}s", worst.0, worst.1))
}

fn naive_stats(x: &Tensor, scope: StatScope) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims4().unwrap();
    let at = |i: usize, j: usize, k: usize, l: usize| x.data()[((i * c + j) * h + k) * w + l];
    let member: Box<dyn Fn(usize, usize, usize, usize) -> bool> = match scope {
        StatScope::Batch => Box::new(|g, _, j, _| j == g),
        StatScope::Layer => Box::new(|g, i, _, _| i == g),
        StatScope::Instance => Box::new(move |g, i, j, _| i == g / c && j == g % c),
        StatScope::Group(gs) => Box::new(move |g, i, j, _| i == g / gs && j / (c / gs) == g % gs),
    };
    let groups = match scope {
        StatScope::Batch => c,
        StatScope::Layer => n,
        StatScope::Instance => n * c,
        StatScope::Group(g) => n * g,
    };
    let mut mus = Vec::new();
    let mut sigmas = Vec::new();
    for g in 0..groups {
        let mut vals = Vec::new();
        for i in 0..n {
            for j in 0..c {
                for k in 0..h {
                    for l in 0..w {
                        if member(g, i, j, 0) {
                            vals.push(at(i, j, k, l));
                        }
                    }
                }
            }
        }
        let m = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
        mus.push(mu);
        sigmas.push(var.sqrt());
    }
    (mus, sigmas)
}

fn criterion_2() -> Outcome {
    let mut p = Prng::new(2);
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        let shape = [1 + p.below(8), 1 + p.below(16), 1 + p.below(8), 1 + p.below(8)];
        let (mean, std) = (p.uniform(-3.0, 3.0), p.uniform(0.1, 4.0));
        let x = Tensor::gaussian(&shape, &mut p, mean, std);
        let c = shape[1];
        let divisors: Vec<usize> = (1..=c).filter(|g| c.is_multiple_of(*g)).collect();
        let g = divisors[p.below(divisors.len())];
        for scope in [StatScope::Batch, StatScope::Layer, StatScope::Instance, StatScope::Group(g)] {
            let (mu, sigma) = reduce_stats(&x, scope).map_err(|e| e.to_string())?;
            let (nm, ns) = naive_stats(&x, scope);
            for (a, b) in mu.data().iter().zip(&nm).chain(sigma.data().iter().zip(&ns)) {
                worst = worst.max((a - b).abs());
            }
            check(
                mu.len() == nm.len() && sigma.len() == ns.len(),
                format!("tensor {t} {scope:?}: group count"),
            )?;
            check(worst <= 1e-12, format!("tensor {t} {scope:?} {shape:?}: gap {worst:e}"))?;
        }
    }
    Ok(format!("20 tensors x 4 scopes, max gap {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut p = Prng::new(300 + seed);
        let c = 6;
        let mut afn = AfnLayer::new(c, StatScope::Batch, &mut p).map_err(|e| e.to_string())?;
        jitter(&mut afn, &mut p, 0.3);
        afn.set_lambda_logits(-30.0);
        afn.gamma_bias = Tensor::full(&[c], 1.0);
        afn.beta_bias = Tensor::zeros(&[c]);
        afn.running_mu = Tensor::gaussian(&[c], &mut p, 0.0, 0.5);
        afn.running_sigma = Tensor::gaussian(&[c], &mut p, 1.0, 0.2).map(f64::abs);
        let mut bn = BatchNorm2d::new(c);
        bn.running_mean = afn.running_mu.clone();
        bn.running_var = afn.running_sigma.map(|s| s * s);
        let x = Tensor::gaussian(&[5, c, 4, 4], &mut p, 1.0, 3.0);
        for mode in [Mode::Train, Mode::Eval] {
            let (a, _) = afn.apply(&x, mode).map_err(|e| e.to_string())?;
            let (b, _) = bn.apply(&x, mode).map_err(|e| e.to_string())?;
            worst = worst.max(a.max_abs_diff(&b));
        }

        let mut bin = BinLayer::new(c);
        bin.gamma = Tensor::gaussian(&[c], &mut p, 1.0, 0.3);
        bin.beta = Tensor::gaussian(&[c], &mut p, 0.0, 0.3);
        bin.running_mean = bn.running_mean.clone();
        bin.running_var = bn.running_var.clone();
        bn.gamma = bin.gamma.clone();
        bn.beta = bin.beta.clone();
        let mut inorm = ScopedNorm::new(c, StatScope::Instance).map_err(|e| e.to_string())?;
        inorm.gamma = bin.gamma.clone();
        inorm.beta = bin.beta.clone();
        for mode in [Mode::Train, Mode::Eval] {
            bin.rho = Tensor::full(&[c], 1.0);
            let (a, _) = bin.apply(&x, mode).map_err(|e| e.to_string())?;
            let (b, _) = bn.apply(&x, mode).map_err(|e| e.to_string())?;
            worst = worst.max(a.max_abs_diff(&b));
            bin.rho = Tensor::zeros(&[c]);
            let (a, _) = bin.apply(&x, mode).map_err(|e| e.to_string())?;
            let (b, _) = inorm.apply(&x, mode).map_err(|e| e.to_string())?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        check(worst <= 1e-9, format!("seed {seed}: gap {worst:e}"))?;
    }
    Ok(format!("AFN->BN, BIN(1)->BN, BIN(0)->IN in both modes, max gap {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut p = Prng::new(4);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for _ in 0..1000 {
        let c = 1 + p.below(32);
        let scope = if p.below(2) == 0 { StatScope::Batch } else { StatScope::Instance };
        let mut layer = AfnLayer::new(c, scope, &mut p).map_err(|e| e.to_string())?;
        jitter(&mut layer, &mut p, 2.0);
        let n = 1 + p.below(4);
        let (mean, std) = (p.uniform(-5.0, 5.0), p.uniform(0.1, 10.0));
        let x = Tensor::gaussian(&[n, c, 3, 3], &mut p, mean, std);
        let mode = if p.below(2) == 0 { Mode::Train } else { Mode::Eval };
        let trace = layer.trace(&x, mode).map_err(|e| e.to_string())?;
        let ulp2 = |a: f64, b: f64| 2.0 * f64::EPSILON * a.abs().max(b.abs());
        for (i, (&g, &b)) in trace.gamma_hat.data().iter().zip(trace.beta_hat.data()).enumerate() {
            let k = i % c;
            let (gb, bb) = (layer.gamma_bias.data()[k], layer.beta_bias.data()[k]);
            let lg = sigmoid(layer.lambda_gamma_logit.data()[k]);
            let lb = sigmoid(layer.lambda_beta_logit.data()[k]);
            if (g - gb).abs() > lg + ulp2(g, gb) || (b - bb).abs() > lb + ulp2(b, bb) {
                violations += 1;
            }
            checked += 1;
        }
    }
    check(violations == 0, format!("{violations} violations in {checked} channels"))?;
    Ok(format!("1000 instances, {checked} channel checks, 0 violations"))
}

fn small_config(norm: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        "norm = \"{norm}\"\nchannels = [8, 16]\nhidden = 32\nepochs = 2\nbatch_size = 32\ncorruption_eval = false\n\
         [dataset]\nkind = \"synth\"\ntrain_n = 256\ntest_n = 64\nimage_size = 12\n"
    ))
    .expect("valid config")
}

fn criterion_5() -> Outcome {
    let bn_cfg = small_config("batch");
    let source = train(&bn_cfg).map_err(|e| e.to_string())?.model;
    let (_, test) = bn_cfg.dataset.resolve().map_err(|e| e.to_string())?;
    let mut afn = build_model(&small_config("afn"), source.input_dims(), source.num_classes()).map_err(|e| e.to_string())?;
    afn.adopt_from_bn(&source).map_err(|e| e.to_string())?;
    afn.set_afn_lambda_logits(-30.0);
    let a = source.logits(test.images(), Mode::Eval).map_err(|e| e.to_string())?;
    let b = afn.logits(test.images(), Mode::Eval).map_err(|e| e.to_string())?;
    let gap = a.max_abs_diff(&b);
    check(gap <= 1e-9, format!("eval logits differ by {gap:e}"))?;
    Ok(format!("trained BN model resumed into AFN, max logit gap {gap:.1e}"))
}

struct CompareRun {
    dir: PathBuf,
    report: Report,
    secs: f64,
}

fn compare(out: &Path) -> Result<CompareRun, String> {
    let config = manifest().join("configs").join("afn_synth.cfg");
    let start = Instant::now();
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let args = [
        "afnlab".as_ref(),
        "compare".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--norms".as_ref(),
        "batch,afn,asr".as_ref(),
        "--seeds".as_ref(),
        "1,2,3".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ];
    let code = cli::run(args, &mut stdout, &mut stderr);
    let secs = start.elapsed().as_secs_f64();
    check(code == 0, format!("compare exited {code}: {}", String::from_utf8_lossy(&stderr)))?;
    let csv = fs::read_to_string(out.join("compare.csv")).map_err(|e| e.to_string())?;
    let report = Report::from_csv(&csv).map_err(|e| e.to_string())?;
    Ok(CompareRun {
        dir: out.to_path_buf(),
        report,
        secs,
    })
}

fn criterion_6(run: &CompareRun) -> Outcome {
    let mut clean = Vec::new();
    for norm in ["batch", "afn"] {
        for seed in 1..=3 {
            let text = fs::read_to_string(run.dir.join(format!("{norm}_seed{seed}")).join(RESULTS_FILE))
                .map_err(|e| e.to_string())?;
            let cells = parse_run_results(&text).map_err(|e| e.to_string())?;
            let acc = cells.iter().find(|(k, _)| k == "clean").map(|c| c.1).ok_or("no clean cell")?;
            clean.push(format!("{norm}/{seed} {acc:.3}"));
            check(acc >= 0.95, format!("(a) {norm} seed {seed} clean accuracy {acc:.4} < 0.95"))?;
        }
    }
    let row = |m: &str| run.report.row(RowKind::Measured, m).ok_or(format!("no {m} row"));
    let (bn, afn, asr) = (row("batch")?, row("afn")?, row("asr")?);
    let summary = format!(
        "avg AFN {:.2} / BN {:.2} / ASR {:.2}; level-5 AFN {:.2} / BN {:.2} / ASR {:.2}; {:.0}s",
        afn.avg, bn.avg, asr.avg, afn.level5, bn.level5, asr.level5, run.secs
    );
    check(afn.avg >= bn.avg - 0.5, format!("(b) AFN avg below BN avg - 0.5: {summary}"))?;
    check(afn.level5 >= bn.level5, format!("(c) AFN level-5 below BN level-5: {summary}"))?;
    check(run.secs <= 900.0, format!("over 900s: {summary}"))?;
    Ok(format!("clean [{}]; {summary}", clean.join(", ")))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_7(a: &CompareRun, b: &CompareRun) -> Outcome {
    let fa = files_under(&a.dir);
    check(fa == files_under(&b.dir), "runs wrote different file sets")?;
    let mut n = 0;
    for f in &fa {
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext == "csv" || ext == "json" {
            let x = fs::read(a.dir.join(f)).map_err(|e| e.to_string())?;
            let y = fs::read(b.dir.join(f)).map_err(|e| e.to_string())?;
            check(x == y, format!("{} differs", f.display()))?;
            n += 1;
        }
    }
    check(n > 9 * 3, format!("only {n} files compared"))?;
    Ok(format!("{n} CSV and checkpoint files byte-identical"))
}

fn criterion_8(run: &CompareRun) -> Outcome {
    let ck = load_checkpoint(run.dir.join("afn_seed1").join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let (_, test) = ck.config.dataset.resolve().map_err(|e| e.to_string())?;
    let one = ck.model.evaluate(&test, 1).map_err(|e| e.to_string())?;
    let many = ck.model.evaluate(&test, 256).map_err(|e| e.to_string())?;
    check(one == many, format!("batch 1 gives {one}, batch 256 gives {many}"))?;
    Ok(format!("accuracy {one} at both batch sizes"))
}

fn criterion_9() -> Outcome {
    let config = manifest().join("configs").join("asr_unstable.cfg");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_afnlab"))
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr).trim().to_string();
    check(
        out.status.code() == Some(EXIT_NUMERIC),
        format!("exit status {:?}, stderr: {stderr}", out.status),
    )?;
    check(stderr.contains("in layer `"), format!("no layer named: {stderr}"))?;
    Ok(stderr)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (i1, l1) = (dir.path().join("a-images.idx"), dir.path().join("a-labels.idx"));
    let ds = synth_shapes(&mut Prng::new(10), 50, 12).map_err(|e| e.to_string())?;
    write_idx(&ds, &i1, &l1).map_err(|e| e.to_string())?;
    let loaded = load_idx(&i1, &l1).map_err(|e| e.to_string())?;
    let bytes = fs::read(&i1).map_err(|e| e.to_string())?;
    check(encode_images(&loaded).map_err(|e| e.to_string())? == bytes, "IDX images changed on write∘load")?;
    check(
        encode_labels(&loaded).map_err(|e| e.to_string())? == fs::read(&l1).map_err(|e| e.to_string())?,
        "IDX labels changed on write∘load",
    )?;

    let cfg = small_config("afn");
    let trained = train(&cfg).map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &trained.model, &cfg, trained.prng_state).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let (_, test) = cfg.dataset.resolve().map_err(|e| e.to_string())?;
    let a = trained.model.logits(test.images(), Mode::Eval).map_err(|e| e.to_string())?;
    let b = ck.model.logits(test.images(), Mode::Eval).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(&a) == bits(&b), "checkpoint reload changed eval logits")?;
    check(
        checkpoint_to_string(&ck.model, &ck.config, ck.prng_state) == fs::read_to_string(&path).map_err(|e| e.to_string())?,
        "checkpoint re-serialization differs",
    )?;

    let probe = synth_shapes(&mut Prng::new(11), 100, 16).map_err(|e| e.to_string())?;
    let mut devs = Vec::new();
    for kind in CorruptionKind::ALL {
        let mut prev = 0.0;
        for level in 1..=5 {
            let spec = CorruptionSpec::new(kind, level).map_err(|e| e.to_string())?;
            let shifted = corrupt(&probe, spec, &mut cell_prng(0, spec));
            let d = shifted
                .images()
                .data()
                .iter()
                .zip(probe.images().data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / probe.images().len() as f64;
            check(d > prev, format!("{spec}: deviation {d:.4} not above level {} ({prev:.4})", level - 1))?;
            prev = d;
        }
        devs.push(format!("{}@5 {prev:.3}", kind.name()));
    }
    Ok(format!("IDX and checkpoint round trips exact; level-5 deviation {}", devs.join(", ")))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why}");
            }
        }
    };
    report(1, "gradient oracle", criterion_1());
    report(2, "statistic oracle", criterion_2());
    report(3, "lambda collapse", criterion_3());
    report(4, "rescale bound", criterion_4());
    report(5, "BN resume", criterion_5());

    let tmp = tempfile::tempdir().expect("temp dir");
    let first = compare(&tmp.path().join("first"));
    let second = compare(&tmp.path().join("second"));
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            report(6, "trend experiment", criterion_6(a));
            report(7, "determinism", criterion_7(a, b));
            report(8, "eval batch independence", criterion_8(a));
        }
        _ => {
            let why = first.as_ref().err().or(second.as_ref().err()).cloned().unwrap_or_default();
            report(6, "trend experiment", Err(why.clone()));
            report(7, "determinism", Err(why.clone()));
            report(8, "eval batch independence", Err(why));
        }
    }
    report(9, "numeric abort", criterion_9());
    report(10, "format round trips", criterion_10());

    if failed == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 10 criteria failed");
        ExitCode::FAILURE
    }
}

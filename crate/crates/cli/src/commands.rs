use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use rand::RngExt;

use gsnet_core::autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamTree};
use gsnet_core::data::{generate_synthetic, load_dataset, split_manifest, Dataset, Split, MANIFEST_FILE};
use gsnet_core::metrics::{EvalResult, CLASS_NAMES};
use gsnet_core::network::{gsnet_forward, BackboneConfig, Checkpoint, NetworkParams, Variant};
use gsnet_core::rng;
use gsnet_core::training::{evaluate, fit_from, EpochLog, TrainConfig};
use gsnet_core::{Shape4, Tensor};

use crate::config::{RunConfig, UsageError};
use crate::CliError;

type CmdResult = Result<(), CliError>;

fn create_out(cfg: &RunConfig) -> Result<&Path, CliError> {
    let out = cfg.out_dir()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(out)
}

fn write(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn validated(tc: TrainConfig) -> Result<TrainConfig, CliError> {
    tc.validate().map_err(|e| UsageError(e.to_string()))?;
    tc.backbone().validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(tc)
}

fn load(cfg: &RunConfig, input_hw: usize) -> Result<Dataset, CliError> {
    let manifest = cfg.manifest_path()?;
    Ok(load_dataset(&manifest, input_hw)?)
}

pub fn gen_data(cfg: &RunConfig) -> CmdResult {
    let synth = cfg.synthetic();
    synth.validate().map_err(|e| UsageError(e.to_string()))?;
    let out = create_out(cfg)?;
    let manifest = generate_synthetic(&synth, out)?;
    let manifest = split_manifest(&manifest, cfg.fractions, cfg.seed)?;
    manifest.write(out.join(MANIFEST_FILE))?;

    let counts = manifest.counts();
    println!("wrote {} images to {}", manifest.rows.len(), out.display());
    println!("{:<8} {:>8} {:>8} {:>8} {:>8}", "split", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2], "total");
    for split in Split::ALL {
        let c = counts[split as usize];
        println!("{:<8} {:>8} {:>8} {:>8} {:>8}", split.name(), c[0], c[1], c[2], c.iter().sum::<usize>());
    }
    Ok(())
}

fn print_epoch(r: &EpochLog) {
    println!(
        "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}",
        r.epoch, r.train_loss, r.train_acc, r.val_acc
    );
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let tc = validated(cfg.train(cfg.seed))?;
    let manifest = cfg.manifest_path()?;
    let out = create_out(cfg)?;
    let data = load_dataset(&manifest, tc.input_hw)?;
    println!(
        "training {} on {} train / {} val images for {} epochs (lr {}, batch {}, seed {})",
        cfg.variant,
        data.train.len(),
        data.val.len(),
        tc.epochs,
        tc.lr,
        tc.batch_size,
        tc.seed
    );
    let params = NetworkParams::for_variant(tc.backbone(), cfg.variant, tc.seed)?;
    let result = fit_from(&tc, &data, cfg.variant, params, print_epoch)?;

    write(&out.join("train_log.csv"), &result.log.to_csv())?;
    result.best.save(out.join("checkpoint"))?;
    let val = evaluate(&result.best.params, cfg.variant, &data.val)?;
    write(&out.join("val_metrics.csv"), &val.to_csv())?;
    println!("best checkpoint: epoch {} (validation)", result.best.epoch);
    print!("{}", val.to_text());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let ckpt_dir = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| UsageError("a checkpoint is required (--checkpoint)".into()))?;
    let manifest = cfg.manifest_path()?;
    let out = create_out(cfg)?;
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let data = load_dataset(&manifest, ckpt.params.config.input_hw)?;
    let samples = data.split(cfg.split);
    if samples.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("split '{}' is empty", cfg.split)));
    }
    let result = evaluate(&ckpt.params, ckpt.variant, samples)?;
    let mut text = format!(
        "{} checkpoint (epoch {}, seed {}) on {} {} images\n",
        ckpt.variant,
        ckpt.epoch,
        ckpt.seed,
        samples.len(),
        cfg.split
    );
    text.push_str(&result.to_text());
    write(&out.join(format!("eval_{}.txt", cfg.split)), &text)?;
    write(&out.join(format!("eval_{}.csv", cfg.split)), &result.to_csv())?;
    if let Some(gsam) = &ckpt.params.gsam {
        // Attention maps of the first backbone feature map, for inspection.
        let mut g = Graph::new();
        let x = g.input(samples[0].image.clone());
        let f = gsnet_core::network::backbone_forward(&mut g, x, &ckpt.params)?;
        gsam.forward(g.value(f))?.write_diagnostics(out.join("attention"))?;
    }
    print!("{text}");
    Ok(())
}

/// Tiny model used by `gradcheck`: 8×8 single-channel input, two stages,
/// giving a 2×2×8 feature map.
pub fn gradcheck_config() -> BackboneConfig {
    BackboneConfig {
        stage_channels: vec![4, 8],
        input_hw: 8,
        input_channels: 1,
    }
}

fn randomized(variant: Variant, seed: u64) -> Result<NetworkParams, CliError> {
    // Same draws for every variant; the baseline just drops the module.
    let mut params = NetworkParams::init(gradcheck_config(), true, seed)?;
    let mut r = rng::seeded(seed, 0x6772_6164);
    params.visit_mut(&mut |p| {
        for v in p.value_mut().data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    });
    Ok(if variant.uses_gsam() { params } else { params.without_gsam() })
}

pub fn gradcheck_reports(seed: u64, tol: f64, samples: usize) -> Result<Vec<(Variant, GradCheckReport)>, CliError> {
    let mut r = rng::seeded(seed, 0x696d_6167);
    let image = Tensor::from_fn(Shape4::new(1, 8, 8, 1)?, |_, _, _, _| r.random_range(0.0..1.0));
    let label = [r.random_range(0..3usize)];
    let opts = GradCheckOptions {
        tol,
        samples_per_param: (samples > 0).then_some(samples),
        seed,
        ..GradCheckOptions::default()
    };
    let mut reports = Vec::new();
    for variant in Variant::ALL {
        let mut params = randomized(variant, seed)?;
        let report = finite_diff_check(
            &mut params,
            |g: &mut Graph, p: &NetworkParams| {
                let x = g.input(image.clone());
                let out = gsnet_forward(g, x, p, variant)?;
                g.cross_entropy(out.logits, &label)
            },
            &opts,
        )?;
        reports.push((variant, report));
    }
    Ok(reports)
}

pub fn gradcheck(cfg: &RunConfig) -> CmdResult {
    let out = create_out(cfg)?;
    let reports = gradcheck_reports(cfg.seed, cfg.tol, cfg.samples)?;
    let mut text = String::new();
    let mut csv = String::from("variant,parameter,elements,max_rel_error,pass\n");
    for (variant, report) in &reports {
        let _ = writeln!(
            text,
            "{variant}: {} ({} parameters, max rel err {:.3e}, tol {:e})",
            if report.passed() { "PASS" } else { "FAIL" },
            report.entries.len(),
            report.max_rel_error(),
            report.tol
        );
        text.push_str(&report.to_text());
        for line in report.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{variant},{line}");
        }
    }
    write(&out.join("gradcheck.txt"), &text)?;
    write(&out.join("gradcheck.csv"), &csv)?;
    print!("{text}");
    if reports.iter().all(|(_, r)| r.passed()) {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "gradient check failed at tolerance {:e}",
            cfg.tol
        )))
    }
}

pub const ABLATION_HEADER: &str = "variant,method,acc,macro_f1,macro_auc";

pub fn ablate(cfg: &RunConfig) -> CmdResult {
    let base = validated(cfg.train(cfg.seeds[0]))?;
    let out = create_out(cfg)?;
    let data = load(cfg, base.input_hw)?;
    if data.test.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("test split is empty")));
    }
    let mut runs = String::from("variant,seed,best_epoch,acc,macro_f1,macro_auc\n");
    let mut sums = [[0.0f64; 3]; 4];
    for &seed in &cfg.seeds {
        let tc = cfg.train(seed);
        // One draw per seed: every variant starts from the same backbone
        // and classifier, the baseline without the attention module.
        let shared = NetworkParams::init(tc.backbone(), true, seed)?;
        for (vi, variant) in Variant::ALL.into_iter().enumerate() {
            let params = if variant.uses_gsam() { shared.clone() } else { shared.without_gsam() };
            println!("== {variant}, seed {seed}");
            let fit = fit_from(&tc, &data, variant, params, print_epoch)?;
            let result: EvalResult = evaluate(&fit.best.params, variant, &data.test)?;
            println!("   test {}", result.csv_row());
            let run_dir = out.join("runs").join(format!("{variant}_seed{seed}"));
            fs::create_dir_all(&run_dir)?;
            write(&run_dir.join("train_log.csv"), &fit.log.to_csv())?;
            let _ = writeln!(runs, "{variant},{seed},{},{}", fit.best.epoch, result.csv_row());
            for (s, v) in sums[vi].iter_mut().zip([result.accuracy, result.macro_f1, result.macro_auc]) {
                *s += v;
            }
        }
    }
    let n = cfg.seeds.len() as f64;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut table = format!(
        "Test metrics, mean over seeds {:?}\n{:<18} {:>8} {:>8} {:>8}\n",
        cfg.seeds, "Method", "Acc", "F1", "AUC"
    );
    for (vi, variant) in Variant::ALL.into_iter().enumerate() {
        let [acc, f1, auc] = sums[vi].map(|s| s / n);
        let _ = writeln!(csv, "{variant},{},{acc:.4},{f1:.4},{auc:.4}", variant.label());
        let _ = writeln!(table, "{:<18} {:>8.4} {:>8.4} {:>8.4}", variant.label(), acc, f1, auc);
    }
    write(&out.join("ablation_runs.csv"), &runs)?;
    write(&out.join("ablation.csv"), &csv)?;
    write(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

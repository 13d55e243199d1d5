//! Command-line front end. Every subcommand is driven by a declarative
//! TOML config plus explicit paths, so any artifact can be regenerated
//! from the config snapshot and seed alone.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use irib::degrade::{apply_manifest, sample_manifest, DegradationPreset};
use irib::harness::config::ExperimentConfig;
use irib::harness::eval::{
    ablate_lambda_blur, build_split_pairs, evaluate, plug_and_play_eval, summarize,
    write_split_manifests, MetricsRow, RunHeader,
};
use irib::harness::io::{load_png, read_csv, save_png, write_csv, write_jsonl};
use irib::harness::synth::synth_dataset;
use irib::harness::train::{
    pretrain_frozen_stack, train_direct, train_projector, FrozenStack, TrainRun,
};
use irib::lfo::lfo_restore;
use irib::models::{FeatureExtractor, PriorScore, ResidualNet};
use irib::seed;

#[derive(Parser)]
#[command(name = "irib", version, about = "Extreme-to-mild image restoration workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetKind {
    Lq,
    Elq,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural clean-image corpus as PNGs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a directory of PNGs under a preset, recording one replayable
    /// manifest per file.
    Degrade {
        #[arg(long, value_enum)]
        preset: PresetKind,
        #[arg(long)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest_out: PathBuf,
        /// Optional config whose presets replace the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 1: train the restorer plus both noise predictors and store
    /// their checkpoints under the run directory.
    TrainRestorer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Stage 2: train the projector against the frozen stage-1 stack.
    TrainProjector {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Budget-matched single-network arm trained straight to clean targets.
    TrainDirect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Score the trained arms on the held-out split and write metrics.csv
    /// plus the restored image grids.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Restore one image, optionally dumping every refinement iterate.
    Lfo {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long)]
        ckpt_projector: PathBuf,
        #[arg(long)]
        ckpt_restorer: PathBuf,
        #[arg(long)]
        dump_trace: Option<PathBuf>,
        #[arg(long, default_value = "restored.png")]
        out: PathBuf,
    },
    /// Sweep the blur-fidelity weight and plot the fidelity/realism plane.
    AblateBlur {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Feed the trained projector into a foreign restorer checkpoint.
    PlugAndPlay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        alt_restorer: PathBuf,
        /// Config the alternate restorer was trained under, for preset
        /// compatibility checking. Defaults to the main config.
        #[arg(long)]
        alt_config: Option<PathBuf>,
    },
    /// Print a digest of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("IRIB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: IRIB_THREADS must be a positive integer");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Loads a config and applies the IRIB_SEED override if present.
fn load_config(path: &Path) -> irib::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Ok(s) = std::env::var("IRIB_SEED") {
        cfg.run_seed = s
            .parse::<u64>()
            .map_err(|_| irib::Error::invalid("IRIB_SEED must be an unsigned 64-bit integer"))?;
    }
    Ok(cfg)
}

fn sorted_pngs(dir: &Path) -> irib::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(irib::Error::invalid(format!("no .png files in {}", dir.display())));
    }
    Ok(files)
}

fn arm_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.run_seed, "arm", 0)
}

fn stack_dir(run: &Path) -> PathBuf {
    run.join("checkpoints")
}

fn load_stack(run: &Path) -> irib::Result<FrozenStack> {
    let ck = stack_dir(run);
    Ok(FrozenStack {
        restorer: ResidualNet::load(&ck.join("restorer.ckpt"))?,
        prior: PriorScore::load(&ck.join("prior.ckpt"))?,
        student: PriorScore::load(&ck.join("student.ckpt"))?,
        features: FeatureExtractor::fixed(),
    })
}

/// Emits the checkpoint (already rolled back to the last finite step on
/// divergence) and reports the abort as a hard error afterwards.
fn save_arm<L>(
    net: &ResidualNet,
    run: &TrainRun<L>,
    ck: &Path,
    name: &str,
) -> irib::Result<()> {
    std::fs::create_dir_all(ck.parent().unwrap_or(Path::new(".")))?;
    net.save(ck)?;
    match run.aborted_at {
        Some(step) => Err(irib::Error::Numeric(format!(
            "{name} training diverged at step {step}; last-good checkpoint kept at {}",
            ck.display()
        ))),
        None => Ok(()),
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StageOne {
    heldout_psnr_delta: f64,
}

fn run(cli: Cli) -> irib::Result<()> {
    match cli.cmd {
        Cmd::Synth { n, size, seed: seed_value, out } => {
            let corpus = synth_dataset(n, size, seed_value)?;
            std::fs::create_dir_all(&out)?;
            for (i, img) in corpus.iter().enumerate() {
                save_png(&out.join(format!("{i:03}.png")), img)?;
            }
            println!("wrote {} images to {}", corpus.len(), out.display());
        }
        Cmd::Degrade { preset, seed: seed_value, input, out, manifest_out, config } => {
            let presets = match config {
                Some(p) => load_config(&p)?.presets,
                None => ExperimentConfig::default().presets,
            };
            let preset: &DegradationPreset = match preset {
                PresetKind::Lq => &presets.lq,
                PresetKind::Elq => &presets.elq,
            };
            std::fs::create_dir_all(&out)?;
            std::fs::create_dir_all(&manifest_out)?;
            for (i, path) in sorted_pngs(&input)?.iter().enumerate() {
                let img = load_png(path)?;
                let manifest = sample_manifest(preset, seed::derive(seed_value, "file", i as u64))?;
                let degraded = apply_manifest(&manifest, &img)?;
                let name = path.file_name().unwrap();
                save_png(&out.join(name), &degraded)?;
                let stem = path.file_stem().unwrap().to_string_lossy();
                std::fs::write(
                    manifest_out.join(format!("{stem}.json")),
                    serde_json::to_string_pretty(&manifest)?,
                )?;
            }
            println!("degraded {} into {}", input.display(), out.display());
        }
        Cmd::TrainRestorer { config, run } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            std::fs::create_dir_all(&run)?;
            cfg.save(&run.join("config.toml"))?;
            let (train_pairs, test_pairs) = build_split_pairs(&cfg)?;
            let stack_out = pretrain_frozen_stack(&cfg, &train_pairs, &test_pairs)?;
            let ck = stack_dir(&run);
            std::fs::create_dir_all(&ck)?;
            stack_out.stack.restorer.save(&ck.join("restorer.ckpt"))?;
            stack_out.stack.prior.save(&ck.join("prior.ckpt"))?;
            stack_out.stack.student.save(&ck.join("student.ckpt"))?;
            write_jsonl(&run.join("losses_restorer.jsonl"), &stack_out.restorer_logs)?;
            write_jsonl(&run.join("losses_prior.jsonl"), &stack_out.prior_logs)?;
            write_jsonl(&run.join("losses_student.jsonl"), &stack_out.student_logs)?;
            let stage = StageOne { heldout_psnr_delta: stack_out.heldout_psnr_delta };
            std::fs::write(run.join("stage1.json"), serde_json::to_string_pretty(&stage)?)?;
            write_split_manifests(&run, &train_pairs, &test_pairs)?;
            println!(
                "held-out psnr improvement: {:+.3} dB over {} test items",
                stack_out.heldout_psnr_delta,
                test_pairs.len()
            );
        }
        Cmd::TrainProjector { config, run } => {
            let cfg = load_config(&config)?;
            let stack = load_stack(&run)?;
            let (train_pairs, _) = build_split_pairs(&cfg)?;
            let (net, tr) = train_projector(&cfg, &stack, &train_pairs, arm_seed(&cfg))?;
            write_jsonl(&run.join("losses_projector.jsonl"), &tr.logs)?;
            save_arm(&net, &tr, &stack_dir(&run).join("projector.ckpt"), "projector")?;
            println!("projector trained for {} steps", cfg.optimizer.steps);
        }
        Cmd::TrainDirect { config, run } => {
            let cfg = load_config(&config)?;
            let stack = load_stack(&run)?;
            let (train_pairs, _) = build_split_pairs(&cfg)?;
            let (net, tr) = train_direct(&cfg, &stack, &train_pairs, arm_seed(&cfg))?;
            write_jsonl(&run.join("losses_direct.jsonl"), &tr.logs)?;
            save_arm(&net, &tr, &stack_dir(&run).join("direct.ckpt"), "direct")?;
            println!("direct arm trained for {} steps", cfg.optimizer.steps);
        }
        Cmd::Eval { config, run } => {
            let cfg = load_config(&config)?;
            let stack = load_stack(&run)?;
            let ck = stack_dir(&run);
            let projector = ResidualNet::load(&ck.join("projector.ckpt"))?;
            let direct_path = ck.join("direct.ckpt");
            let direct =
                direct_path.exists().then(|| ResidualNet::load(&direct_path)).transpose()?;
            let (_, test_pairs) = build_split_pairs(&cfg)?;
            let rows = evaluate(
                Some(&projector),
                &stack.restorer,
                direct.as_ref(),
                &stack.features,
                &test_pairs,
                &cfg.lfo_iters,
                cfg.loss.k,
            )?;
            write_csv(&run.join("metrics.csv"), &rows)?;
            for (i, p) in test_pairs.iter().enumerate() {
                save_png(&run.join(format!("images/hq/{i:03}.png")), &p.item.z_hq)?;
                save_png(&run.join(format!("images/lq/{i:03}.png")), &p.item.x_lq)?;
                save_png(&run.join(format!("images/elq/{i:03}.png")), &p.item.x_elq)?;
            }
            for &iters in &cfg.lfo_iters {
                for (i, p) in test_pairs.iter().enumerate() {
                    let trace =
                        lfo_restore(&p.item.x_elq, &projector, &stack.restorer, &stack.features, iters)?;
                    save_png(&run.join(format!("images/restored_lfo{iters}/{i:03}.png")), &trace.final_hq)?;
                }
            }
            if let Some(d) = &direct {
                for (i, p) in test_pairs.iter().enumerate() {
                    let c = stack.features.extract_condition(&p.item.x_elq)?;
                    let img = d.infer(&p.item.x_elq, Some(&c))?;
                    save_png(&run.join(format!("images/restored_direct/{i:03}.png")), &img)?;
                }
            }
            if let Some(d) = &direct {
                let heldout = match std::fs::read_to_string(run.join("stage1.json")) {
                    Ok(text) => serde_json::from_str::<StageOne>(&text)?.heldout_psnr_delta,
                    Err(_) => {
                        eprintln!("warning: stage1.json missing, reporting zero stage-1 gain");
                        0.0
                    }
                };
                let header = RunHeader::new(&cfg, &projector, d, heldout);
                std::fs::write(run.join("header.json"), serde_json::to_string_pretty(&header)?)?;
                print!("{}", summarize(&header, &rows));
            } else {
                for row in &rows {
                    println!(
                        "{} lfo={}: psnr {:.3} ssim {:.4} fid {:.4}",
                        row.method, row.lfo, row.psnr, row.ssim, row.fid_proxy
                    );
                }
            }
        }
        Cmd::Lfo { input, iters, ckpt_projector, ckpt_restorer, dump_trace, out } => {
            let projector = ResidualNet::load(&ckpt_projector)?;
            let restorer = ResidualNet::load(&ckpt_restorer)?;
            let features = FeatureExtractor::fixed();
            let img = load_png(&input)?;
            let trace = lfo_restore(&img, &projector, &restorer, &features, iters)?;
            if let Some(dir) = dump_trace {
                std::fs::create_dir_all(&dir)?;
                for (i, (cond, proxy)) in
                    trace.conditions.iter().zip(&trace.lq_proxies).enumerate()
                {
                    std::fs::write(
                        dir.join(format!("condition_{i}.json")),
                        serde_json::to_string_pretty(cond)?,
                    )?;
                    save_png(&dir.join(format!("proxy_{i}.png")), proxy)?;
                }
                save_png(&dir.join("final.png"), &trace.final_hq)?;
            }
            save_png(&out, &trace.final_hq)?;
            println!("restored {} with {iters} refinement passes", input.display());
        }
        Cmd::AblateBlur { config, run } => {
            let cfg = load_config(&config)?;
            let stack = load_stack(&run)?;
            let (train_pairs, test_pairs) = build_split_pairs(&cfg)?;
            let (rows, svg) =
                ablate_lambda_blur(&cfg, &stack, &train_pairs, &test_pairs, arm_seed(&cfg))?;
            write_csv(&run.join("ablation.csv"), &rows)?;
            std::fs::write(run.join("tradeoff.svg"), svg)?;
            for r in &rows {
                println!(
                    "lambda_blur={}: psnr {:.3} feature distance {:.4}",
                    r.lambda_blur, r.psnr, r.perc_proxy
                );
            }
        }
        Cmd::PlugAndPlay { config, run, alt_restorer, alt_config } => {
            let cfg = load_config(&config)?;
            let projector = ResidualNet::load(&stack_dir(&run).join("projector.ckpt"))?;
            let alt = ResidualNet::load(&alt_restorer)?;
            let alt_preset = match alt_config {
                Some(p) => load_config(&p)?.presets.lq,
                None => cfg.presets.lq.clone(),
            };
            let (_, test_pairs) = build_split_pairs(&cfg)?;
            let report = plug_and_play_eval(
                &projector,
                &alt,
                &FeatureExtractor::fixed(),
                &test_pairs,
                &cfg.presets.lq,
                &alt_preset,
                cfg.loss.k,
            )?;
            write_csv(&run.join("pnp.csv"), &report.rows)?;
            if let Some(w) = &report.preset_warning {
                eprintln!("warning: {w}");
            }
            for row in &report.rows {
                println!("{}: psnr {:.3} fid {:.4}", row.method, row.psnr, row.fid_proxy);
            }
        }
        Cmd::Report { run } => {
            let rows: Vec<MetricsRow> = read_csv(&run.join("metrics.csv"))?;
            match std::fs::read_to_string(run.join("header.json")) {
                Ok(text) => {
                    let header: RunHeader = serde_json::from_str(&text)?;
                    print!("{}", summarize(&header, &rows));
                }
                Err(_) => {
                    for row in &rows {
                        println!(
                            "{} lfo={}: psnr {:.3} ssim {:.4} fid {:.4}",
                            row.method, row.lfo, row.psnr, row.ssim, row.fid_proxy
                        );
                    }
                }
            }
            if let Ok(text) = std::fs::read_to_string(run.join("stage1.json")) {
                let stage: StageOne = serde_json::from_str(&text)?;
                println!("stage-1 held-out psnr gain: {:+.3} dB", stage.heldout_psnr_delta);
            }
        }
    }
    Ok(())
}

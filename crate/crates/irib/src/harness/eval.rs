//! Evaluation and experiment orchestration: per-method metric rows, the
//! full two-arm comparison run with its on-disk artifact layout, the
//! low-pass weight ablation, and restorer swapping.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{DegradationManifest, DegradationPreset};
use crate::harness::config::ExperimentConfig;
use crate::harness::io::{save_png, svg_scatter, write_csv, write_jsonl};
use crate::harness::metrics::{blur_mse, embed_set, frechet_distance, perc_proxy, psnr, ssim};
use crate::harness::pairs::{make_pairs, Pair};
use crate::harness::synth::synth_dataset;
use crate::harness::train::{
    pretrain_frozen_stack, train_direct, train_projector, FrozenStack, ReportLog, ScalarLog,
    TrainRun,
};
use crate::lfo::lfo_restore;
use crate::models::{FeatureExtractor, ResidualNet};
use crate::numerics::Tensor;
use crate::{seed, Error, Result};

/// One line of metrics.csv: a method arm and its test-set means.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub lfo: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub blur_mse: f64,
    pub perc_proxy: f64,
    pub fid_proxy: f64,
}

fn score_outputs(
    method: &str,
    lfo: usize,
    outputs: &[Tensor],
    pairs: &[Pair],
    features: &FeatureExtractor,
    k: usize,
) -> Result<MetricsRow> {
    if outputs.len() != pairs.len() || outputs.is_empty() {
        return Err(Error::invalid("output set does not match the test set"));
    }
    let per_item: Vec<(f64, f64, f64, f64)> = outputs
        .par_iter()
        .zip(pairs.par_iter())
        .map(|(y, p)| {
            let z = &p.item.z_hq;
            Ok((psnr(y, z)?, ssim(y, z)?, blur_mse(y, z, k)?, perc_proxy(y, z, features)?))
        })
        .collect::<Result<_>>()?;
    let n = per_item.len() as f64;
    let hq: Vec<Tensor> = pairs.iter().map(|p| p.item.z_hq.clone()).collect();
    let fid = frechet_distance(&embed_set(outputs, features)?, &embed_set(&hq, features)?)?;
    Ok(MetricsRow {
        method: method.into(),
        lfo,
        psnr: per_item.iter().map(|m| m.0).sum::<f64>() / n,
        ssim: per_item.iter().map(|m| m.1).sum::<f64>() / n,
        blur_mse: per_item.iter().map(|m| m.2).sum::<f64>() / n,
        perc_proxy: per_item.iter().map(|m| m.3).sum::<f64>() / n,
        fid_proxy: fid,
    })
}

fn decomposed_outputs(
    projector: &ResidualNet,
    restorer: &ResidualNet,
    features: &FeatureExtractor,
    pairs: &[Pair],
    iterations: usize,
) -> Result<Vec<Tensor>> {
    pairs
        .par_iter()
        .map(|p| Ok(lfo_restore(&p.item.x_elq, projector, restorer, features, iterations)?.final_hq))
        .collect()
}

fn direct_outputs(
    net: &ResidualNet,
    features: &FeatureExtractor,
    pairs: &[Pair],
) -> Result<Vec<Tensor>> {
    pairs
        .par_iter()
        .map(|p| {
            let c = features.extract_condition(&p.item.x_elq)?;
            net.infer(&p.item.x_elq, Some(&c))
        })
        .collect()
}

/// Test-set comparison: the single-network arm as one row, then the
/// decomposed arm once per requested refinement count.
pub fn evaluate(
    projector: Option<&ResidualNet>,
    restorer: &ResidualNet,
    direct: Option<&ResidualNet>,
    features: &FeatureExtractor,
    pairs: &[Pair],
    lfo_iters: &[usize],
    k: usize,
) -> Result<Vec<MetricsRow>> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut rows = Vec::new();
    if let Some(net) = direct {
        let outputs = direct_outputs(net, features, pairs)?;
        rows.push(score_outputs("direct", 0, &outputs, pairs, features, k)?);
    }
    if let Some(f) = projector {
        for &iters in lfo_iters {
            let outputs = decomposed_outputs(f, restorer, features, pairs, iters)?;
            rows.push(score_outputs("decomposed", iters, &outputs, pairs, features, k)?);
        }
    }
    Ok(rows)
}

/// Budget bookkeeping written at the top of every comparison run.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RunHeader {
    pub run_seed: u64,
    pub image_size: usize,
    pub steps_projector: usize,
    pub steps_direct: usize,
    pub params_projector: usize,
    pub params_direct: usize,
    /// Equal step counts and parameter counts within five percent.
    pub budget_fair: bool,
    pub heldout_psnr_delta: f64,
}

impl RunHeader {
    pub fn new(
        cfg: &ExperimentConfig,
        projector: &ResidualNet,
        direct: &ResidualNet,
        heldout_psnr_delta: f64,
    ) -> Self {
        let (pp, pd) = (projector.params.coord_count(), direct.params.coord_count());
        let within = (pp as f64 - pd as f64).abs() <= 0.05 * pp.max(pd) as f64;
        RunHeader {
            run_seed: cfg.run_seed,
            image_size: cfg.image_size,
            steps_projector: cfg.optimizer.steps,
            steps_direct: cfg.optimizer.steps,
            params_projector: pp,
            params_direct: pd,
            budget_fair: within,
            heldout_psnr_delta,
        }
    }
}

/// Everything a comparison run produces, kept in memory for callers that
/// continue working with the trained arms.
pub struct RunOutput {
    pub header: RunHeader,
    pub rows: Vec<MetricsRow>,
    pub stack: FrozenStack,
    pub projector: ResidualNet,
    pub direct: ResidualNet,
    pub test_pairs: Vec<Pair>,
}

#[derive(Serialize)]
struct ManifestRecord<'a> {
    index: usize,
    lq: &'a DegradationManifest,
    elq: &'a DegradationManifest,
}

fn write_pair_images(dir: &Path, pairs: &[Pair]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        save_png(&dir.join(format!("hq/{i:03}.png")), &p.item.z_hq)?;
        save_png(&dir.join(format!("lq/{i:03}.png")), &p.item.x_lq)?;
        save_png(&dir.join(format!("elq/{i:03}.png")), &p.item.x_elq)?;
    }
    Ok(())
}

fn write_manifests(path: &Path, pairs: &[Pair]) -> Result<()> {
    let records: Vec<ManifestRecord> = pairs
        .iter()
        .enumerate()
        .map(|(index, p)| ManifestRecord { index, lq: &p.manifest_lq, elq: &p.manifest_elq })
        .collect();
    write_jsonl(path, &records)
}

/// One manifest log per split, under the run directory.
pub fn write_split_manifests(run: &Path, train: &[Pair], test: &[Pair]) -> Result<()> {
    write_manifests(&run.join("manifests_train.jsonl"), train)?;
    write_manifests(&run.join("manifests_test.jsonl"), test)
}

/// Synthesizes both splits and degrades them into training pairs, all
/// derived from the run seed.
pub fn build_split_pairs(cfg: &ExperimentConfig) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let train_hq = synth_dataset(cfg.corpus.train, cfg.image_size, seed::derive(cfg.run_seed, "corpus-train", 0))?;
    let test_hq = synth_dataset(cfg.corpus.test, cfg.image_size, seed::derive(cfg.run_seed, "corpus-test", 0))?;
    let train_pairs = make_pairs(&train_hq, &cfg.presets, seed::derive(cfg.run_seed, "pairs-train", 0))?;
    let test_pairs = make_pairs(&test_hq, &cfg.presets, seed::derive(cfg.run_seed, "pairs-test", 0))?;
    Ok((train_pairs, test_pairs))
}

/// Builds the corpora, trains the frozen stack and both arms, evaluates,
/// and lays the artifacts out under `out`:
/// config.toml, header.json, metrics.csv, checkpoints/, images/,
/// manifests for both splits, and per-phase loss logs.
pub fn run_comparison(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let (train_pairs, test_pairs) = build_split_pairs(cfg)?;

    let stack_out = pretrain_frozen_stack(cfg, &train_pairs, &test_pairs)?;
    let arm_seed = seed::derive(cfg.run_seed, "arm", 0);
    let (projector, p_run) = train_projector(cfg, &stack_out.stack, &train_pairs, arm_seed)?;
    let (direct, d_run) = train_direct(cfg, &stack_out.stack, &train_pairs, arm_seed)?;
    for (name, aborted) in [("projector", p_run.aborted_at), ("direct", d_run.aborted_at)] {
        if let Some(step) = aborted {
            return Err(Error::Numeric(format!("{name} training diverged at step {step}")));
        }
    }

    let stack = stack_out.stack;
    let rows = evaluate(
        Some(&projector),
        &stack.restorer,
        Some(&direct),
        &stack.features,
        &test_pairs,
        &cfg.lfo_iters,
        cfg.loss.k,
    )?;

    cfg.save(&out.join("config.toml"))?;
    let header = RunHeader::new(cfg, &projector, &direct, stack_out.heldout_psnr_delta);
    std::fs::write(out.join("header.json"), serde_json::to_string_pretty(&header)?)?;
    write_csv(&out.join("metrics.csv"), &rows)?;

    let ck = out.join("checkpoints");
    std::fs::create_dir_all(&ck)?;
    stack.restorer.save(&ck.join("restorer.ckpt"))?;
    stack.prior.save(&ck.join("prior.ckpt"))?;
    stack.student.save(&ck.join("student.ckpt"))?;
    projector.save(&ck.join("projector.ckpt"))?;
    direct.save(&ck.join("direct.ckpt"))?;

    write_split_manifests(out, &train_pairs, &test_pairs)?;
    write_pair_images(&out.join("images"), &test_pairs)?;
    for &iters in &cfg.lfo_iters {
        let outputs = decomposed_outputs(&projector, &stack.restorer, &stack.features, &test_pairs, iters)?;
        for (i, img) in outputs.iter().enumerate() {
            save_png(&out.join(format!("images/restored_lfo{iters}/{i:03}.png")), img)?;
        }
    }
    let d_out = direct_outputs(&direct, &stack.features, &test_pairs)?;
    for (i, img) in d_out.iter().enumerate() {
        save_png(&out.join(format!("images/restored_direct/{i:03}.png")), img)?;
    }

    write_jsonl(&out.join("losses_restorer.jsonl"), &stack_out.restorer_logs)?;
    write_jsonl(&out.join("losses_prior.jsonl"), &stack_out.prior_logs)?;
    write_jsonl(&out.join("losses_student.jsonl"), &stack_out.student_logs)?;
    write_jsonl(&out.join("losses_projector.jsonl"), &p_run.logs)?;
    write_jsonl(&out.join("losses_direct.jsonl"), &d_run.logs)?;

    Ok(RunOutput { header, rows, stack, projector, direct, test_pairs })
}

pub const LAMBDA_BLUR_GRID: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct AblationRow {
    pub lambda_blur: f64,
    pub psnr: f64,
    pub perc_proxy: f64,
}

/// Sweeps the low-pass weight over its grid with unit pixel and feature
/// weights, training one projector per point and scoring the plain
/// composition on the test set. Returns the rows plus a scatter of
/// feature distance against fidelity.
pub fn ablate_lambda_blur(
    cfg: &ExperimentConfig,
    stack: &FrozenStack,
    train_pairs: &[Pair],
    test_pairs: &[Pair],
    arm_seed: u64,
) -> Result<(Vec<AblationRow>, String)> {
    let mut rows = Vec::new();
    for &lb in &LAMBDA_BLUR_GRID {
        let mut sweep = cfg.clone();
        sweep.loss.lambda_blur = lb;
        sweep.loss.lambda_l2 = 1.0;
        sweep.loss.lambda_perc = 1.0;
        let (projector, run) = train_projector(&sweep, stack, train_pairs, arm_seed)?;
        if let Some(step) = run.aborted_at {
            return Err(Error::Numeric(format!(
                "ablation at lambda_blur={lb} diverged at step {step}"
            )));
        }
        let row = evaluate(
            Some(&projector),
            &stack.restorer,
            None,
            &stack.features,
            test_pairs,
            &[0],
            sweep.loss.k,
        )?
        .remove(0);
        rows.push(AblationRow { lambda_blur: lb, psnr: row.psnr, perc_proxy: row.perc_proxy });
    }
    let points: Vec<(f64, f64, String)> = rows
        .iter()
        .map(|r| (r.perc_proxy, r.psnr, format!("lambda_blur={}", r.lambda_blur)))
        .collect();
    let svg = svg_scatter(&points, "feature distance", "psnr (dB)");
    Ok((rows, svg))
}

/// Swapped-restorer evaluation: the alternate restorer alone against the
/// projector feeding it. Warns when the alternate was trained for a
/// different mild-degradation preset than the projector's.
pub struct PnpReport {
    pub rows: Vec<MetricsRow>,
    pub preset_warning: Option<String>,
}

pub fn plug_and_play_eval(
    projector: &ResidualNet,
    alt_restorer: &ResidualNet,
    features: &FeatureExtractor,
    pairs: &[Pair],
    trained_for: &DegradationPreset,
    alt_trained_for: &DegradationPreset,
    k: usize,
) -> Result<PnpReport> {
    let alone = direct_outputs(alt_restorer, features, pairs)?;
    let chained = decomposed_outputs(projector, alt_restorer, features, pairs, 0)?;
    let rows = vec![
        score_outputs("restorer_alone", 0, &alone, pairs, features, k)?,
        score_outputs("decomposed", 0, &chained, pairs, features, k)?,
    ];
    let preset_warning = (trained_for != alt_trained_for).then(|| {
        "alternate restorer was trained for a different mild-degradation preset".to_string()
    });
    Ok(PnpReport { rows, preset_warning })
}

/// Human-readable digest of a finished run directory.
pub fn summarize(header: &RunHeader, rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "seed {}  image {}px  steps {}/{}  params {}/{}  budget fair: {}\n",
        header.run_seed,
        header.image_size,
        header.steps_projector,
        header.steps_direct,
        header.params_projector,
        header.params_direct,
        header.budget_fair,
    ));
    s.push_str(&format!("held-out restorer gain: {:+.3} dB\n", header.heldout_psnr_delta));
    s.push_str("method       lfo   psnr     ssim    blur_mse  perc      fid\n");
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>3}  {:>7.3}  {:>6.4}  {:>8.6}  {:>8.4}  {:>8.5}\n",
            r.method, r.lfo, r.psnr, r.ssim, r.blur_mse, r.perc_proxy, r.fid_proxy,
        ));
    }
    s
}

/// Loss traces for the acceptance checks: moving averages over report logs.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

pub fn scalar_losses(logs: &[ScalarLog]) -> Vec<f64> {
    logs.iter().map(|l| l.loss).collect()
}

pub fn report_totals(logs: &[ReportLog]) -> Vec<f64> {
    logs.iter().map(|l| l.report.total).collect()
}

pub fn ensure_completed<L>(name: &str, run: &TrainRun<L>) -> Result<()> {
    match run.aborted_at {
        Some(step) => Err(Error::Numeric(format!("{name} training diverged at step {step}"))),
        None => Ok(()),
    }
}

//! Training loops: momentum SGD with gradient clipping, the frozen stack
//! (restorer plus the two noise predictors), the conditioned projector,
//! and the single-network baseline trained without the reconstruction
//! term. All batch and noise draws derive from seeds, so runs replay
//! exactly; divergence rolls back to the last finite parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::sample_manifest;
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::psnr;
use crate::harness::pairs::Pair;
use crate::losses::{
    hq_fid_loss_tape, hq_prior_loss_tape, LossModels, LossReport, LossWeights,
};
use crate::models::{condition_dropout, FeatureExtractor, NetArch, PriorScore, ResidualNet};
use crate::numerics::{ParamStore, Tape};
use crate::{seed, Error, Result};

pub const MOMENTUM: f64 = 0.9;
pub const GRAD_CLIP: f64 = 1.0;

/// Momentum SGD over a parameter store, with global-norm gradient clipping
/// applied before the velocity update.
pub struct Sgd {
    lr: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Sgd { lr, velocity: store.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Rejects non-finite gradients or parameters without touching values.
    pub fn apply(&mut self, store: &mut ParamStore) -> Result<()> {
        let norm = store.grad_global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric("gradient overflow".into()));
        }
        let scale = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
        for i in 0..store.len() {
            let v = &mut self.velocity[i];
            let p = store.at_mut(i);
            for ((vel, val), g) in v.iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
                *vel = MOMENTUM * *vel + scale * g;
                *val -= self.lr * *vel;
                if !val.is_finite() {
                    return Err(Error::Numeric("parameter overflow".into()));
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
pub struct ScalarLog {
    pub step: usize,
    pub loss: f64,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
pub struct ReportLog {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// A completed (or aborted) training run. `aborted_at` carries the step at
/// which divergence was detected; the model holds the last finite state.
pub struct TrainRun<L> {
    pub logs: Vec<L>,
    pub aborted_at: Option<usize>,
}

fn batch_indices(n: usize, batch: usize, seed_value: u64, step: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed::derive(seed_value, "batch", step as u64));
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Per-item gradient payload carried back from parallel workers.
type ItemGrad = (f64, crate::numerics::Grads, Vec<crate::numerics::Var>);

fn run_steps<F>(
    params: &mut ParamStore,
    cfg: &ExperimentConfig,
    n_items: usize,
    batch_seed: u64,
    mut item_pass: F,
) -> Result<TrainRun<ScalarLog>>
where
    F: FnMut(&ParamStore, usize, usize) -> Result<ItemGrad>,
{
    let mut opt = Sgd::new(cfg.optimizer.learning_rate, params);
    let mut logs = Vec::with_capacity(cfg.optimizer.steps);
    for step in 0..cfg.optimizer.steps {
        let idx = batch_indices(n_items, cfg.optimizer.batch, batch_seed, step);
        let snapshot = params.clone();
        let mut mean_loss = 0.0;
        let mut failed = false;
        for (slot, &item) in idx.iter().enumerate() {
            let (loss, grads, vars) = item_pass(params, step * cfg.optimizer.batch + slot, item)?;
            if !loss.is_finite() {
                failed = true;
                break;
            }
            mean_loss += loss / idx.len() as f64;
            params.accumulate_grads(&grads, &vars, 1.0 / idx.len() as f64);
        }
        if failed || opt.apply(params).is_err() {
            *params = snapshot;
            params.zero_grads();
            return Ok(TrainRun { logs, aborted_at: Some(step) });
        }
        logs.push(ScalarLog { step, loss: mean_loss });
    }
    Ok(TrainRun { logs, aborted_at: None })
}

/// Stage 1a: the restorer, trained on mild-degradation inputs against
/// their clean sources with the pixel and low-pass fidelity terms.
pub fn train_restorer(
    cfg: &ExperimentConfig,
    pairs: &[Pair],
    features: &FeatureExtractor,
) -> Result<(ResidualNet, TrainRun<ScalarLog>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut net = ResidualNet::identity_init(
        NetArch::image_net(),
        seed::derive(cfg.run_seed, "restorer-init", 0),
    )?;
    let w = LossWeights { lambda_perc: 0.0, ..cfg.loss };
    let conditions: Vec<_> = pairs
        .iter()
        .map(|p| features.extract_condition(&p.item.x_lq))
        .collect::<Result<_>>()?;
    let arch = net.arch;
    let mut params = std::mem::take(&mut net.params);
    let run = run_steps(
        &mut params,
        cfg,
        pairs.len(),
        seed::derive(cfg.run_seed, "restorer", 0),
        |params, _, i| {
            let probe = ResidualNet { arch, params: params.clone() };
            let mut tape = Tape::new();
            let vars = probe.bind(&mut tape, true);
            let fv = features.bind(&mut tape);
            let x = tape.constant(pairs[i].item.x_lq.clone());
            let z = tape.constant(pairs[i].item.z_hq.clone());
            let cv = tape.constant(conditions[i].to_tensor());
            let y = probe.forward(&mut tape, &vars, x, Some(cv))?;
            let (l2, perc, blur) = hq_fid_loss_tape(&mut tape, y, z, features, &fv, &w)?;
            let t = tape.add(l2, perc)?;
            let t = tape.add(t, blur)?;
            let g = tape.backward(t)?;
            Ok((tape.value(t).item()?, g, vars))
        },
    )?;
    net.params = params;
    Ok((net, run))
}

/// Stage 1b: a noise predictor fit to the clean corpus by denoising score
/// matching; `tag` separates the independently seeded prior and student.
pub fn train_noise_predictor(
    cfg: &ExperimentConfig,
    pairs: &[Pair],
    tag: &str,
) -> Result<(PriorScore, TrainRun<ScalarLog>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let base = seed::derive(cfg.run_seed, tag, 0);
    let mut model = PriorScore::new(seed::derive(base, "init", 0))?;
    let schedule = model.schedule.clone();
    let arch = model.net.arch;
    let mut params = std::mem::take(&mut model.net.params);
    let run = run_steps(
        &mut params,
        cfg,
        pairs.len(),
        seed::derive(base, "order", 0),
        |params, draw, i| {
            let probe = PriorScore {
                net: ResidualNet { arch, params: params.clone() },
                schedule: schedule.clone(),
            };
            let mut rng = seed::rng(seed::derive(base, "draw", draw as u64));
            let t = rng.random_range(0..schedule.len());
            let z = &pairs[i].item.z_hq;
            let mut tape = Tape::new();
            let vars = probe.bind(&mut tape, true);
            let zv = tape.constant(z.clone());
            let eps = tape.constant(crate::numerics::Tensor::from_vec(
                z.shape().to_vec(),
                (0..z.len()).map(|_| rng.sample(StandardNormal)).collect(),
            )?);
            let zt = schedule.noise_to_tape(&mut tape, zv, t, eps)?;
            let pred = probe.forward(&mut tape, &vars, zt, t)?;
            let d = tape.sub(pred, eps)?;
            let sq = tape.square(d);
            let l = tape.mean(sq);
            let g = tape.backward(l)?;
            Ok((tape.value(l).item()?, g, vars))
        },
    )?;
    model.net.params = params;
    Ok((model, run))
}

pub struct FrozenStack {
    pub restorer: ResidualNet,
    pub prior: PriorScore,
    pub student: PriorScore,
    pub features: FeatureExtractor,
}

pub struct StackTraining {
    pub stack: FrozenStack,
    pub restorer_logs: Vec<ScalarLog>,
    pub prior_logs: Vec<ScalarLog>,
    pub student_logs: Vec<ScalarLog>,
    /// Held-out PSNR(restored, clean) minus PSNR(input, clean), in dB.
    pub heldout_psnr_delta: f64,
}

/// Trains everything the projector later treats as frozen: restorer,
/// prior, and student. Divergence in any part is an error here since
/// nothing downstream can proceed.
pub fn pretrain_frozen_stack(
    cfg: &ExperimentConfig,
    train_pairs: &[Pair],
    test_pairs: &[Pair],
) -> Result<StackTraining> {
    let features = FeatureExtractor::fixed();
    let (restorer, r_run) = train_restorer(cfg, train_pairs, &features)?;
    let (prior, p_run) = train_noise_predictor(cfg, train_pairs, "prior")?;
    let (student, s_run) = train_noise_predictor(cfg, train_pairs, "student")?;
    for (name, run) in [("restorer", &r_run), ("prior", &p_run), ("student", &s_run)] {
        if let Some(step) = run.aborted_at {
            return Err(Error::Numeric(format!("{name} training diverged at step {step}")));
        }
    }
    let deltas: Vec<f64> = test_pairs
        .par_iter()
        .map(|p| {
            let cond = features.extract_condition(&p.item.x_lq)?;
            let restored = restorer.infer(&p.item.x_lq, Some(&cond))?;
            Ok(psnr(&restored, &p.item.z_hq)? - psnr(&p.item.x_lq, &p.item.z_hq)?)
        })
        .collect::<Result<_>>()?;
    let heldout_psnr_delta = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    Ok(StackTraining {
        stack: FrozenStack { restorer, prior, student, features },
        restorer_logs: r_run.logs,
        prior_logs: p_run.logs,
        student_logs: s_run.logs,
        heldout_psnr_delta,
    })
}

/// Stage 2: the projector, trained through the frozen stack with the full
/// objective. Conditions are read from the extreme inputs and nulled with
/// probability `prompt_dropout_p` per draw; each step degrades the
/// restored output back through a freshly sampled gradient-safe manifest.
pub fn train_projector(
    cfg: &ExperimentConfig,
    stack: &FrozenStack,
    pairs: &[Pair],
    arm_seed: u64,
) -> Result<(ResidualNet, TrainRun<ReportLog>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut net = ResidualNet::identity_init(
        NetArch::image_net(),
        seed::derive(arm_seed, "projector-init", 0),
    )?;
    let conditions: Vec<_> = pairs
        .iter()
        .map(|p| stack.features.extract_condition(&p.item.x_elq))
        .collect::<Result<_>>()?;
    let back_preset = cfg.presets.lq.grad_safe();
    let arch = net.arch;
    let mut params = std::mem::take(&mut net.params);
    let mut reports = Vec::<LossReport>::new();
    let run = run_steps(
        &mut params,
        cfg,
        pairs.len(),
        seed::derive(arm_seed, "projector-order", 0),
        |params, draw, i| {
            let probe = ResidualNet { arch, params: params.clone() };
            let models = LossModels {
                projector: &probe,
                restorer: &stack.restorer,
                prior: &stack.prior,
                student: &stack.student,
                features: &stack.features,
            };
            let cond = condition_dropout(
                &conditions[i],
                cfg.prompt_dropout_p,
                seed::derive(arm_seed, "drop", draw as u64),
            )?;
            let back = sample_manifest(&back_preset, seed::derive(arm_seed, "back", draw as u64))?;
            let mut tape = Tape::new();
            let vars = models.bind(&mut tape, true);
            let (total, report) = models.item_loss(
                &mut tape,
                &vars,
                &pairs[i].item,
                &cond,
                &back,
                &cfg.loss,
                seed::derive(arm_seed, "loss", draw as u64),
            )?;
            let g = tape.backward(total)?;
            reports.push(report);
            Ok((report.total, g, vars.projector))
        },
    )?;
    net.params = params;
    let logs = average_reports(&reports, cfg.optimizer.batch);
    Ok((net, TrainRun { logs, aborted_at: run.aborted_at }))
}

/// Baseline arm: one network of the projector's architecture mapping the
/// extreme input straight to the clean target, trained with the prior and
/// fidelity terms only (no degrade-back reconstruction).
pub fn train_direct(
    cfg: &ExperimentConfig,
    stack: &FrozenStack,
    pairs: &[Pair],
    arm_seed: u64,
) -> Result<(ResidualNet, TrainRun<ReportLog>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let mut net = ResidualNet::identity_init(
        NetArch::image_net(),
        seed::derive(arm_seed, "direct-init", 0),
    )?;
    let conditions: Vec<_> = pairs
        .iter()
        .map(|p| stack.features.extract_condition(&p.item.x_elq))
        .collect::<Result<_>>()?;
    let arch = net.arch;
    let mut params = std::mem::take(&mut net.params);
    let mut reports = Vec::<LossReport>::new();
    let run = run_steps(
        &mut params,
        cfg,
        pairs.len(),
        seed::derive(arm_seed, "direct-order", 0),
        |params, draw, i| {
            let probe = ResidualNet { arch, params: params.clone() };
            let cond = condition_dropout(
                &conditions[i],
                cfg.prompt_dropout_p,
                seed::derive(arm_seed, "drop", draw as u64),
            )?;
            let mut tape = Tape::new();
            let vars = probe.bind(&mut tape, true);
            let pv = stack.prior.bind(&mut tape, false);
            let sv = stack.student.bind(&mut tape, false);
            let fv = stack.features.bind(&mut tape);
            let x = tape.constant(pairs[i].item.x_elq.clone());
            let z = tape.constant(pairs[i].item.z_hq.clone());
            let cv = tape.constant(cond.to_tensor());
            let z_hat = probe.forward(&mut tape, &vars, x, Some(cv))?;
            let prior_raw = hq_prior_loss_tape(
                &mut tape,
                z_hat,
                &stack.prior,
                &pv,
                &stack.student,
                &sv,
                seed::derive(arm_seed, "loss", draw as u64),
            )?;
            let prior = tape.mul_scalar(prior_raw, cfg.loss.beta);
            let (l2, perc, blur) =
                hq_fid_loss_tape(&mut tape, z_hat, z, &stack.features, &fv, &cfg.loss)?;
            let mut total = tape.add(prior, l2)?;
            total = tape.add(total, perc)?;
            total = tape.add(total, blur)?;
            let g = tape.backward(total)?;
            let report = LossReport::from_parts(
                0.0,
                tape.value(prior).item()?,
                tape.value(l2).item()?,
                tape.value(perc).item()?,
                tape.value(blur).item()?,
            );
            reports.push(report);
            Ok((report.total, g, vars))
        },
    )?;
    net.params = params;
    let logs = average_reports(&reports, cfg.optimizer.batch);
    Ok((net, TrainRun { logs, aborted_at: run.aborted_at }))
}

fn average_reports(per_draw: &[LossReport], batch: usize) -> Vec<ReportLog> {
    per_draw
        .chunks(batch.max(1))
        .enumerate()
        .map(|(step, chunk)| {
            let n = chunk.len() as f64;
            let sum = |f: fn(&LossReport) -> f64| chunk.iter().map(f).sum::<f64>() / n;
            ReportLog {
                step,
                report: LossReport::from_parts(
                    sum(|r| r.lq_recon),
                    sum(|r| r.hq_prior),
                    sum(|r| r.hq_fid_l2),
                    sum(|r| r.hq_fid_perc),
                    sum(|r| r.hq_fid_blur),
                ),
            }
        })
        .collect()
}

//! Supervised training of the cyclic UNet on windfield sequences: sample
//! (N_t, dt, w) -> target N_{t+dt}, minimize masked L1 plus a unit-norm
//! penalty, evaluate on held-out sequences.
//!
//! Batch items run forward/backward on worker threads, one graph per sample;
//! gradients are reduced in batch order by the single owner, so runs are
//! deterministic regardless of scheduling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LoadedSequence, Split};
use crate::encoding::{build_code, EncodingConfig};
use crate::error::{Error, Result};
use crate::graph::{finite_difference, max_scaled_error, GraphBase, NodeId};
use crate::imageio::{Mask, NormalMap};
use crate::metrics::{pixel_metrics, ssim, AggregateMetrics, FrameMetrics, MetricReport};
use crate::model::{
    build_forward, register_params, save_checkpoint, CycleNet, ModelConfig, ModelParameters,
    ModelParametersBase,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor, TensorBase};

/// Guard inside the per-pixel norm sqrt.
const NORM_EPS: f64 = 1e-12;
/// Metrics on normal maps use peak 2 (component range [-1, 1]).
pub const NORMAL_PEAK: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// Weight of the unit-norm penalty.
    #[serde(default = "default_lambda")]
    pub lambda_unit: f64,
    pub seed: u64,
    #[serde(default = "default_harmonics")]
    pub harmonics: usize,
    pub model: ModelConfig,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_lambda() -> f64 {
    0.1
}
fn default_harmonics() -> usize {
    5
}

impl TrainConfig {
    /// Desk-scale defaults: Adam 1e-3, batch 8, 2000 steps.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            lambda_unit: default_lambda(),
            seed,
            harmonics: default_harmonics(),
            model: ModelConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Validation(
                "batch size and step count must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
            || self.lambda_unit < 0.0
        {
            return Err(Error::Validation("hyperparameters out of range".into()));
        }
        self.model.validate()?;
        if self.model.code_dim != 2 * self.harmonics + 2 {
            return Err(Error::Validation(format!(
                "model code_dim {} does not match 2*{}+2 encoding entries",
                self.model.code_dim, self.harmonics
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: train config: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub final_metrics: Option<EvalReport>,
    pub wall_clock_sec: f64,
    pub checkpoint_path: String,
}

/// Residual time uniform over the symmetric integer range [-T/2, T/2].
pub fn sample_delta_t(rng: &mut impl Rng, period: u32) -> i64 {
    let half = (period / 2) as i64;
    rng.random_range(-half..=half)
}

/// One training example: indices into the dataset plus the residual time.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem {
    pub seq: usize,
    pub t: u32,
    pub dt: i64,
}

impl BatchItem {
    pub fn target_frame(&self, period: u32) -> usize {
        (self.t as i64 + self.dt).rem_euclid(period as i64) as usize
    }
}

/// Draw a batch: sequence and anchor frame uniform, dt uniform symmetric,
/// target index wrapping modulo T.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<BatchItem>> {
    if dataset.sequences.is_empty() {
        return Err(Error::Validation("cannot sample from an empty dataset".into()));
    }
    let period = dataset.manifest.period;
    Ok((0..batch_size)
        .map(|_| BatchItem {
            seq: rng.random_range(0..dataset.sequences.len()),
            t: rng.random_range(0..period),
            dt: sample_delta_t(rng, period),
        })
        .collect())
}

/// Wire the training loss onto a graph: masked mean absolute error of the
/// raw prediction against the target plus lambda * mean((|pred| - 1)^2),
/// both inside the mask.
pub fn build_loss<T: Scalar>(
    g: &mut GraphBase<T>,
    pred: NodeId,
    target: NodeId,
    mask3: NodeId,
    mask1: NodeId,
    mask_count: usize,
    lambda: f64,
) -> Result<NodeId> {
    if mask_count == 0 {
        return Err(Error::Validation("loss mask is empty".into()));
    }
    let diff = g.sub(pred, target)?;
    let ad = g.abs(diff);
    let masked = g.mul(ad, mask3)?;
    let l1_sum = g.sum_all(masked);
    let l1 = g.scale(l1_sum, 1.0 / (3.0 * mask_count as f64));

    let sq = g.mul(pred, pred)?;
    let ssum = g.sum_channels(sq)?;
    let guarded = g.add_scalar(ssum, NORM_EPS);
    let norm = g.sqrt(guarded);
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.mul(dev, dev)?;
    let dev_masked = g.mul(dev2, mask1)?;
    let pen_sum = g.sum_all(dev_masked);
    let pen = g.scale(pen_sum, lambda / mask_count as f64);

    g.add(l1, pen)
}

/// Eager loss of a raw prediction tensor against a unit-normal target.
pub fn masked_loss(pred: &Tensor, target: &Tensor, mask: &Mask, lambda: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss operands disagree: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let m = mask.count_inside();
    if m == 0 {
        return Err(Error::Validation("loss mask is empty".into()));
    }
    let mut g = GraphBase::<f32>::new();
    let p = g.input(pred);
    let t = g.input(target);
    let m3 = g.input(&mask.to_tensor(3));
    let m1 = g.input(&mask.to_tensor1());
    let loss = build_loss(&mut g, p, t, m3, m1, m, lambda)?;
    Ok(g.value(loss).item() as f64)
}

struct SampleTensors {
    input: Tensor,
    target: Tensor,
    code: Tensor,
}

fn materialize(dataset: &Dataset, harmonics: usize, item: &BatchItem) -> Result<SampleTensors> {
    let period = dataset.manifest.period;
    let seq = &dataset.sequences[item.seq];
    let enc = EncodingConfig::new(period, harmonics)?;
    let code = build_code(item.dt as f64, &enc, &seq.wind)?;
    Ok(SampleTensors {
        input: seq.frames[item.t as usize].to_tensor(),
        target: seq.frames[item.target_frame(period)].to_tensor(),
        code: code.to_tensor(1),
    })
}

/// Forward + backward for one sample; returns (loss, gradients in flatten
/// order).
fn sample_grads(
    params: &ModelParameters,
    cfg: &TrainConfig,
    sample: &SampleTensors,
    mask3: &Tensor,
    mask1: &Tensor,
    mask_count: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = GraphBase::<f32>::new();
    let ids = register_params(&mut g, params);
    let input = g.input(&sample.input);
    let code = g.input(&sample.code);
    let target = g.input(&sample.target);
    let m3 = g.input(mask3);
    let m1 = g.input(mask1);
    let pred = build_forward(&mut g, &ids, &cfg.model, input, code)?;
    let loss = build_loss(&mut g, pred, target, m3, m1, mask_count, cfg.lambda_unit)?;
    let loss_value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grads = ids.flat().iter().map(|id| g.grad_tensor(*id)).collect();
    Ok((loss_value, grads))
}

/// Train on the dataset's training split, writing checkpoint, report and
/// loss curve under `out_dir`. Deterministic under a fixed seed. A non-finite
/// loss aborts with the last good parameters checkpointed.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.sequences.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let start = Instant::now();

    let mut params = ModelParameters::init(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut state = {
        let flat = params.flatten();
        let named: Vec<(&str, &Tensor)> = flat.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        AdamState::new(&named)
    };
    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.epsilon,
    };

    // per-sequence masks are fixed; precompute the tensor forms
    let masks: Vec<(Tensor, Tensor, usize)> = dataset
        .sequences
        .iter()
        .map(|s| (s.mask.to_tensor(3), s.mask.to_tensor1(), s.mask.count_inside()))
        .collect();

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for _step in 0..cfg.steps {
        let batch = sample_batch(dataset, cfg.batch_size, &mut rng)?;
        let samples: Vec<(SampleTensors, usize)> = batch
            .iter()
            .map(|item| Ok((materialize(dataset, cfg.harmonics, item)?, item.seq)))
            .collect::<Result<_>>()?;

        let results: Vec<Result<(f64, Vec<Tensor>)>> = samples
            .par_iter()
            .map(|(sample, seq)| {
                let (m3, m1, count) = &masks[*seq];
                sample_grads(&params, cfg, sample, m3, m1, *count)
            })
            .collect();

        let mut mean_loss = 0.0;
        let mut grad_acc: Option<Vec<Tensor>> = None;
        for r in results {
            let (loss, grads) = r?;
            mean_loss += loss;
            match &mut grad_acc {
                None => grad_acc = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += *gv;
                        }
                    }
                }
            }
        }
        mean_loss /= cfg.batch_size as f64;
        let mut grads = grad_acc.expect("non-empty batch");
        let inv_b = 1.0 / cfg.batch_size as f32;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv_b);
        }

        if !mean_loss.is_finite() {
            save_checkpoint(&params, &cfg.model, &ckpt_path)?;
            return Err(Error::Numerics(format!(
                "loss became non-finite at step {}; last good checkpoint written to {}",
                loss_curve.len(),
                ckpt_path.display()
            )));
        }

        {
            let mut flat = params.flatten_mut();
            let mut named: Vec<(&str, &mut Tensor)> = flat
                .iter_mut()
                .map(|(n, t)| (n.as_str(), &mut **t))
                .collect();
            if let Err(e) = adam_step(&mut named, &grads, &mut state, &adam_cfg) {
                drop(named);
                drop(flat);
                save_checkpoint(&params, &cfg.model, &ckpt_path)?;
                return Err(e);
            }
        }
        loss_curve.push(mean_loss);
    }

    save_checkpoint(&params, &cfg.model, &ckpt_path)?;
    let curve_path = out_dir.join("loss_curve.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i, l));
    }
    std::fs::write(&curve_path, csv).map_err(|e| Error::io(&curve_path, e))?;

    let report = TrainReport {
        loss_curve,
        final_metrics: None,
        wall_clock_sec: start.elapsed().as_secs_f64(),
        checkpoint_path: ckpt_path.display().to_string(),
    };
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report encode: {}", e)))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEval {
    pub id: usize,
    /// Mean |pred - gt| per normal component inside the mask.
    pub masked_mae: f64,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sequence: Vec<SequenceEval>,
    pub masked_mae: f64,
    pub metrics: AggregateMetrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,masked_mae,mae,mse,rmse,psnr,ssim\n");
        for e in &self.per_sequence {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.id,
                e.masked_mae,
                e.metrics.mae,
                e.metrics.mse,
                e.metrics.rmse,
                e.metrics.psnr,
                e.metrics.ssim
            ));
        }
        s.push_str(&format!(
            "aggregate,{},{},{},{},{},{}\n",
            self.masked_mae,
            self.metrics.mae,
            self.metrics.mse,
            self.metrics.rmse,
            self.metrics.psnr,
            self.metrics.ssim
        ));
        s
    }
}

fn eval_sequence(
    net: &CycleNet,
    harmonics: usize,
    period: u32,
    seq: &LoadedSequence,
) -> Result<SequenceEval> {
    let enc = EncodingConfig::new(period, harmonics)?;
    let anchor = &seq.frames[0];
    let frames: Vec<(usize, NormalMap)> = (0..period as usize)
        .into_par_iter()
        .map(|t| {
            let code = build_code(t as f64, &enc, &seq.wind)?;
            Ok((t, net.forward(anchor, &code)?))
        })
        .collect::<Result<_>>()?;

    let mask = &seq.mask;
    let inside = mask.count_inside().max(1);
    let mut masked_abs = 0.0f64;
    let mut frame_metrics = Vec::with_capacity(period as usize);
    for (t, pred) in &frames {
        let gt = &seq.frames[*t];
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    let p = pred.get(x, y);
                    let g = gt.get(x, y);
                    for c in 0..3 {
                        masked_abs += (p[c] - g[c]).abs() as f64;
                    }
                }
            }
        }
        let pm = pixel_metrics(pred.data(), gt.data(), NORMAL_PEAK)?;
        let s = ssim(&pred.planes(), &gt.planes(), pred.width, pred.height, NORMAL_PEAK)?;
        frame_metrics.push(FrameMetrics {
            frame: *t,
            mae: pm.mae,
            mse: pm.mse,
            rmse: pm.rmse,
            psnr: pm.psnr,
            ssim: s,
        });
    }
    let report = MetricReport::from_frames(frame_metrics);
    Ok(SequenceEval {
        id: seq.id,
        masked_mae: masked_abs / (3.0 * inside as f64 * period as f64),
        metrics: report.aggregate,
    })
}

/// Anchor-frame evaluation over a split: frame t is predicted from frame 0
/// with residual time t, compared to ground truth in normal space.
pub fn evaluate(net: &CycleNet, dataset: &Dataset, split: Split, harmonics: usize) -> Result<EvalReport> {
    let period = dataset.manifest.period;
    let seqs: Vec<&LoadedSequence> = dataset
        .sequences
        .iter()
        .filter(|s| s.split == split)
        .collect();
    if seqs.is_empty() {
        return Err(Error::Validation(format!("no sequences in split {:?}", split)));
    }
    let per_sequence: Vec<SequenceEval> = seqs
        .iter()
        .map(|s| eval_sequence(net, harmonics, period, s))
        .collect::<Result<_>>()?;
    let n = per_sequence.len() as f64;
    let masked_mae = per_sequence.iter().map(|s| s.masked_mae).sum::<f64>() / n;
    let mut agg = AggregateMetrics::default();
    for s in &per_sequence {
        agg.mae += s.metrics.mae;
        agg.mse += s.metrics.mse;
        agg.rmse += s.metrics.rmse;
        agg.psnr += s.metrics.psnr;
        agg.ssim += s.metrics.ssim;
    }
    agg.mae /= n;
    agg.mse /= n;
    agg.rmse /= n;
    agg.psnr /= n;
    agg.ssim /= n;
    Ok(EvalReport {
        per_sequence,
        masked_mae,
        metrics: agg,
    })
}

/// Result of the end-to-end finite-difference check on the tiny model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub rel_error_f32: f64,
    pub rel_error_f64: f64,
    pub params_checked: usize,
}

/// The fixed tensors of one loss evaluation, in the check's element type.
struct LossInputs<T: Scalar> {
    input: TensorBase<T>,
    code: TensorBase<T>,
    target: TensorBase<T>,
    mask3: TensorBase<T>,
    mask1: TensorBase<T>,
    mask_count: usize,
    lambda: f64,
}

fn full_loss_value<T: Scalar>(
    params: &ModelParametersBase<T>,
    model: &ModelConfig,
    inputs: &LossInputs<T>,
) -> f64 {
    let mut g = GraphBase::<T>::new();
    let ids = register_params(&mut g, params);
    let i = g.input(&inputs.input);
    let c = g.input(&inputs.code);
    let t = g.input(&inputs.target);
    let m3 = g.input(&inputs.mask3);
    let m1 = g.input(&inputs.mask1);
    let pred = build_forward(&mut g, &ids, model, i, c).expect("forward");
    let loss = build_loss(&mut g, pred, t, m3, m1, inputs.mask_count, inputs.lambda).expect("loss");
    g.value(loss).item().to_f64()
}

fn gradient_check_mode<T: Scalar>(
    params: &ModelParametersBase<T>,
    model: &ModelConfig,
    sample: &SampleTensors,
    mask: &Mask,
    lambda: f64,
    h: f64,
) -> (f64, usize) {
    let inputs = LossInputs::<T> {
        input: sample.input.cast(),
        code: sample.code.cast(),
        target: sample.target.cast(),
        mask3: mask.to_tensor(3).cast(),
        mask1: mask.to_tensor1().cast(),
        mask_count: mask.count_inside(),
        lambda,
    };

    // analytic gradients
    let mut g = GraphBase::<T>::new();
    let ids = register_params(&mut g, params);
    let i = g.input(&inputs.input);
    let c = g.input(&inputs.code);
    let t = g.input(&inputs.target);
    let m3 = g.input(&inputs.mask3);
    let m1 = g.input(&inputs.mask1);
    let pred = build_forward(&mut g, &ids, model, i, c).expect("forward");
    let loss =
        build_loss(&mut g, pred, t, m3, m1, inputs.mask_count, inputs.lambda).expect("loss");
    g.backward(loss).expect("backward");
    let analytic: Vec<f64> = ids
        .flat()
        .iter()
        .flat_map(|id| {
            g.grad_tensor(*id)
                .data()
                .iter()
                .map(|v| v.to_f64())
                .collect::<Vec<_>>()
        })
        .collect();

    // numeric gradients, one flattened parameter tensor at a time
    let mut work = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let count = work.flatten().len();
    for slot in 0..count {
        // take the tensor out to appease the borrow checker, then put it back
        let mut theta = {
            let mut flat = work.flatten_mut();
            std::mem::replace(flat[slot].1, TensorBase::zeros(vec![0]))
        };
        let grads = finite_difference(&mut theta, h, |t| {
            let mut probe = work.clone();
            {
                let mut flat = probe.flatten_mut();
                *flat[slot].1 = t.clone();
            }
            full_loss_value(&probe, model, &inputs)
        });
        numeric.extend(grads);
        let mut flat = work.flatten_mut();
        *flat[slot].1 = theta;
    }
    (max_scaled_error(&analytic, &numeric), analytic.len())
}

/// Full-pipeline gradient check on the tiny model (2 scales, 4 channels,
/// 8x8): analytic loss gradient vs central finite differences, in 32-bit
/// mode and in the 64-bit shadow mode.
pub fn gradient_check_tiny(seed: u64) -> Result<GradCheckReport> {
    let model = ModelConfig::tiny();
    let params = ModelParameters::init(&model, seed)?;
    // small synthetic sample with real wrinkle structure
    let wind = crate::encoding::WindSpec::new(0.8, -0.6).unwrap();
    let mut mask = Mask::new(8, 8, true);
    mask.set(0, 0, false);
    mask.set(7, 7, false);
    let seq = crate::dataset::generate_sequence(seed ^ 0xABCD, 8, 8, 8, wind, mask.clone())?;
    let enc = EncodingConfig::new(8, 5)?;
    let code = build_code(3.0, &enc, &wind)?;
    let sample = SampleTensors {
        input: seq.frames[1].to_tensor(),
        target: seq.frames[4].to_tensor(),
        code: code.to_tensor(1),
    };
    let (err32, n) = gradient_check_mode::<f32>(&params, &model, &sample, &mask, 0.1, 1e-3);
    let params64: ModelParametersBase<f64> = params.cast();
    let (err64, _) = gradient_check_mode::<f64>(&params64, &model, &sample, &mask, 0.1, 1e-5);
    Ok(GradCheckReport {
        rel_error_f32: err32,
        rel_error_f64: err64,
        params_checked: n,
    })
}

/// Convenience: load a checkpoint into a net.
pub fn net_from_checkpoint(path: &Path) -> Result<CycleNet> {
    let (params, config) = crate::model::load_checkpoint(path)?;
    Ok(CycleNet { config, params })
}

/// Paths produced by a training run.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.ckpt")
}

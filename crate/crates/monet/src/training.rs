//! Loss functions (margin ranking, flexible margin ranking, binary
//! cross-entropy), the two-phase schedule (triplet pretraining followed by
//! end-to-end fine-tuning), and training-loop orchestration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MonetError, Result};
use crate::eval::{evaluate_pixel, Mask};
use crate::network::{
    binarize, detector_pair_backward, encode_with_tape, encoder_backward, AblationMode, Model,
    ModelScorer, OverlapScorer,
};
use crate::pyramid::PatchId;
use crate::search::{
    pipeline_backward, run_pipeline_frozen, run_pipeline_with_tape, CandidateSet, PairGrad,
    PipelineOutput, PipelineTape,
};
use crate::synth::{sample_triplets, SyntheticSample};
use crate::tensor::{adam_step, AdamState, Tensor};

/// BCE probability clamp.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    Regular,
    Flexible,
}

fn default_margin() -> f64 {
    0.5
}
fn default_pretrain_epochs() -> usize {
    25
}
fn default_e2e_epochs() -> usize {
    50
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    1
}
fn default_seed() -> u64 {
    7
}
fn default_weight() -> f64 {
    1.0
}
fn default_train_pairs() -> usize {
    64
}
fn default_val_pairs() -> usize {
    12
}
fn default_triplets_per_scale() -> usize {
    2000
}
fn default_e2e_triplets_per_scale() -> usize {
    8
}
fn default_margin_mode() -> MarginMode {
    MarginMode::Regular
}

/// Training hyper-parameters and data-budget knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fixed margin for regular margin-ranking mode.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_margin_mode")]
    pub margin_mode: MarginMode,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_e2e_epochs")]
    pub e2e_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Samples accumulated per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_weight")]
    pub bce_weight: f64,
    #[serde(default = "default_weight")]
    pub rank_weight: f64,
    /// Manipulated pairs in the training stream.
    #[serde(default = "default_train_pairs")]
    pub train_pairs: usize,
    #[serde(default = "default_val_pairs")]
    pub val_pairs: usize,
    /// Pretraining triplet pool size, per scale, across the whole stream.
    #[serde(default = "default_triplets_per_scale")]
    pub triplets_per_scale: usize,
    /// Fresh triplets per scale per sample in the end-to-end phase.
    #[serde(default = "default_e2e_triplets_per_scale")]
    pub e2e_triplets_per_scale: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(MonetError::InvalidConfig(format!(
                "learning rate must be nonnegative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(MonetError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor/positive/negative patch triple with its true pixel overlaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub scale: u32,
    pub anchor: PatchId,
    pub positive: PatchId,
    pub negative: PatchId,
    pub o_plus: u64,
    pub o_minus: u64,
}

impl Triplet {
    pub fn new(
        scale: u32,
        anchor: PatchId,
        positive: PatchId,
        negative: PatchId,
        o_plus: u64,
        o_minus: u64,
    ) -> Result<Self> {
        if o_plus <= o_minus {
            return Err(MonetError::InvalidTriplet { o_plus, o_minus });
        }
        Ok(Self {
            scale,
            anchor,
            positive,
            negative,
            o_plus,
            o_minus,
        })
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Margin ranking loss `max(0, (x2 - x1) + m)`.
pub fn margin_rank_loss(x1: f64, x2: f64, margin: f64) -> f64 {
    ((x2 - x1) + margin).max(0.0)
}

/// Subgradient of the ranking loss in `(x1, x2)`; zero in the flat region.
pub fn margin_rank_grad(x1: f64, x2: f64, margin: f64) -> (f64, f64) {
    if (x2 - x1) + margin > 0.0 {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Flexible margin `(o+ - o-) / d^2`, in `(0, 1]`.
pub fn flexible_margin(o_plus: u64, o_minus: u64, patch_dim: usize) -> Result<f64> {
    let d2 = (patch_dim * patch_dim) as u64;
    if o_plus <= o_minus || o_plus > d2 {
        return Err(MonetError::InvalidTriplet { o_plus, o_minus });
    }
    Ok((o_plus - o_minus) as f64 / d2 as f64)
}

/// Ranking loss with the per-triplet flexible margin.
pub fn flexible_margin_loss(
    x1: f64,
    x2: f64,
    o_plus: u64,
    o_minus: u64,
    patch_dim: usize,
) -> Result<f64> {
    Ok(margin_rank_loss(x1, x2, flexible_margin(o_plus, o_minus, patch_dim)?))
}

/// The margin a triplet trains against under the configured mode.
pub fn triplet_margin(tc: &TrainConfig, t: &Triplet, patch_dim: usize) -> Result<f64> {
    match tc.margin_mode {
        MarginMode::Regular => Ok(tc.margin),
        MarginMode::Flexible => flexible_margin(t.o_plus, t.o_minus, patch_dim),
    }
}

/// Mean binary cross-entropy over both masks' pixels, probabilities clamped
/// to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(prob1: &Tensor, prob2: &Tensor, gt1: &Mask, gt2: &Mask) -> Result<f64> {
    let n1 = gt1.width * gt1.height;
    let n2 = gt2.width * gt2.height;
    if prob1.numel() != n1 || prob2.numel() != n2 {
        return Err(MonetError::ShapeMismatch {
            layer: "bce_loss".to_string(),
            expected: format!("{n1} + {n2} probabilities"),
            got: format!("{} + {}", prob1.numel(), prob2.numel()),
        });
    }
    let total = (n1 + n2) as f64;
    let mut sum = 0.0;
    for (probs, gt) in [(prob1, gt1), (prob2, gt2)] {
        for (&p, &y) in probs.data.iter().zip(&gt.data) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            sum -= if y { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(sum / total)
}

/// Gradient of [`bce_loss`] in the two probability maps, stacked `[2, n, n]`
/// and scaled by `weight`. Zero where the clamp is active.
pub fn bce_grad(
    prob1: &Tensor,
    prob2: &Tensor,
    gt1: &Mask,
    gt2: &Mask,
    weight: f64,
) -> Result<Tensor> {
    let n1 = gt1.width * gt1.height;
    let n2 = gt2.width * gt2.height;
    let total = (n1 + n2) as f64;
    let mut data = Vec::with_capacity(n1 + n2);
    for (probs, gt) in [(prob1, gt1), (prob2, gt2)] {
        for (&p, &y) in probs.data.iter().zip(&gt.data) {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                data.push(0.0);
                continue;
            }
            let yv = if y { 1.0 } else { 0.0 };
            data.push(weight * (p - yv) / (p * (1.0 - p)) / total);
        }
    }
    Tensor::new(vec![2, gt1.height, gt1.width], data)
}

// ---------------------------------------------------------------------------
// Optimizer over all model parameters
// ---------------------------------------------------------------------------

/// One Adam state per parameter block, in block order.
pub struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(model: &Model, lr: f64) -> Self {
        let states = model
            .param_blocks()
            .iter()
            .map(|(_, t)| AdamState::new(t.numel(), lr))
            .collect();
        Self { states }
    }

    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        for ((name, tensor), state) in model.param_blocks_mut().into_iter().zip(&mut self.states) {
            let Tensor { data, grad, .. } = tensor;
            adam_step(state, data, grad, &name)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// A stream entry: the sample plus (for manipulated pairs) its fixed
/// pretraining triplet pool.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample: SyntheticSample,
    pub triplets: Vec<Triplet>,
}

/// One metrics row. `val_rank_loss` is tracked in memory for the pretrain
/// phase; the CSV log carries the documented columns only.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: &'static str,
    pub rank_loss: f64,
    pub bce_loss: Option<f64>,
    pub val_pixel_mcc: Option<f64>,
    pub val_rank_loss: Option<f64>,
}

/// CSV with one row per epoch: `epoch,phase,rank_loss,bce_loss,val_pixel_mcc`.
pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,phase,rank_loss,bce_loss,val_pixel_mcc\n");
    for r in rows {
        let bce = r.bce_loss.map(|v| v.to_string()).unwrap_or_default();
        let mcc = r.val_pixel_mcc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.phase, r.rank_loss, bce, mcc));
    }
    out
}

fn pair_score(model: &Model, feats1: &[Tensor], feats2: &[Tensor], scale: u32, a: &PatchId, b: &PatchId) -> f64 {
    ModelScorer {
        model,
        feats1,
        feats2,
    }
    .score(scale, a, b)
}

/// Mean ranking loss of a triplet set under the current model, forward only.
pub fn rank_loss_on_samples(model: &Model, samples: &[TrainSample], tc: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for entry in samples {
        if entry.triplets.is_empty() {
            continue;
        }
        let f1 = crate::network::encode(model, &entry.sample.image1)?;
        let f2 = crate::network::encode(model, &entry.sample.image2)?;
        for t in &entry.triplets {
            let x1 = pair_score(model, &f1, &f2, t.scale, &t.anchor, &t.positive);
            let x2 = pair_score(model, &f1, &f2, t.scale, &t.anchor, &t.negative);
            let m = triplet_margin(tc, t, model.cfg.patch_dim(t.scale))?;
            total += margin_rank_loss(x1, x2, m);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MonetError::EmptyStream("triplet"));
    }
    Ok(total / count as f64)
}

/// Pretrains the encoder and overlap detectors jointly on the samples'
/// triplet pools with the margin ranking loss.
pub fn pretrain(
    model: &mut Model,
    train: &[TrainSample],
    val: &[TrainSample],
    tc: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    tc.validate()?;
    if train.iter().all(|s| s.triplets.is_empty()) {
        return Err(MonetError::EmptyStream("triplet"));
    }
    for s in model.cfg.min_scale..=model.cfg.top_scale {
        let have = train
            .iter()
            .flat_map(|e| &e.triplets)
            .any(|t| t.scale == s);
        if !have {
            return Err(MonetError::EmptyStream("per-scale triplet"));
        }
    }
    let mut optimizer = Optimizer::new(model, tc.lr);
    let mut metrics = Vec::with_capacity(tc.pretrain_epochs);
    for epoch in 1..=tc.pretrain_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let mut in_batch = 0usize;
        model.zero_grads();
        for entry in train {
            if entry.triplets.is_empty() {
                continue;
            }
            let tape1 = encode_with_tape(model, &entry.sample.image1)?;
            let tape2 = encode_with_tape(model, &entry.sample.image2)?;
            let mut d_f1: Vec<Tensor> =
                tape1.feats.iter().map(|f| Tensor::zeros(f.shape.clone())).collect();
            let mut d_f2: Vec<Tensor> =
                tape2.feats.iter().map(|f| Tensor::zeros(f.shape.clone())).collect();
            let w = 1.0 / entry.triplets.len() as f64;
            for t in &entry.triplets {
                let x1 = pair_score(model, &tape1.feats, &tape2.feats, t.scale, &t.anchor, &t.positive);
                let x2 = pair_score(model, &tape1.feats, &tape2.feats, t.scale, &t.anchor, &t.negative);
                let m = triplet_margin(tc, t, model.cfg.patch_dim(t.scale))?;
                epoch_loss += margin_rank_loss(x1, x2, m);
                epoch_count += 1;
                let (d1, d2) = margin_rank_grad(x1, x2, m);
                if d1 != 0.0 {
                    detector_pair_backward(
                        model, &tape1.feats, &tape2.feats, t.scale, &t.anchor, &t.positive,
                        w * d1, &mut d_f1, &mut d_f2,
                    )?;
                    detector_pair_backward(
                        model, &tape1.feats, &tape2.feats, t.scale, &t.anchor, &t.negative,
                        w * d2, &mut d_f1, &mut d_f2,
                    )?;
                }
            }
            encoder_backward(model, &tape1, &d_f1)?;
            encoder_backward(model, &tape2, &d_f2)?;
            in_batch += 1;
            if in_batch == tc.batch_size {
                optimizer.step(model)?;
                model.zero_grads();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            optimizer.step(model)?;
            model.zero_grads();
        }
        let val_rank = if val.is_empty() {
            None
        } else {
            Some(rank_loss_on_samples(model, val, tc)?)
        };
        metrics.push(EpochMetrics {
            epoch,
            phase: "pretrain",
            rank_loss: epoch_loss / epoch_count.max(1) as f64,
            bce_loss: None,
            val_pixel_mcc: None,
            val_rank_loss: val_rank,
        });
    }
    Ok(metrics)
}

/// Draws the fresh per-epoch ranking triplets for one training sample.
fn fresh_triplets(
    model: &Model,
    entry: &TrainSample,
    tc: &TrainConfig,
    epoch: usize,
    sample_idx: usize,
) -> Result<Vec<Triplet>> {
    let template = match &entry.sample.template {
        Some(t) => t,
        None => return Ok(Vec::new()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        tc.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (sample_idx as u64) << 17,
    );
    let mut out = Vec::new();
    for s in model.cfg.min_scale..=model.cfg.top_scale {
        out.extend(sample_triplets(
            &model.cfg,
            template,
            s,
            tc.e2e_triplets_per_scale,
            &mut rng,
        )?);
    }
    Ok(out)
}

/// Shared loss core for one pipeline run: BCE on the masks plus the mean
/// ranking loss on the given triplets. Returns the loss pieces, the mask
/// gradient and the per-pair score gradients (scaled by the loss weights).
fn sample_loss(
    model: &Model,
    output: &PipelineOutput,
    tape: &PipelineTape,
    sample: &SyntheticSample,
    triplets: &[Triplet],
    tc: &TrainConfig,
) -> Result<(f64, f64, Tensor, Vec<PairGrad>)> {
    let bce = bce_loss(
        &output.mask1_prob,
        &output.mask2_prob,
        &sample.gt_mask1,
        &sample.gt_mask2,
    )?;
    let d_masks = bce_grad(
        &output.mask1_prob,
        &output.mask2_prob,
        &sample.gt_mask1,
        &sample.gt_mask2,
        tc.bce_weight,
    )?;
    let mut rank = 0.0;
    let mut pair_grads = Vec::new();
    if !triplets.is_empty() {
        let w = tc.rank_weight / triplets.len() as f64;
        for t in triplets {
            let x1 = pair_score(model, &tape.enc1.feats, &tape.enc2.feats, t.scale, &t.anchor, &t.positive);
            let x2 = pair_score(model, &tape.enc1.feats, &tape.enc2.feats, t.scale, &t.anchor, &t.negative);
            let m = triplet_margin(tc, t, model.cfg.patch_dim(t.scale))?;
            rank += margin_rank_loss(x1, x2, m);
            let (d1, d2) = margin_rank_grad(x1, x2, m);
            if d1 != 0.0 {
                pair_grads.push(PairGrad { a: t.anchor, b: t.positive, upstream: w * d1 });
                pair_grads.push(PairGrad { a: t.anchor, b: t.negative, upstream: w * d2 });
            }
        }
        rank /= triplets.len() as f64;
    }
    Ok((bce, rank, d_masks, pair_grads))
}

/// Validation pixel MCC over a sample set with the current model.
pub fn validation_pixel_mcc(model: &Model, val: &[TrainSample], threshold: f64) -> Result<f64> {
    let mut preds: Vec<(Mask, Mask)> = Vec::new();
    for entry in val {
        let out = crate::search::run_pipeline(model, &entry.sample.image1, &entry.sample.image2)?;
        preds.push((
            binarize(&out.mask1_prob, threshold),
            binarize(&out.mask2_prob, threshold),
        ));
    }
    let mut pairs = Vec::new();
    for (entry, (p1, p2)) in val.iter().zip(&preds) {
        pairs.push((p1, &entry.sample.gt_mask1));
        pairs.push((p2, &entry.sample.gt_mask2));
    }
    let (_, mcc) = evaluate_pixel(pairs)?;
    Ok(mcc)
}

/// Trains end-to-end: BCE on the mask outputs plus the margin ranking loss
/// on freshly sampled triplets from each manipulated pair's template.
pub fn train_end_to_end(
    model: &mut Model,
    train: &[TrainSample],
    val: &[TrainSample],
    tc: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    tc.validate()?;
    if train.is_empty() {
        return Err(MonetError::EmptyStream("training sample"));
    }
    let mut optimizer = Optimizer::new(model, tc.lr);
    let mut metrics = Vec::with_capacity(tc.e2e_epochs);
    for epoch in 1..=tc.e2e_epochs {
        let mut bce_sum = 0.0;
        let mut rank_sum = 0.0;
        let mut rank_batches = 0usize;
        let mut in_batch = 0usize;
        model.zero_grads();
        for (i, entry) in train.iter().enumerate() {
            let (output, tape) =
                run_pipeline_with_tape(model, &entry.sample.image1, &entry.sample.image2)?;
            let triplets = fresh_triplets(model, entry, tc, epoch, i)?;
            let (bce, rank, d_masks, pair_grads) =
                sample_loss(model, &output, &tape, &entry.sample, &triplets, tc)?;
            bce_sum += bce;
            if !triplets.is_empty() {
                rank_sum += rank;
                rank_batches += 1;
            }
            pipeline_backward(model, &output, &tape, &d_masks, &pair_grads)?;
            in_batch += 1;
            if in_batch == tc.batch_size {
                optimizer.step(model)?;
                model.zero_grads();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            optimizer.step(model)?;
            model.zero_grads();
        }
        let val_mcc = if val.is_empty() {
            None
        } else {
            Some(validation_pixel_mcc(model, val, 0.5)?)
        };
        metrics.push(EpochMetrics {
            epoch,
            phase: "e2e",
            rank_loss: rank_sum / rank_batches.max(1) as f64,
            bce_loss: Some(bce_sum / train.len() as f64),
            val_pixel_mcc: val_mcc,
            val_rank_loss: None,
        });
    }
    Ok(metrics)
}

/// Total loss of one sample over frozen candidate sets, forward only.
/// The gradient-check harness perturbs parameters around this.
pub fn frozen_loss(
    model: &Model,
    sample: &SyntheticSample,
    candidates: &[CandidateSet],
    triplets: &[Triplet],
    tc: &TrainConfig,
) -> Result<f64> {
    let (output, tape) = run_pipeline_frozen(model, &sample.image1, &sample.image2, candidates)?;
    let (bce, rank, _, _) = sample_loss(model, &output, &tape, sample, triplets, tc)?;
    Ok(tc.bce_weight * bce + tc.rank_weight * rank)
}

/// Same loss with a backward pass; parameter gradients accumulate into the
/// model. Returns the total loss.
pub fn frozen_loss_and_grad(
    model: &mut Model,
    sample: &SyntheticSample,
    candidates: &[CandidateSet],
    triplets: &[Triplet],
    tc: &TrainConfig,
) -> Result<f64> {
    let (output, tape) = run_pipeline_frozen(model, &sample.image1, &sample.image2, candidates)?;
    let (bce, rank, d_masks, pair_grads) =
        sample_loss(model, &output, &tape, sample, triplets, tc)?;
    pipeline_backward(model, &output, &tape, &d_masks, &pair_grads)?;
    Ok(tc.bce_weight * bce + tc.rank_weight * rank)
}

/// Builds a deterministic training stream: manipulated pairs from the given
/// templates over procedural base images, with fixed triplet pools, plus
/// `negatives` untouched pairs.
pub fn build_stream(
    model_cfg: &crate::pyramid::ScaleConfig,
    templates: &[crate::synth::AnnotationTemplate],
    positives: usize,
    negatives: usize,
    triplets_per_scale_total: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if positives > 0 && templates.is_empty() {
        return Err(MonetError::EmptyStream("template"));
    }
    let n = model_cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives + negatives);
    let per_sample = if positives > 0 {
        (triplets_per_scale_total / positives).max(1)
    } else {
        0
    };
    for i in 0..positives {
        let template = &templates[i % templates.len()];
        let a = crate::synth::procedural_image(n, &mut rng);
        let b = crate::synth::procedural_image(n, &mut rng);
        let sample = crate::synth::apply_template(model_cfg, template, &a, &b)?;
        let mut triplets = Vec::new();
        for s in model_cfg.min_scale..=model_cfg.top_scale {
            triplets.extend(sample_triplets(model_cfg, template, s, per_sample, &mut rng)?);
        }
        out.push(TrainSample { sample, triplets });
    }
    for _ in 0..negatives {
        let a = crate::synth::procedural_image(n, &mut rng);
        let b = crate::synth::procedural_image(n, &mut rng);
        out.push(TrainSample {
            sample: crate::synth::make_negative_sample(&a, &b),
            triplets: Vec::new(),
        });
    }
    Ok(out)
}

/// Held-out detector score means over full-overlap positives and
/// zero-overlap negatives, pooled across scales. Only triplets with
/// `o+ = d^2` and `o- = 0` contribute.
pub fn heldout_score_gap(model: &Model, samples: &[TrainSample]) -> Result<(f64, f64)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for entry in samples {
        if entry.triplets.is_empty() {
            continue;
        }
        let f1 = crate::network::encode(model, &entry.sample.image1)?;
        let f2 = crate::network::encode(model, &entry.sample.image2)?;
        for t in &entry.triplets {
            let d = model.cfg.patch_dim(t.scale) as u64;
            if t.o_plus == d * d {
                pos.push(pair_score(model, &f1, &f2, t.scale, &t.anchor, &t.positive));
            }
            if t.o_minus == 0 {
                neg.push(pair_score(model, &f1, &f2, t.scale, &t.anchor, &t.negative));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(MonetError::EmptyStream("held-out triplet"));
    }
    Ok((
        pos.iter().sum::<f64>() / pos.len() as f64,
        neg.iter().sum::<f64>() / neg.len() as f64,
    ))
}

/// End-to-end ablation comparison entry point: the full two-phase schedule
/// for one variant, returning the trained model and its metrics.
pub fn train_variant(
    cfg: &crate::pyramid::ScaleConfig,
    mode: AblationMode,
    templates: &[crate::synth::AnnotationTemplate],
    tc: &TrainConfig,
) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut model = Model::new(cfg, mode, tc.seed)?;
    let train = build_stream(
        cfg,
        templates,
        tc.train_pairs / 2,
        tc.train_pairs - tc.train_pairs / 2,
        tc.triplets_per_scale,
        tc.seed.wrapping_add(1),
    )?;
    let val = build_stream(
        cfg,
        templates,
        tc.val_pairs / 2,
        tc.val_pairs - tc.val_pairs / 2,
        tc.triplets_per_scale / 4,
        tc.seed.wrapping_add(2),
    )?;
    let mut metrics = pretrain(&mut model, &train, &val, tc)?;
    metrics.extend(train_end_to_end(&mut model, &train, &val, tc)?);
    Ok((model, metrics))
}

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batches::{balanced_batches, shuffled_batches, BatchPlan};
use super::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use super::regularizer::{
    batch_sum_l1, equi_output_penalty, project_columns, shadow_gradient, RegularizerMode, TauSource,
};
use crate::error::{Error, Result};
use crate::evaluation::ConfusionMatrix;
use crate::features::FeatureBlock;
use crate::model::{argmax, average_posteriors, Classifier, Stage};
use crate::numerics::Tensor;
use crate::par::Execution;

pub const CLASSIFY_WEIGHT: &str = "classify.weight";
pub const CLASSIFY_BIAS: &str = "classify.bias";
const EMBED_WEIGHT: &str = "embed.weight";
const EMBED_BIAS: &str = "embed.bias";

/// Parameters whose joint scaling by `k` scales every embedding by `k`.
/// `measured` sets the norm; `scaled` also holds the embedding bias.
struct ScaleGroup {
    measured: Vec<usize>,
    scaled: Vec<usize>,
    norm: f64,
}

impl ScaleGroup {
    fn new(model: &Classifier, measured: &[&str]) -> Option<Self> {
        let p = model.params();
        let measured: Vec<usize> = measured.iter().map(|n| p.index_of(n)).collect::<Option<_>>()?;
        let bias = p.index_of(EMBED_BIAS)?;
        let mut scaled = measured.clone();
        if !scaled.contains(&bias) {
            scaled.push(bias);
        }
        let norm = Self::norm_of(p.tensors(), &measured);
        (norm > 0.0).then_some(ScaleGroup { measured, scaled, norm })
    }

    fn norm_of(tensors: &[Tensor], idx: &[usize]) -> f64 {
        idx.iter().flat_map(|&i| tensors[i].data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales the group back to its initial norm; returns the factor.
    fn restore(&self, tensors: &mut [Tensor]) -> f64 {
        let n = Self::norm_of(tensors, &self.measured);
        if !(n > 0.0 && n.is_finite()) {
            return 1.0;
        }
        let k = self.norm / n;
        for &i in &self.scaled {
            tensors[i].data_mut().iter_mut().for_each(|x| *x *= k);
        }
        k
    }
}

fn scale_groups(model: &Classifier) -> Vec<ScaleGroup> {
    // the embedding layer itself, and for speaker attention the value
    // vectors, since the attention output is linear in them
    [vec![EMBED_WEIGHT, EMBED_BIAS], vec!["ssa.w_v_em", "ssa.w_v_sp"]]
        .iter()
        .filter_map(|names| ScaleGroup::new(model, names))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub regularize: bool,
    pub regularizer: RegularizerMode,
    pub tau_source: TauSource,
    /// Emotion-balanced batches; otherwise plain shuffling.
    pub balanced: bool,
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Defaults for a stage; the constraint is on for emotions only.
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig {
            stage,
            batch_size: 40,
            optimizer: OptimizerConfig::default(),
            max_epochs: 300,
            patience: Some(30),
            seed: 0,
            regularize: stage == Stage::Em,
            regularizer: RegularizerMode::Reparameterized,
            tau_source: TauSource::CurrentBatch,
            balanced: true,
            clip_norm: Some(5.0),
        }
    }
}

/// Inputs, labels and utterance grouping of a set of segments.
#[derive(Clone, Debug, Default)]
pub struct SegmentSet {
    pub inputs: Vec<Tensor>,
    /// Classifier targets.
    pub labels: Vec<usize>,
    /// Emotion index of each segment; batches are balanced over these.
    pub emotions: Vec<usize>,
    pub emotion_names: Vec<String>,
    /// Utterance index of each segment; segments of one utterance share a label.
    pub utterances: Vec<usize>,
    /// Frozen speaker-tower states per segment, when speaker attention is used.
    pub speaker_states: Option<Vec<Tensor>>,
}

impl SegmentSet {
    /// Groups blocks by utterance id (in order of first appearance);
    /// `label` maps a block to its target class.
    pub fn from_blocks<'a>(
        blocks: impl IntoIterator<Item = &'a FeatureBlock>,
        emotion_names: &[String],
        label: impl Fn(&FeatureBlock) -> Result<usize>,
    ) -> Result<Self> {
        let mut set = SegmentSet {
            emotion_names: emotion_names.to_vec(),
            ..SegmentSet::default()
        };
        let mut ids: Vec<&str> = Vec::new();
        for b in blocks {
            let u = match ids.iter().position(|&id| id == b.utterance_id) {
                Some(u) => u,
                None => {
                    ids.push(&b.utterance_id);
                    ids.len() - 1
                }
            };
            set.inputs.push(b.data.clone());
            set.labels.push(label(b)?);
            set.emotions.push(emotion_index(emotion_names, &b.emotion_label)?);
            set.utterances.push(u);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn utterance_count(&self) -> usize {
        self.utterances.iter().max().map_or(0, |m| m + 1)
    }

    /// Computes speaker-tower states for every segment. The speaker
    /// classifier must be frozen.
    pub fn attach_speaker_states(&mut self, sp: &Classifier, exec: Execution) -> Result<()> {
        if !sp.is_frozen() {
            return Err(Error::invalid("the speaker classifier must be frozen before emotion training"));
        }
        let states = exec.map(&self.inputs, |x| sp.encode(x));
        self.speaker_states = Some(states.into_iter().collect::<Result<_>>()?);
        Ok(())
    }

    fn h_sp(&self, i: usize) -> Option<&Tensor> {
        self.speaker_states.as_ref().map(|s| &s[i])
    }
}

pub fn emotion_index(names: &[String], label: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == label)
        .ok_or_else(|| Error::invalid(format!("emotion `{label}` is not one of {names:?}")))
}

/// Per-utterance outputs of a classifier over a segment set.
#[derive(Clone, Debug)]
pub struct Scored {
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Averaged segment posteriors.
    pub posteriors: Vec<Vec<f64>>,
    /// Mean segment embedding.
    pub embeddings: Vec<Vec<f64>>,
}

/// Scores every utterance by averaging its segment posteriors.
pub fn score(model: &Classifier, set: &SegmentSet, exec: Execution) -> Result<Scored> {
    let preds = exec.map_indexed(set.len(), |i| model.predict(&set.inputs[i], set.h_sp(i)));
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let n = set.utterance_count();
    let mut post = vec![Vec::new(); n];
    let mut emb = vec![Vec::new(); n];
    let mut truth = vec![0; n];
    for (i, p) in preds.into_iter().enumerate() {
        let u = set.utterances[i];
        truth[u] = set.labels[i];
        post[u].push(p.posteriors);
        emb[u].push(p.embedding);
    }
    let posteriors: Vec<Vec<f64>> = post.iter().map(|p| average_posteriors(p)).collect();
    Ok(Scored {
        truth,
        predicted: posteriors.iter().map(|p| argmax(p)).collect(),
        posteriors,
        embeddings: emb.iter().map(|e| average_posteriors(e)).collect(),
    })
}

pub fn confusion(model: &Classifier, set: &SegmentSet, exec: Execution) -> Result<ConfusionMatrix> {
    let s = score(model, set, exec)?;
    ConfusionMatrix::from_pairs(model.spec().classes, &s.truth, &s.predicted)
}

/// Recall averaged over the classes present in `set`.
fn validation_uar(model: &Classifier, set: &SegmentSet, exec: Execution) -> Result<f64> {
    let cm = confusion(model, set, exec)?;
    match cm.uar() {
        Ok(u) => Ok(u),
        Err(_) => {
            log::warn!("validation set lacks some classes; averaging recall over present classes");
            cm.uar_present().ok_or_else(|| Error::invalid("validation set is empty"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_uar: f64,
    pub wall_seconds: f64,
    pub incidents: usize,
}

impl EpochRecord {
    /// Tab-separated: epoch, mean loss, validation UAR, wall time, incidents.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.3}\t{}",
            self.epoch, self.mean_loss, self.validation_uar, self.wall_seconds, self.incidents
        )
    }
}

/// State after one optimizer step, for inspection.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub epoch: usize,
    /// 1-based over the whole run.
    pub step: usize,
    pub loss: f64,
    /// Inputs of the classification layer for this batch.
    pub embeddings: &'a [Vec<f64>],
    /// Classification weights after the step (and projection).
    pub classify_weight: &'a Tensor,
    pub tau: Option<f64>,
}

pub trait TrainObserver {
    fn on_step(&mut self, _step: &StepRecord<'_>) {}
    fn on_epoch(&mut self, _epoch: &EpochRecord) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Classifier,
    pub best_epoch: usize,
    pub best_uar: f64,
    pub history: Vec<EpochRecord>,
    pub rejected_steps: usize,
}

impl TrainOutcome {
    pub fn log(&self) -> String {
        self.history.iter().map(|r| r.log_line() + "\n").collect()
    }
}

/// First epoch (1-based) with the highest score.
pub fn best_epoch(uars: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &u) in uars.iter().enumerate() {
        if best.is_none_or(|(_, b)| u > b) {
            best = Some((i + 1, u));
        }
    }
    best.map(|b| b.0)
}

fn plan_epoch(set: &SegmentSet, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<BatchPlan> {
    if cfg.balanced {
        balanced_batches(&set.emotions, &set.emotion_names, cfg.batch_size, rng)
    } else {
        shuffled_batches(&set.emotions, &set.emotion_names, cfg.batch_size, rng)
    }
}

/// Loss, gradients and classification-layer inputs of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Mean per-sample gradients, one buffer per registry entry.
    pub grads: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Ordered sum of per-sample gradients divided by the batch size. Samples
/// are evaluated a few per worker at a time to bound memory; the summation
/// order does not depend on that. `embedding_seed` is added to every
/// sample's embedding gradient (see [`Classifier::sample_gradient_seeded`]).
pub fn batch_gradient(
    model: &Classifier,
    set: &SegmentSet,
    batch: &[usize],
    exec: Execution,
    embedding_seed: Option<&Tensor>,
) -> Result<BatchGradient> {
    let mut acc: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut loss = 0.0;
    let mut embeddings = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(exec.workers().max(1) * 2) {
        let results = exec.map(chunk, |&i| {
            model.sample_gradient_seeded(&set.inputs[i], set.labels[i], set.h_sp(i), embedding_seed)
        });
        for r in results {
            let g = r?;
            loss += g.loss;
            for (a, b) in acc.iter_mut().zip(&g.grads) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            embeddings.push(g.embedding);
        }
    }
    let n = batch.len() as f64;
    for x in acc.iter_mut().flatten() {
        *x /= n;
    }
    Ok(BatchGradient {
        loss: loss / n,
        grads: acc,
        embeddings,
    })
}

fn batch_embeddings(model: &Classifier, set: &SegmentSet, batch: &[usize], exec: Execution) -> Result<Vec<Vec<f64>>> {
    exec.map(batch, |&i| model.predict(&set.inputs[i], set.h_sp(i)).map(|p| p.embedding))
        .into_iter()
        .collect()
}

/// Tracks the batch statistic behind the column-norm target.
struct TauTracker {
    source: TauSource,
    average: Option<f64>,
}

impl TauTracker {
    /// `N / (C * ||sum x||_1)` from the current batch or a running mean of
    /// `||sum x||_1 / N`, and the weight of the current batch in it.
    fn next(&mut self, embeddings: &[Vec<f64>], classes: usize) -> Option<(f64, f64)> {
        let per_sample = batch_sum_l1(embeddings) / embeddings.len() as f64;
        let (stat, weight) = match self.source {
            TauSource::CurrentBatch => (per_sample, 1.0),
            TauSource::RunningAverage { momentum } => {
                let (avg, w) = match self.average {
                    Some(a) => (momentum * a + (1.0 - momentum) * per_sample, 1.0 - momentum),
                    None => (per_sample, 1.0),
                };
                self.average = Some(avg);
                (avg, w * per_sample / avg)
            }
        };
        (stat > 0.0 && stat.is_finite()).then(|| (1.0 / (classes as f64 * stat), weight))
    }
}

/// Gradient of the mean batch loss through `tau`, as a per-sample
/// embedding seed. `w` holds the classification weights used in the forward
/// pass (columns at L1 norm `tau`).
fn tau_seed(embeddings: &[Vec<f64>], labels: &[usize], w: &Tensor, bias: &[f64], tau: f64, weight: f64) -> Tensor {
    let (dim, classes) = (w.shape()[0], w.shape()[1]);
    let n = embeddings.len() as f64;
    let mut dl_dtau = 0.0;
    for (x, &y) in embeddings.iter().zip(labels) {
        let logits: Vec<f64> = (0..classes)
            .map(|c| (0..dim).map(|j| x[j] * w.data()[j * classes + c]).sum::<f64>() + bias[c])
            .collect();
        let p = crate::numerics::softmax(&logits);
        for c in 0..classes {
            let onehot = if c == y { 1.0 } else { 0.0 };
            dl_dtau += (p[c] - onehot) * (logits[c] - bias[c]) / tau;
        }
    }
    dl_dtau /= n;
    let sum: Vec<f64> = (0..dim).map(|j| embeddings.iter().map(|x| x[j]).sum()).collect();
    let s: f64 = sum.iter().map(|v| v.abs()).sum();
    // tau = N / (C * S) with S = ||sum x||_1, so d tau / d x_i = -tau sign(sum x) / S;
    // per-sample gradients are averaged, hence the factor N.
    let k = -n * dl_dtau * tau * weight / s;
    Tensor::vector(sum.iter().map(|v| k * v.signum() * f64::from(u8::from(*v != 0.0))).collect())
}

/// Trains one classifier and returns the parameters of its best validation
/// epoch. Training inputs and validation inputs must carry speaker states
/// exactly when the classifier uses speaker attention.
pub fn train_stage(
    mut model: Classifier,
    train: &SegmentSet,
    valid: &SegmentSet,
    cfg: &TrainConfig,
    exec: Execution,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if model.is_frozen() {
        return Err(Error::invalid("cannot train a frozen classifier"));
    }
    let ssa = model.uses_speaker_attention();
    for (name, set) in [("training", train), ("validation", valid)] {
        if set.is_empty() {
            return Err(Error::invalid(format!("{name} set is empty")));
        }
        if ssa != set.speaker_states.is_some() {
            return Err(Error::invalid(if ssa {
                format!("{name} set has no speaker states; train and freeze the speaker classifier first")
            } else {
                format!("{name} set carries speaker states but the classifier does not use them")
            }));
        }
    }
    let classes = model.spec().classes;
    if train.labels.iter().chain(&valid.labels).any(|&l| l >= classes) {
        return Err(Error::invalid(format!("target out of range for {classes} classes")));
    }
    let w_index = model
        .params()
        .index_of(CLASSIFY_WEIGHT)
        .ok_or_else(|| Error::invalid("classifier has no classification layer"))?;
    let b_index = model
        .params()
        .index_of(CLASSIFY_BIAS)
        .ok_or_else(|| Error::invalid("classifier has no classification bias"))?;

    // Unconstrained copy of the classification weights for the
    // reparameterized constraint.
    let mut shadow = (cfg.regularize && cfg.regularizer == RegularizerMode::Reparameterized)
        .then(|| model.params().tensors()[w_index].clone());

    // Under that constraint the loss is invariant to scaling the embeddings,
    // so any parameter group that scales them only drifts upward in norm and
    // shrinks its effective step. Such groups are pinned to their initial norm.
    let scale_groups: Vec<ScaleGroup> = if shadow.is_some() {
        scale_groups(&model)
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut tau = TauTracker {
        source: cfg.tau_source,
        average: None,
    };
    let mut history = Vec::new();
    let mut best: Option<(Classifier, usize, f64)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let plan = plan_epoch(train, cfg, &mut rng)?;
        let mut incidents = 0;
        let mut loss_sum = 0.0;
        let mut loss_batches = 0;
        for batch in &plan.batches {
            let before = model.params().tensors()[w_index].clone();
            let mut target = None;
            let mut seed = None;
            if let Some(v) = &shadow {
                let emb = match batch_embeddings(&model, train, batch, exec) {
                    Ok(e) => e,
                    Err(Error::NonFinite { layer }) => {
                        log::warn!("epoch {epoch}: non-finite activation at {layer}; batch skipped");
                        incidents += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                target = tau.next(&emb, classes);
                if let Some((t, weight)) = target {
                    let mut w = v.clone();
                    project_columns(&mut w, t)?;
                    let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
                    let bias = model.params().tensors()[b_index].data().to_vec();
                    seed = Some(tau_seed(&emb, &labels, &w, &bias, t, weight));
                    model.params_mut().tensors_mut()[w_index] = w;
                }
            }
            let bg = match batch_gradient(&model, train, batch, exec, seed.as_ref()) {
                Ok(r) => r,
                Err(Error::NonFinite { layer }) => {
                    log::warn!("epoch {epoch}: non-finite activation at {layer}; batch skipped");
                    model.params_mut().tensors_mut()[w_index] = before;
                    incidents += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let BatchGradient {
                loss,
                mut grads,
                embeddings,
            } = bg;
            loss_sum += loss;
            loss_batches += 1;
            if cfg.regularize && shadow.is_none() {
                target = tau.next(&embeddings, classes);
            }
            if cfg.regularize && target.is_none() {
                log::warn!("epoch {epoch}: classification input sums to zero; constraint skipped");
                incidents += 1;
            }
            if let (RegularizerMode::Penalty { weight }, Some((t, _))) = (cfg.regularizer, target) {
                let (_, g) = equi_output_penalty(&model.params().tensors()[w_index], t, weight);
                for (a, b) in grads[w_index].iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if let (Some(v), Some((t, _))) = (&shadow, target) {
                grads[w_index] = shadow_gradient(v, &grads[w_index], t);
                model.params_mut().tensors_mut()[w_index] = v.clone();
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            let stepped = opt.step(model.params_mut(), &grads);
            if let Some(v) = &mut shadow {
                if stepped.is_ok() && target.is_some() {
                    *v = model.params().tensors()[w_index].clone();
                }
            }
            if let Err(e) = stepped {
                model.params_mut().tensors_mut()[w_index] = before;
                match e {
                    Error::NonFinite { .. } => {
                        incidents += 1;
                        continue;
                    }
                    other => return Err(other),
                }
            }
            if shadow.is_some() && target.is_none() {
                model.params_mut().tensors_mut()[w_index] = before;
            }
            if let (RegularizerMode::Projection | RegularizerMode::Reparameterized, Some((t, _))) =
                (cfg.regularizer, target)
            {
                incidents += project_columns(&mut model.params_mut().tensors_mut()[w_index], t)?.len();
            }
            let mut embeddings = embeddings;
            if let Some((t, w)) = target {
                let mut k = 1.0;
                for g in &scale_groups {
                    k *= g.restore(model.params_mut().tensors_mut());
                }
                if k != 1.0 {
                    let tensors = model.params_mut().tensors_mut();
                    tensors[w_index].data_mut().iter_mut().for_each(|x| *x /= k);
                    embeddings.iter_mut().flatten().for_each(|x| *x *= k);
                    if let Some(avg) = &mut tau.average {
                        *avg *= k;
                    }
                    target = Some((t / k, w));
                }
            }
            step += 1;
            observer.on_step(&StepRecord {
                epoch,
                step,
                loss,
                embeddings: &embeddings,
                classify_weight: &model.params().tensors()[w_index],
                tau: target.map(|t| t.0),
            });
        }
        let uar = validation_uar(&model, valid, exec)?;
        let record = EpochRecord {
            epoch,
            mean_loss: if loss_batches == 0 { f64::NAN } else { loss_sum / loss_batches as f64 },
            validation_uar: uar,
            wall_seconds: start.elapsed().as_secs_f64(),
            incidents,
        };
        log::info!("{} {}: {}", cfg.stage, epoch, record.log_line());
        observer.on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| uar > b.2) {
            best = Some((model.clone(), epoch, uar));
        }
        let best_at = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience.is_some_and(|p| epoch - best_at >= p) {
            log::info!("{}: no improvement for {} epochs; stopping", cfg.stage, epoch - best_at);
            break;
        }
    }
    let (model, best_epoch, best_uar) = best.ok_or_else(|| Error::invalid("max_epochs must be positive"))?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_uar,
        history,
        rejected_steps: opt.rejected_steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::equi_output_tau;

    #[test]
    fn first_best_epoch_is_kept() {
        assert_eq!(best_epoch(&[0.4, 0.7, 0.6]), Some(2));
        assert_eq!(best_epoch(&[0.5, 0.5]), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn log_line_layout() {
        let r = EpochRecord {
            epoch: 3,
            mean_loss: 1.25,
            validation_uar: 0.5,
            wall_seconds: 0.1234,
            incidents: 0,
        };
        assert_eq!(r.log_line(), "3\t1.250000\t0.500000\t0.123\t0");
    }

    /// Mean cross-entropy when the weights are rescaled to the batch's tau.
    fn constrained_loss(x: &[Vec<f64>], y: &[usize], v: &Tensor, bias: &[f64]) -> f64 {
        let t = equi_output_tau(x, v.shape()[1]).unwrap();
        let mut w = v.clone();
        project_columns(&mut w, t).unwrap();
        let k = v.shape()[1];
        x.iter()
            .zip(y)
            .map(|(x, &y)| {
                let logits: Vec<f64> =
                    (0..k).map(|c| x.iter().enumerate().map(|(j, v)| v * w.data()[j * k + c]).sum::<f64>() + bias[c]).collect();
                -crate::numerics::softmax(&logits)[y].ln()
            })
            .sum::<f64>()
            / x.len() as f64
    }

    #[test]
    fn tau_seed_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, k) = (6, 5, 3);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + 0.3).collect()).collect();
        let y: Vec<usize> = (0..n).map(|i| i % k).collect();
        let v = Tensor::matrix(d, k, (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bias = vec![0.1, -0.2, 0.05];
        let t = equi_output_tau(&x, k).unwrap();
        let mut w = v.clone();
        project_columns(&mut w, t).unwrap();
        let seed = tau_seed(&x, &y, &w, &bias, t, 1.0);
        for i in 0..n {
            for j in 0..d {
                // direct term with tau held fixed
                let logits: Vec<f64> =
                    (0..k).map(|c| x[i].iter().enumerate().map(|(m, v)| v * w.data()[m * k + c]).sum::<f64>() + bias[c]).collect();
                let p = crate::numerics::softmax(&logits);
                let direct: f64 = (0..k).map(|c| (p[c] - f64::from(u8::from(c == y[i]))) * w.data()[j * k + c]).sum();
                let analytic = (direct + seed.data()[j]) / n as f64;
                let h = 1e-6;
                let mut xp = x.clone();
                xp[i][j] += h;
                let mut xm = x.clone();
                xm[i][j] -= h;
                let fd = (constrained_loss(&xp, &y, &v, &bias) - constrained_loss(&xm, &y, &v, &bias)) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-7, "{i},{j}: {fd} vs {analytic}");
            }
        }
    }
}

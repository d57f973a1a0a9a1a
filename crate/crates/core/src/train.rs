//! Datasets and the two-stage optimiser.
//!
//! Stage one updates only the fusion module and both projectors; stage two
//! updates everything except the encoders. Per-sample gradients may be
//! computed in parallel but are always summed in sample order, so a run is
//! bit-identical for any thread count.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::boxes::{BoxFile, BoxRecord, DetectionSet, TagSource};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{SceneDescriptor, SyntheticImage, SCENE_LABELS};
use crate::model::{FrameInputs, ModelParams};
use crate::nn::{FreezeMask, Stage};
use crate::pipeline::{detect_boxes, encode_frame};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples per step; 0 means the whole dataset.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 100,
            finetune_steps: 400,
            lr_pretrain: 3e-3,
            lr_finetune: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be positive, got {v}")))
            }
        };
        positive("lr_pretrain", self.lr_pretrain)?;
        positive("lr_finetune", self.lr_finetune)?;
        positive("eps", self.eps)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub scene: SceneDescriptor,
    pub text: Vec<usize>,
    pub answer: Vec<usize>,
    /// Detector output to use instead of the scene mock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoxRecord>>,
}

/// Token ids used by generated datasets.
pub mod vocab {
    pub const END: usize = 1;
    /// First label id; label `i` of the scene label list is `LABEL_BASE + i`.
    pub const LABEL_BASE: usize = 2;
    /// Count `n` is `COUNT_BASE + n`.
    pub const COUNT_BASE: usize = 20;
    pub const ASK_OBJECTS: usize = 40;
    pub const ASK_COUNT: usize = 41;
    pub const ASK_LARGEST: usize = 42;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// JSON Lines; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let data_err = |msg: String| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let sample: Sample = serde_json::from_str(&line).map_err(|e| data_err(e.to_string()))?;
            sample.scene.validate().map_err(|e| data_err(e.to_string()))?;
            if sample.answer.is_empty() {
                return Err(data_err("empty answer".into()));
            }
            samples.push(sample);
        }
        Ok(Self { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `count` random scenes with one of three question kinds each.
    pub fn synthetic(seed: u64, count: usize, extent: usize) -> Self {
        let seeds = SeedTree::new(seed);
        let samples = (0..count)
            .map(|i| {
                let mut rng = seeds.stream(&format!("dataset.{i}"));
                let objects = rand::Rng::gen_range(&mut rng, 1..=4);
                let scene_seed = rand::Rng::gen::<u64>(&mut rng) >> 12;
                let scene = SceneDescriptor::random(scene_seed, extent, extent, objects);
                let (text, answer) = question(&scene, i % 3);
                Sample {
                    scene,
                    text,
                    answer,
                    boxes: None,
                }
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn label_id(label: &str) -> usize {
    let i = SCENE_LABELS.iter().position(|l| *l == label).unwrap_or(0);
    vocab::LABEL_BASE + i
}

fn question(scene: &SceneDescriptor, kind: usize) -> (Vec<usize>, Vec<usize>) {
    match kind {
        0 => {
            let mut objs: Vec<_> = scene.objects.iter().collect();
            objs.sort_by(|a, b| a.x0.total_cmp(&b.x0));
            let mut answer: Vec<usize> = objs.iter().map(|o| label_id(&o.label)).collect();
            answer.push(vocab::END);
            (vec![vocab::ASK_OBJECTS], answer)
        }
        1 => (
            vec![vocab::ASK_COUNT],
            vec![vocab::COUNT_BASE + scene.objects.len(), vocab::END],
        ),
        _ => {
            let largest = scene
                .objects
                .iter()
                .max_by(|a, b| ((a.x1 - a.x0) * (a.y1 - a.y0)).total_cmp(&((b.x1 - b.x0) * (b.y1 - b.y0))))
                .map_or(vocab::END, |o| label_id(&o.label));
            (vec![vocab::ASK_LARGEST], vec![largest, vocab::END])
        }
    }
}

/// A sample with its frozen visual features computed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub frame: FrameInputs,
    pub text: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Runs the box pipeline and both encoders once per sample.
pub fn prepare(
    cfg: &RunConfig,
    params: &ModelParams,
    data: &Dataset,
    tags: &(dyn TagSource + Sync),
) -> Result<Vec<PreparedSample>> {
    data.samples
        .par_iter()
        .map(|s| {
            let image = SyntheticImage::render(&s.scene)?;
            let pre = match &s.boxes {
                Some(records) => Some(DetectionSet::from_box_file(BoxFile {
                    image_id: format!("scene-{}", s.scene.seed),
                    detections: records.clone(),
                })?),
                None => None,
            };
            let boxes = detect_boxes(&image, tags, pre.as_ref(), cfg.seed, &cfg.boxes)?;
            let frame = encode_frame(&params.encoders, &image, boxes, &cfg.roi)?.inputs;
            Ok(PreparedSample {
                frame,
                text: s.text.clone(),
                answer: s.answer.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,stage,loss\n");
    for r in records {
        writeln!(s, "{},{},{}", r.step, r.stage, r.loss).expect("writing to a String");
    }
    s
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Loss and per-parameter gradients of one sample; frozen entries are `None`.
pub fn sample_gradients(
    params: &ModelParams,
    mask: &FreezeMask,
    sample: &PreparedSample,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, mask);
    let frame = sample.frame.constant_on(&mut tape);
    let (loss, _) = params.loss(&mut tape, &bound, &[frame], &sample.text, &sample.answer)?;
    let grads = tape.backward(loss)?;
    let per_param = params
        .store
        .entries()
        .iter()
        .zip(bound.vars())
        .map(|(e, &v)| {
            let g = grads.get(v).cloned();
            debug_assert!(
                mask.trains(e.group) || g.is_none(),
                "frozen {} received a gradient",
                e.name
            );
            if mask.trains(e.group) {
                g
            } else {
                None
            }
        })
        .collect();
    Ok((tape.value(loss).item()?, per_param))
}

/// Mean loss and summed-then-averaged gradients over a batch, reduced in
/// batch order.
pub fn batch_gradients(
    params: &ModelParams,
    mask: &FreezeMask,
    batch: &[&PreparedSample],
    parallel: bool,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch_gradients: empty batch"));
    }
    let per_sample: Vec<(f64, Vec<Option<Tensor>>)> = if parallel {
        batch
            .par_iter()
            .map(|s| sample_gradients(params, mask, s))
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .map(|s| sample_gradients(params, mask, s))
            .collect::<Result<_>>()?
    };
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Vec<Option<Tensor>> = vec![None; params.store.len()];
    for (l, grads) in per_sample {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            if let Some(g) = g {
                *acc = Some(match acc.take() {
                    Some(a) => a.add(&g)?,
                    None => g,
                });
            }
        }
    }
    for g in total.iter_mut().flatten() {
        *g = g.map(|v| v / n);
    }
    Ok((loss / n, total))
}

/// Adam with bias correction; state covers every store entry.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect();
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates exactly the entries that have a gradient and a trainable group.
    pub fn step(&mut self, params: &mut ModelParams, mask: &FreezeMask, grads: &[Option<Tensor>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, entry) in params.store.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !mask.trains(entry.group) {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (p, &gj)) in entry.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StagePlan {
    PretrainOnly,
    #[default]
    Both,
}

fn batch_at(data: &[PreparedSample], size: usize, step: usize) -> Vec<&PreparedSample> {
    if size == 0 || size >= data.len() {
        return data.iter().collect();
    }
    (0..size).map(|i| &data[(step * size + i) % data.len()]).collect()
}

/// Runs stage one, then (per `plan`) stage two. Steps are numbered from 1
/// across both stages; each record holds the batch loss before its update.
pub fn train_two_stage(
    params: &mut ModelParams,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    plan: StagePlan,
    parallel: bool,
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset is empty"));
    }
    cfg.validate()?;
    let mut stages = vec![(Stage::Pretrain, cfg.pretrain_steps, cfg.lr_pretrain)];
    if plan == StagePlan::Both {
        stages.push((Stage::Finetune, cfg.finetune_steps, cfg.lr_finetune));
    }
    let mut records = Vec::new();
    let mut step = 0;
    for (stage, steps, lr) in stages {
        let mask = FreezeMask::for_stage(stage);
        let mut opt = Adam::new(params, lr, cfg);
        for local in 0..steps {
            let batch = batch_at(data, cfg.batch_size, local);
            let (loss, grads) = batch_gradients(params, &mask, &batch, parallel)?;
            if !loss.is_finite() {
                return Err(Error::invalid(
                    "train",
                    format!("non-finite loss at step {}", step + 1),
                ));
            }
            opt.step(params, &mask, &grads);
            step += 1;
            records.push(LossRecord { step, stage, loss });
            log::debug!("step {step} {stage} loss {loss:.6}");
        }
    }
    Ok(records)
}

/// Mean NLL over the whole set with the current parameters.
pub fn evaluate(params: &ModelParams, data: &[PreparedSample]) -> Result<f64> {
    let batch: Vec<&PreparedSample> = data.iter().collect();
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, &FreezeMask::frozen());
            let frame = s.frame.constant_on(&mut tape);
            let (loss, _) = params.loss(&mut tape, &bound, &[frame], &s.text, &s.answer)?;
            tape.value(loss).item()
        })
        .collect::<Result<_>>()?;
    if losses.is_empty() {
        return Err(Error::Empty("evaluate: empty dataset"));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::SceneTags;
    use crate::nn::Group;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.train.pretrain_steps = 3;
        cfg.train.finetune_steps = 3;
        cfg
    }

    #[test]
    fn dataset_roundtrip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = Dataset::synthetic(1, 5, 256);
        data.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), data);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"scene\": 3}\n");
        std::fs::write(&path, text).unwrap();
        match Dataset::load(&path).unwrap_err() {
            Error::Data { line, .. } => assert_eq!(line, 6),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn stage_one_touches_only_its_groups() {
        let cfg = tiny_cfg();
        let mut params = cfg.init_params().unwrap();
        let data = prepare(&cfg, &params, &Dataset::synthetic(2, 4, 256), &SceneTags).unwrap();
        let before: Vec<Vec<u8>> = Group::ALL.iter().map(|g| params.group_bytes(*g)).collect();
        train_two_stage(&mut params, &data, &cfg.train, StagePlan::PretrainOnly, false).unwrap();
        for (g, b) in Group::ALL.iter().zip(&before) {
            let changed = params.group_bytes(*g) != *b;
            let expect = matches!(g, Group::Fusion | Group::ProjF | Group::ProjB);
            assert_eq!(changed, expect, "{}", g.name());
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = tiny_cfg();
        let base = cfg.init_params().unwrap();
        let data = prepare(&cfg, &base, &Dataset::synthetic(3, 6, 256), &SceneTags).unwrap();
        let (mut a, mut b) = (base.clone(), base);
        let ra = train_two_stage(&mut a, &data, &cfg.train, StagePlan::Both, false).unwrap();
        let rb = train_two_stage(&mut b, &data, &cfg.train, StagePlan::Both, true).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(ra.len(), 6);
        assert!(loss_csv(&ra).starts_with("step,stage,loss\n1,pretrain,"));
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = tiny_cfg();
        let mut params = cfg.init_params().unwrap();
        assert!(train_two_stage(&mut params, &[], &cfg.train, StagePlan::Both, false).is_err());
    }
}

//! Self-check battery behind `mgflow verify`.
//!
//! Each suite compares the library against a slower, independently written
//! reference (finite differences, a brute-force NMS, a nested-loop RoI
//! sampler) or checks a structural invariant (token accounting, freezing,
//! determinism, saturated gates).

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::boxes::{nms_indices, Detection, DetectionSet, Provenance, SceneTags};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    gate_values, CrossAttention, FusionConfig, FusionParams, FusionStrategy, GateMode, MergeMethod,
};
use crate::gradcheck::{self, Coverage};
use crate::image::{SceneDescriptor, SyntheticImage};
use crate::model::{FrameInputs, FrameVisual, ModelConfig, ModelParams};
use crate::nn::{gelu, Bound, FreezeMask, Group, Stage};
use crate::objects::{build_pyramid, object_features_var, roi_align, MultiScalePyramid, RoiConfig};
use crate::pipeline::{detect_boxes, encode_frame, infer, FrameSource, Query};
use crate::rng::{uniform, SeedTree};
use crate::sampling::resize_plan;
use crate::tensor::Tensor;
use crate::train::{prepare, train_two_stage, Dataset, StagePlan};

pub const SUITES: [&str; 7] = [
    "gradients",
    "nms",
    "roi",
    "tokens",
    "freeze",
    "determinism",
    "gates",
];

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Adds 1e-3 to one analytic gradient coordinate of the first case.
    Gradient,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Suites to run; empty runs all of them.
    pub suites: Vec<String>,
    pub fault: Option<Fault>,
    /// Seeded instances per gradient case.
    pub instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            suites: Vec::new(),
            fault: None,
            instances: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(
        &mut self,
        suite: &'static str,
        name: impl Into<String>,
        passed: bool,
        detail: impl Into<String>,
    ) {
        self.checks.push(Check {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag} {}/{}: {}", c.suite, c.name, c.detail)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

pub fn run(cfg: &RunConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    for s in &opts.suites {
        if !SUITES.contains(&s.as_str()) {
            return Err(Error::Config(format!(
                "unknown suite `{s}` (expected one of {})",
                SUITES.join(", ")
            )));
        }
    }
    let wanted = |s: &str| opts.suites.is_empty() || opts.suites.iter().any(|w| w == s);
    let mut report = VerifyReport::default();
    if wanted("gradients") {
        gradient_suite(cfg.seed, opts, &mut report)?;
    }
    if wanted("nms") {
        nms_suite(cfg.seed, &mut report);
    }
    if wanted("roi") {
        roi_suite(cfg.seed, &mut report)?;
    }
    if wanted("tokens") {
        token_suite(cfg.seed, &mut report)?;
    }
    if wanted("freeze") {
        freeze_suite(cfg.seed, &mut report)?;
    }
    if wanted("determinism") {
        determinism_suite(cfg.seed, &mut report)?;
    }
    if wanted("gates") {
        gate_suite(cfg.seed, &mut report)?;
    }
    Ok(report)
}

// Gradient cases -----------------------------------------------------------

pub type ForwardFn = Arc<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// A scalar function of some input tensors, evaluated on a tape.
#[derive(Clone)]
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub forward: ForwardFn,
}

impl fmt::Debug for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl GradCase {
    /// Loss at `values` with every input a constant.
    pub fn loss(&self, values: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = (self.forward)(&mut tape, &vars)?;
        tape.value(out).item()
    }

    /// Tape gradients with respect to every input (zeros where unused).
    pub fn analytic(&self) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|v| tape.param(v.clone())).collect();
        let out = (self.forward)(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        Ok(vars
            .iter()
            .zip(&self.inputs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
            })
            .collect())
    }
}

/// Contracts `out` with a fixed random tensor of the same shape.
fn project(tape: &mut Tape, out: Var, seed: u64, name: &str) -> Result<Var> {
    let mut rng = SeedTree::new(seed).stream(&format!("project.{name}"));
    let r = uniform(&mut rng, tape.shape(out).to_vec(), 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn case(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let tag = name.to_string();
    GradCase {
        name: name.to_string(),
        inputs,
        forward: Arc::new(move |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, seed, &tag)
        }),
    }
}

/// Values in `±[margin, 1 + margin]`, away from kinks at zero.
fn away_from_zero(rng: &mut impl Rng, shape: Vec<usize>, margin: f64) -> Tensor {
    let t = uniform(rng, shape, 1.0);
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// Every differentiable op, plus the fusion and cross-attention blocks, on
/// seeded random inputs.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = SeedTree::new(seed).stream("gradcases");
    let mut u = |shape: &[usize]| uniform(&mut rng, shape.to_vec(), 1.0);
    let mut cases = vec![
        case("add", seed, vec![u(&[3, 4]), u(&[3, 4])], |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub", seed, vec![u(&[3, 4]), u(&[3, 4])], |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul", seed, vec![u(&[3, 4]), u(&[3, 4])], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("scalar", seed, vec![u(&[2, 3])], |t, v| {
            let a = t.mul_scalar(v[0], -1.7);
            Ok(t.add_scalar(a, 0.3))
        }),
        case("sigmoid", seed, vec![u(&[3, 4])], |t, v| t.sigmoid(v[0])),
        case("tanh", seed, vec![u(&[3, 4])], |t, v| t.tanh(v[0])),
        case("softmax", seed, vec![u(&[3, 5])], |t, v| t.softmax(v[0])),
        case("matmul", seed, vec![u(&[4, 5]), u(&[5, 3])], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("transpose", seed, vec![u(&[3, 5])], |t, v| t.transpose(v[0])),
        case(
            "conv1d",
            seed,
            vec![u(&[6, 4]), u(&[3, 4, 3]), u(&[3])],
            |t, v| t.conv1d(v[0], v[1], v[2]),
        ),
        case(
            "conv1d_k5",
            seed,
            vec![u(&[4, 2]), u(&[2, 2, 5]), u(&[2])],
            |t, v| t.conv1d(v[0], v[1], v[2]),
        ),
        case("sum", seed, vec![u(&[3, 4])], |t, v| Ok(t.sum(v[0]))),
        case("mean", seed, vec![u(&[3, 4])], |t, v| t.mean(v[0])),
        case("avg_pool", seed, vec![u(&[5, 3])], |t, v| t.avg_pool_rows(v[0])),
        case("slice", seed, vec![u(&[4, 6])], |t, v| {
            let a = t.slice(v[0], 1, 1, 4)?;
            t.slice(a, 0, 1, 3)
        }),
        case(
            "concat",
            seed,
            vec![u(&[2, 3]), u(&[2, 2]), u(&[3, 5])],
            |t, v| {
                let a = t.concat(&[v[0], v[1]], 1)?;
                t.concat(&[a, v[2]], 0)
            },
        ),
        case("reshape", seed, vec![u(&[3, 4])], |t, v| {
            let a = t.reshape(v[0], vec![2, 6])?;
            t.mul(a, a)
        }),
        case("bilinear_sample", seed, vec![u(&[12, 2])], |t, v| {
            t.sample(v[0], Arc::new(resize_plan(3, 4, 5, 7)))
        }),
        case("gather_rows", seed, vec![u(&[4, 3])], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 3])
        }),
        case(
            "linear",
            seed,
            vec![u(&[3, 4]), u(&[4, 2]), u(&[1, 2])],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        case("gelu", seed, vec![u(&[3, 4])], |t, v| gelu(t, v[0])),
    ];
    let mut rng = SeedTree::new(seed).stream("gradcases.kinks");
    cases.push(case(
        "relu",
        seed,
        vec![away_from_zero(&mut rng, vec![3, 4], 0.05)],
        |t, v| t.relu(v[0]),
    ));
    let positive = uniform(&mut rng, vec![3, 4], 0.7).map(|v| v + 1.2);
    cases.push(case("log", seed, vec![positive], |t, v| t.log(v[0])));
    for mode in [GateMode::PerChannel, GateMode::PerToken] {
        cases.push(fusion_case(seed, mode));
    }
    cases.push(cross_attention_case(seed));
    cases.push(roi_case(seed));
    cases
}

/// Inputs are the data tensors followed by every store entry.
fn module_case(
    name: &str,
    seed: u64,
    data: Vec<Tensor>,
    store: &crate::nn::ParamStore,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let n = data.len();
    let mut inputs = data;
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    case(name, seed, inputs, move |t, v| {
        let bound = Bound::from_vars(v[n..].to_vec());
        f(t, &bound, &v[..n])
    })
}

fn fusion_case(seed: u64, mode: GateMode) -> GradCase {
    let seeds = SeedTree::new(seed);
    let mut rng = seeds.stream("gradcases.fusion");
    let mut store = crate::nn::ParamStore::new();
    let cfg = FusionConfig {
        gate: mode,
        kernel: 3,
        gate_channels: 4,
        ..FusionConfig::default()
    };
    let p = FusionParams::init(&mut store, &mut rng, &cfg, 3, 5).expect("valid fusion config");
    let data = vec![
        uniform(&mut rng, vec![5, 3], 1.0),
        uniform(&mut rng, vec![5, 5], 1.0),
    ];
    let name = match mode {
        GateMode::PerChannel => "conv_gate",
        GateMode::PerToken => "conv_gate_per_token",
    };
    module_case(name, seed, data, &store, move |t, b, v| {
        crate::fusion::conv_gate_fuse(t, b, &p, v[0], v[1])
    })
}

fn cross_attention_case(seed: u64) -> GradCase {
    let mut rng = SeedTree::new(seed).stream("gradcases.xattn");
    let mut store = crate::nn::ParamStore::new();
    let xa = CrossAttention::init(&mut store, &mut rng, "xa", Group::Merge, 4);
    let data = vec![
        uniform(&mut rng, vec![3, 4], 1.0),
        uniform(&mut rng, vec![2, 4], 1.0),
    ];
    module_case("cross_attention", seed, data, &store, move |t, b, v| {
        xa.forward(t, b, v[0], v[1])
    })
}

fn random_box(rng: &mut impl Rng, w: f64, h: f64, label: &str) -> Detection {
    let bw = rng.gen_range(0.1..0.6) * w;
    let bh = rng.gen_range(0.1..0.6) * h;
    let x0 = rng.gen_range(-0.1 * w..w - 0.5 * bw);
    let y0 = rng.gen_range(-0.1 * h..h - 0.5 * bh);
    Detection::new(x0, y0, x0 + bw, y0 + bh, rng.gen_range(0.1..1.0), label).expect("positive extent")
}

fn roi_case(seed: u64) -> GradCase {
    let mut rng = SeedTree::new(seed).stream("gradcases.roi");
    let (gh, gw, c) = (5, 6, 3);
    let grid = uniform(&mut rng, vec![gh, gw, c], 1.0);
    let pyr = MultiScalePyramid::new(grid, 24.0, 20.0).expect("valid pyramid");
    let dets = DetectionSet {
        image_id: "roi".into(),
        detections: (0..3).map(|_| random_box(&mut rng, 24.0, 20.0, "x")).collect(),
        provenance: Provenance::Mock,
    };
    let rows = pyr.rows();
    let roi = RoiConfig {
        bins_h: 3,
        bins_w: 2,
        samples: 2,
    };
    case("roi_align", seed, vec![rows], move |t, v| {
        object_features_var(t, v[0], &pyr, &dets, &roi)
    })
}

/// Encoder configuration small enough for exhaustive gradient checks.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        low_res: 28,
        high_res: 64,
        channels_low: 6,
        channels_high: 8,
        stage_channels: vec![3, 4, 5, 8],
        ..EncoderConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        vocab: 16,
        projector_hidden: 8,
        scorer_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Tiny end-to-end run configuration for a fusion strategy.
pub fn tiny_config(strategy: FusionStrategy, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        encoder: tiny_encoder(),
        fusion: FusionConfig {
            strategy,
            gate_channels: 6,
            ..FusionConfig::default()
        },
        roi: RoiConfig {
            bins_h: 3,
            bins_w: 3,
            samples: 2,
        },
        model: tiny_model(),
        ..RunConfig::default()
    }
}

/// Full image pipeline: the frozen encoders run on a rendered scene, boxes
/// come from the mock detector, and the loss is differentiated with respect
/// to the encoder outputs (E_L, final-stage E_H, the pyramid) and every
/// trainable tensor.
pub fn pipeline_case(strategy: FusionStrategy, seed: u64) -> Result<GradCase> {
    let cfg = tiny_config(strategy, seed);
    let params = cfg.init_params()?;
    let mut rng = SeedTree::new(seed).stream("gradcases.pipeline");
    let objects = rng.gen_range(0..=3);
    let scene = SceneDescriptor::random(seed, 64, 64, objects);
    let image = SyntheticImage::render(&scene)?;
    let boxes = detect_boxes(&image, &SceneTags, None, seed, &cfg.boxes)?;
    let frame = encode_frame(&params.encoders, &image, boxes, &cfg.roi)?;
    let vocab = cfg.model.vocab;
    let text: Vec<usize> = (0..rng.gen_range(1..=3))
        .map(|_| rng.gen_range(0..vocab))
        .collect();
    let answer: Vec<usize> = (0..rng.gen_range(1..=3))
        .map(|_| rng.gen_range(0..vocab))
        .collect();
    let mut inputs = vec![
        frame.inputs.e_low.clone(),
        frame.inputs.e_high.clone(),
        frame.pyramid.rows(),
    ];
    inputs.extend(params.store.entries().iter().map(|e| e.value.clone()));
    let (pyr, dets, roi) = (frame.pyramid, frame.boxes, cfg.roi.clone());
    Ok(GradCase {
        name: format!("pipeline_{}", strategy.name()),
        inputs,
        forward: Arc::new(move |tape, v| {
            let bound = Bound::from_vars(v[3..].to_vec());
            let objects = object_features_var(tape, v[2], &pyr, &dets, &roi)?;
            let visual = FrameVisual {
                e_low: v[0],
                e_high: v[1],
                objects,
            };
            let (loss, _) = params.loss(tape, &bound, &[visual], &text, &answer)?;
            Ok(loss)
        }),
    })
}

/// Runs one case through the finite-difference comparison.
pub fn check_case(
    case: &GradCase,
    coverage: Coverage,
    seed: u64,
    fault: bool,
) -> Result<gradcheck::GradCheck> {
    let mut analytic = case.analytic()?;
    if fault {
        if let Some(v) = analytic.iter_mut().find(|t| !t.is_empty()) {
            v.data_mut()[0] += 1e-3;
        }
    }
    let mut rng = SeedTree::new(seed).stream(&format!("gradcheck.{}", case.name));
    gradcheck::check(
        &case.name,
        &case.inputs,
        &analytic,
        coverage,
        gradcheck::DEFAULT_STEP,
        &mut rng,
        |v| case.loss(v),
    )
}

fn gradient_suite(seed: u64, opts: &VerifyOptions, report: &mut VerifyReport) -> Result<()> {
    let mut worst: Vec<(String, f64, usize)> = Vec::new();
    let mut record = |name: &str, rel: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => {
            w.1 = w.1.max(rel);
            w.2 += 1;
        }
        None => worst.push((name.to_string(), rel, 1)),
    };
    for i in 0..opts.instances {
        let s = seed.wrapping_add(i as u64);
        for (ci, c) in op_cases(s).iter().enumerate() {
            let faulty = opts.fault == Some(Fault::Gradient) && i == 0 && ci == 0;
            let r = check_case(c, Coverage::All, s, faulty)?;
            record(&c.name, r.max_rel_error);
        }
        for strategy in FusionStrategy::ALL {
            let c = pipeline_case(strategy, s)?;
            let r = check_case(&c, Coverage::Sample(6), s, false)?;
            record(&c.name, r.max_rel_error);
        }
    }
    for (name, rel, n) in worst {
        let ok = rel < gradcheck::DEFAULT_TOLERANCE;
        report.push(
            "gradients",
            name,
            ok,
            format!("{n} instances, max rel err {rel:.2e}"),
        );
    }
    Ok(())
}

// NMS ----------------------------------------------------------------------

fn oracle_iou(a: &Detection, b: &Detection) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Repeatedly takes the best remaining box and deletes everything it
/// overlaps beyond the threshold.
fn oracle_nms(dets: &[Detection], thr: f64, class_aware: bool) -> Vec<usize> {
    let better = |a: usize, b: usize| {
        let (da, db) = (&dets[a], &dets[b]);
        (db.score, da.x0, da.y0, a)
            .partial_cmp(&(da.score, db.x0, db.y0, b))
            .expect("finite")
            .is_lt()
    };
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &j in &alive[1..] {
            if better(j, best) {
                best = j;
            }
        }
        keep.push(best);
        alive.retain(|&j| {
            j != best
                && !((!class_aware || dets[j].label == dets[best].label)
                    && oracle_iou(&dets[best], &dets[j]) > thr)
        });
    }
    keep
}

/// Boxes on a coarse lattice with few distinct scores, so exact duplicates,
/// equal scores and IoU exactly at the threshold all occur.
pub fn tie_heavy_boxes(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    let labels = ["a", "b", "c"];
    (0..n)
        .map(|_| {
            let x0 = rng.gen_range(0..8) as f64 * 4.0;
            let y0 = rng.gen_range(0..8) as f64 * 4.0;
            let w = rng.gen_range(1..5) as f64 * 4.0;
            let h = rng.gen_range(1..5) as f64 * 4.0;
            let score = rng.gen_range(1..6) as f64 / 5.0;
            Detection::new(x0, y0, x0 + w, y0 + h, score, labels[rng.gen_range(0..3)])
                .expect("positive extent")
        })
        .collect()
}

fn nms_suite(seed: u64, report: &mut VerifyReport) {
    let mut rng = SeedTree::new(seed).stream("verify.nms");
    let mut mismatches = 0;
    let mut first = None;
    for i in 0..1000 {
        let n = rng.gen_range(0..=200);
        let dets = tie_heavy_boxes(&mut rng, n);
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let class_aware = rng.gen_bool(0.5);
        let mut lib = nms_indices(&dets, thr, class_aware);
        let mut oracle = oracle_nms(&dets, thr, class_aware);
        lib.sort_unstable();
        oracle.sort_unstable();
        if lib != oracle {
            mismatches += 1;
            first.get_or_insert(i);
        }
    }
    report.push(
        "nms",
        "oracle_equivalence",
        mismatches == 0,
        match first {
            None => "1000 instances identical".to_string(),
            Some(i) => format!("{mismatches} mismatches, first at instance {i}"),
        },
    );
}

// RoI ----------------------------------------------------------------------

fn lerp_axis(c: f64, extent: usize) -> (usize, usize, f64) {
    let c = c.max(0.0).min((extent - 1) as f64);
    let lo = c.floor() as usize;
    (lo, (lo + 1).min(extent - 1), c - lo as f64)
}

/// Nested-loop RoI Align straight from the definition.
fn oracle_roi(pyr: &MultiScalePyramid, det: &Detection, cfg: &RoiConfig) -> Option<Vec<f64>> {
    let (gh, gw, c) = pyr.dims();
    let x0 = det.x0.max(0.0).min(pyr.image_width);
    let x1 = det.x1.max(0.0).min(pyr.image_width);
    let y0 = det.y0.max(0.0).min(pyr.image_height);
    let y1 = det.y1.max(0.0).min(pyr.image_height);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let (sx, sy) = (gw as f64 / pyr.image_width, gh as f64 / pyr.image_height);
    let (x0, x1, y0, y1) = (x0 * sx, x1 * sx, y0 * sy, y1 * sy);
    let g = pyr.grid.data();
    let at = |y: usize, x: usize, ch: usize| g[(y * gw + x) * c + ch];
    let s = cfg.samples;
    let mut out = vec![0.0; cfg.bins_h * cfg.bins_w * c];
    for by in 0..cfg.bins_h {
        for bx in 0..cfg.bins_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for iy in 0..s {
                    for ix in 0..s {
                        let py =
                            y0 + (y1 - y0) * (by as f64 + (iy as f64 + 0.5) / s as f64) / cfg.bins_h as f64;
                        let px =
                            x0 + (x1 - x0) * (bx as f64 + (ix as f64 + 0.5) / s as f64) / cfg.bins_w as f64;
                        let (ya, yb, fy) = lerp_axis(py - 0.5, gh);
                        let (xa, xb, fx) = lerp_axis(px - 0.5, gw);
                        acc += at(ya, xa, ch) * (1.0 - fy) * (1.0 - fx)
                            + at(ya, xb, ch) * (1.0 - fy) * fx
                            + at(yb, xa, ch) * fy * (1.0 - fx)
                            + at(yb, xb, ch) * fy * fx;
                    }
                }
                out[(by * cfg.bins_w + bx) * c + ch] = acc / (s * s) as f64;
            }
        }
    }
    Some(out)
}

fn roi_suite(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let mut rng = SeedTree::new(seed).stream("verify.roi");
    let mut worst = 0.0f64;
    let mut const_worst = 0.0f64;
    for _ in 0..500 {
        let (gh, gw, c) = (rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(1..5));
        let grid = uniform(&mut rng, vec![gh, gw, c], 2.0);
        let (iw, ih) = (gw as f64 * 4.0, gh as f64 * 4.0);
        let pyr = MultiScalePyramid::new(grid, iw, ih)?;
        let det = random_box(&mut rng, iw, ih, "x");
        let cfg = RoiConfig {
            bins_h: rng.gen_range(1..8),
            bins_w: rng.gen_range(1..8),
            samples: rng.gen_range(1..4),
        };
        let Some(expected) = oracle_roi(&pyr, &det, &cfg) else {
            continue;
        };
        let got = roi_align(&pyr, &det, &cfg)?;
        for (a, b) in got.data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        let value = rng.gen_range(-3.0..3.0);
        let flat = MultiScalePyramid::new(Tensor::full(vec![gh, gw, c], value), iw, ih)?;
        for v in roi_align(&flat, &det, &cfg)?.data() {
            const_worst = const_worst.max((v - value).abs());
        }
    }
    report.push(
        "roi",
        "oracle_equivalence",
        worst <= 1e-9,
        format!("500 pairs, max abs diff {worst:.2e}"),
    );
    report.push(
        "roi",
        "constant_map",
        const_worst <= 1e-9,
        format!("max deviation {const_worst:.2e}"),
    );
    Ok(())
}

// Token accounting ---------------------------------------------------------

/// Length the assembly contract promises for one prompt.
pub fn expected_length(method: MergeMethod, n: usize, ks: &[usize], text: usize) -> usize {
    let per_frame: usize = ks
        .iter()
        .map(|&k| match method {
            MergeMethod::FToBXattn => n,
            MergeMethod::Concat | MergeMethod::BToFXattn => n + k,
        })
        .sum();
    per_frame + text
}

/// `k` random in-image boxes.
pub fn random_boxes(rng: &mut impl Rng, k: usize, w: f64, h: f64) -> DetectionSet {
    DetectionSet {
        image_id: "sweep".into(),
        detections: (0..k)
            .map(|_| {
                let bw = rng.gen_range(4.0..w / 3.0);
                let bh = rng.gen_range(4.0..h / 3.0);
                let x0 = rng.gen_range(0.0..w - bw);
                let y0 = rng.gen_range(0.0..h - bh);
                Detection::new(x0, y0, x0 + bw, y0 + bh, rng.gen_range(0.05..1.0), "obj")
                    .expect("positive extent")
            })
            .collect(),
        provenance: Provenance::Mock,
    }
}

/// The two resolution pairs of the sweep, with the high side adjusted so
/// both grids have the same number of tokens.
pub fn sweep_encoders() -> Vec<EncoderConfig> {
    vec![
        EncoderConfig::default()
            .with_adjusted_resolutions(224, 448)
            .expect("224 is a multiple of 14"),
        EncoderConfig::default(),
    ]
}

fn prompt_length(params: &ModelParams, frames: &[FrameInputs], text_len: usize) -> Result<usize> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &FreezeMask::frozen());
    let visual: Vec<FrameVisual> = frames.iter().map(|f| f.constant_on(&mut tape)).collect();
    let text: Vec<usize> = (0..text_len).map(|i| i % params.vocab()).collect();
    let seq = params.prompt(&mut tape, &bound, &visual, &text)?;
    if tape.shape(seq.embeddings)[0] != seq.len() {
        return Err(Error::invalid(
            "token_suite",
            "segment tags disagree with embedding rows",
        ));
    }
    Ok(seq.len())
}

fn token_suite(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let mut rng = SeedTree::new(seed).stream("verify.tokens");
    let image = SyntheticImage::render(&SceneDescriptor::random(seed, 256, 256, 3))?;
    for enc in sweep_encoders() {
        let base = ModelParams::new(
            &enc,
            &FusionConfig::default(),
            &ModelConfig::default(),
            &SeedTree::new(seed),
        )?;
        let stages = base.encoders.encode_high(&image)?;
        let pyramid = build_pyramid(&stages)?.for_image(256.0, 256.0);
        let e_low = base.encoders.encode_low(&image)?.flat()?;
        let e_high = stages.last().expect("four stages").flat()?;
        let n = enc.tokens();
        let frame_with = |k: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<FrameInputs> {
            let boxes = random_boxes(rng, k, 256.0, 256.0);
            let objects =
                crate::objects::extract_object_features(&pyramid, &boxes, &RoiConfig::default())?.features;
            Ok(FrameInputs {
                e_low: e_low.clone(),
                e_high: e_high.clone(),
                objects,
            })
        };
        for strategy in FusionStrategy::ALL {
            let fusion = FusionConfig {
                strategy,
                ..FusionConfig::default()
            };
            let params = ModelParams::new(&enc, &fusion, &ModelConfig::default(), &SeedTree::new(seed))?;
            let method = params.merge.method;
            let mut bad = Vec::new();
            let mut cases = 0;
            for inst in 0..12 {
                let k = if inst == 0 {
                    0
                } else if inst == 1 {
                    100
                } else {
                    rng.gen_range(0..=100)
                };
                let l_t = rng.gen_range(1..=32);
                let got = prompt_length(&params, &[frame_with(k, &mut rng)?], l_t)?;
                cases += 1;
                if got != expected_length(method, n, &[k], l_t) {
                    bad.push(format!("k={k} L_T={l_t} got {got}"));
                }
            }
            let ks: Vec<usize> = (0..crate::config::VIDEO_FRAMES)
                .map(|_| rng.gen_range(0..=12))
                .collect();
            let frames = ks
                .iter()
                .map(|&k| frame_with(k, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let l_t = rng.gen_range(1..=32);
            let got = prompt_length(&params, &frames, l_t)?;
            cases += 1;
            if got != expected_length(method, n, &ks, l_t) {
                bad.push(format!("video ks={ks:?} got {got}"));
            }
            report.push(
                "tokens",
                format!("{}_{}x{}", strategy.name(), enc.low_res, enc.high_res),
                bad.is_empty(),
                if bad.is_empty() {
                    format!("{cases} prompts, N={n}")
                } else {
                    bad.join("; ")
                },
            );
        }
    }
    Ok(())
}

// Freezing and determinism -------------------------------------------------

fn tiny_training(
    seed: u64,
    strategy: FusionStrategy,
) -> Result<(RunConfig, ModelParams, Vec<crate::train::PreparedSample>)> {
    let mut cfg = tiny_config(strategy, seed);
    cfg.train.batch_size = 0;
    let params = cfg.init_params()?;
    let mut tiny = Dataset::synthetic(seed, 4, 64);
    for s in &mut tiny.samples {
        for id in s.text.iter_mut().chain(s.answer.iter_mut()) {
            *id %= cfg.model.vocab;
        }
    }
    let prepared = prepare(&cfg, &params, &tiny, &SceneTags)?;
    Ok((cfg, params, prepared))
}

fn group_snapshot(params: &ModelParams) -> Vec<(Group, Vec<u8>)> {
    Group::ALL.iter().map(|g| (*g, params.group_bytes(*g))).collect()
}

fn changed_groups(before: &[(Group, Vec<u8>)], params: &ModelParams) -> Vec<Group> {
    before
        .iter()
        .filter(|(g, b)| params.group_bytes(*g) != *b)
        .map(|(g, _)| *g)
        .collect()
}

fn freeze_suite(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let (mut cfg, mut params, data) = tiny_training(seed, FusionStrategy::BToFXattn)?;
    cfg.train.pretrain_steps = 100;
    cfg.train.finetune_steps = 5;
    let before = group_snapshot(&params);
    train_two_stage(&mut params, &data, &cfg.train, StagePlan::PretrainOnly, false)?;
    let changed = changed_groups(&before, &params);
    let expect = vec![Group::Fusion, Group::ProjF, Group::ProjB];
    report.push(
        "freeze",
        "pretrain",
        changed == expect,
        format!("changed after 100 steps: {changed:?}"),
    );
    let before = group_snapshot(&params);
    let mut finetune = cfg.train.clone();
    finetune.pretrain_steps = 0;
    train_two_stage(&mut params, &data, &finetune, StagePlan::Both, false)?;
    let changed = changed_groups(&before, &params);
    let expect: Vec<Group> = Group::ALL.into_iter().filter(|g| *g != Group::Encoders).collect();
    report.push(
        "freeze",
        "finetune",
        changed == expect,
        format!("changed: {changed:?}"),
    );
    Ok(())
}

fn determinism_suite(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let (mut cfg, base, data) = tiny_training(seed, FusionStrategy::ConvGate)?;
    cfg.train.pretrain_steps = 5;
    cfg.train.finetune_steps = 5;
    let mut hashes = Vec::new();
    let mut curves = Vec::new();
    for parallel in [false, false, true] {
        let mut p = base.clone();
        let curve = train_two_stage(&mut p, &data, &cfg.train, StagePlan::Both, parallel)?;
        hashes.push(checkpoint::fingerprint(&p, &cfg, Stage::Finetune, curve.len())?);
        curves.push(curve);
    }
    let same = hashes.windows(2).all(|w| w[0] == w[1]) && curves.windows(2).all(|w| w[0] == w[1]);
    report.push(
        "determinism",
        "train",
        same,
        format!("checkpoint {}", &hashes[0][..16]),
    );
    let image = SyntheticImage::render(&SceneDescriptor::random(seed, 64, 64, 3))?;
    let src = [FrameSource { image, boxes: None }];
    let digests = (0..2)
        .map(|_| infer(&cfg, &base, &src, &SceneTags, &[1, 2], &Query::Decode(2), false).map(|r| r.digest))
        .collect::<Result<Vec<_>>>()?;
    report.push(
        "determinism",
        "infer",
        digests[0] == digests[1],
        format!("report {}", &digests[0][..16]),
    );
    Ok(())
}

// Gates ----------------------------------------------------------------------

fn gate_suite(seed: u64, report: &mut VerifyReport) -> Result<()> {
    let mut rng = SeedTree::new(seed).stream("verify.gates");
    for mode in [GateMode::PerChannel, GateMode::PerToken] {
        let cfg = FusionConfig {
            gate: mode,
            kernel: 3,
            gate_channels: 5,
            ..FusionConfig::default()
        };
        let mut store = crate::nn::ParamStore::new();
        let p = FusionParams::init(&mut store, &mut rng, &cfg, 4, 6)?;
        let e_low = uniform(&mut rng, vec![7, 4], 1.0);
        let e_high = uniform(&mut rng, vec![7, 6], 1.0);
        let aligned = e_high.matmul(store.get(p.align_high.w))?;
        let w_shape = store.get(p.gate.w).shape().to_vec();
        *store.get_mut(p.gate.w) = Tensor::zeros(w_shape);
        let b = p.gate.b.expect("gate has a bias");
        for (name, bias, expected) in [
            ("low", -40.0, e_low.clone()),
            ("high", 40.0, e_low.add(&aligned)?),
        ] {
            let b_shape = store.get(b).shape().to_vec();
            *store.get_mut(b) = Tensor::full(b_shape, bias);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, &FreezeMask::frozen());
            let (l, h) = (tape.constant(e_low.clone()), tape.constant(e_high.clone()));
            let fused = crate::fusion::conv_gate_fuse(&mut tape, &bound, &p, l, h)?;
            let g = gate_values(&mut tape, &bound, &p, l, h)?;
            let diff = tape.value(fused).max_abs_diff(&expected)?;
            let g_range = tape
                .value(g)
                .data()
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, z), &v| (a.min(v), z.max(v)));
            let mode_name = match mode {
                GateMode::PerChannel => "per_channel",
                GateMode::PerToken => "per_token",
            };
            report.push(
                "gates",
                format!("saturated_{name}_{mode_name}"),
                diff <= 1e-9,
                format!(
                    "max |E_F - expected| {diff:.2e}, gate in [{:.3e}, {:.3e}]",
                    g_range.0, g_range.1
                ),
            );
        }
    }
    Ok(())
}

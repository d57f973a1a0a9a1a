use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mgflow::boxes::{box_stats, generate_boxes, DetectionSet, FixedTags, MockDetector, TagSource};
use mgflow::checkpoint;
use mgflow::image::DEFAULT_SCENE_EXTENT;
use mgflow::pipeline::{infer as run_infer, FrameSource, Query};
use mgflow::train::{prepare, train_two_stage, write_loss_csv, Dataset, StagePlan};
use mgflow::verify::{self, Fault, VerifyOptions};
use mgflow::{RunConfig, SceneDescriptor, Stage, SyntheticImage};

use crate::{
    ConfigArgs, DataKind, Failure, FaultArg, GenDataArgs, InferArgs, StageArg, StatsArgs, TrainArgs,
    VerifyArgs,
};

type Outcome = Result<(), Failure>;

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

/// Resolves the config and sizes the global worker pool.
fn setup(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    if args.threads == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--threads must be at least 1")));
    }
    // A second call in the same process fails harmlessly.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global();
    // Anything wrong with the configuration, file or flags, is a usage error.
    args.resolve().map_err(|e| Failure::Usage(e.into()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data_err)?;
    serde_json::from_str(&text).map_err(|e| {
        data_err(mgflow::Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    })
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(data_err)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(data_err),
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                // A closed pipe (`| head`) is the reader's choice, not a failure.
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(data_err(e)),
                _ => Ok(()),
            }
        }
    }
}

/// Canvas for a box file with no image: large enough to hold every box.
fn canvas_for(set: &DetectionSet) -> (usize, usize) {
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for d in &set.detections {
        w = w.max(d.x1);
        h = h.max(d.y1);
    }
    (w.ceil() as usize, h.ceil() as usize)
}

pub fn infer(args: InferArgs) -> Outcome {
    let cfg = setup(&args.config)?;
    let params = match &args.checkpoint {
        Some(dir) => checkpoint::load(dir, &cfg)?,
        None => cfg.init_params()?,
    };
    let boxes = match &args.boxes {
        Some(p) => Some(DetectionSet::load(p)?),
        None => None,
    };
    let scenes: Option<Vec<SceneDescriptor>> = if let Some(p) = &args.scene {
        Some(vec![read_json(p)?])
    } else if let Some(p) = &args.video {
        Some(read_json(p)?)
    } else {
        args.scene_seed.map(|s| {
            vec![SceneDescriptor::random(
                s,
                DEFAULT_SCENE_EXTENT,
                DEFAULT_SCENE_EXTENT,
                args.objects,
            )]
        })
    };
    let (sources, tags): (Vec<FrameSource>, Box<dyn TagSource + Send + Sync>) = match (scenes, boxes) {
        (Some(scenes), boxes) => {
            if boxes.is_some() && scenes.len() != 1 {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "--boxes pairs with a single scene"
                )));
            }
            let mut sources = Vec::with_capacity(scenes.len());
            for s in &scenes {
                s.validate().map_err(data_err)?;
                sources.push(FrameSource {
                    image: SyntheticImage::render(s)?,
                    boxes: boxes.clone(),
                });
            }
            (sources, cfg.boxes.tags.build()?)
        }
        (None, Some(set)) => {
            let (w, h) = canvas_for(&set);
            let labels: Vec<String> = set.detections.iter().map(|d| d.label.clone()).collect();
            let image = SyntheticImage::noise(cfg.seed, h, w)?;
            (
                vec![FrameSource {
                    image,
                    boxes: Some(set),
                }],
                Box::new(FixedTags::new(labels)),
            )
        }
        (None, None) => {
            return Err(Failure::Usage(anyhow::anyhow!(
                "give one of --scene, --scene-seed, --video or --boxes"
            )))
        }
    };
    let query = match args.answer {
        Some(a) => Query::Score(a),
        None => Query::Decode(args.decode),
    };
    let report = run_infer(
        &cfg,
        &params,
        &sources,
        tags.as_ref(),
        &args.text,
        &query,
        !args.no_timings,
    )?;
    let json = pretty(&report)?;
    write_or_print(args.out.as_deref(), &json)
}

pub fn train(args: TrainArgs) -> Outcome {
    let mut cfg = setup(&args.config)?;
    if let Some(n) = args.pretrain_steps {
        cfg.train.pretrain_steps = n;
    }
    if let Some(n) = args.finetune_steps {
        cfg.train.finetune_steps = n;
    }
    cfg.validate()?;
    let data = Dataset::load(&args.data)?;
    if data.is_empty() {
        return Err(data_err(anyhow::anyhow!("{}: no samples", args.data.display())));
    }
    let tags = cfg.boxes.tags.build()?;
    let mut params = cfg.init_params()?;
    let prepared = prepare(&cfg, &params, &data, tags.as_ref())?;
    let (plan, stage) = match args.stage {
        StageArg::Pretrain => (StagePlan::PretrainOnly, Stage::Pretrain),
        StageArg::Both => (StagePlan::Both, Stage::Finetune),
    };
    let parallel = args.config.threads > 1;
    let records = train_two_stage(&mut params, &prepared, &cfg.train, plan, parallel)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        log::info!(
            "loss {:.6} -> {:.6} over {} steps",
            first.loss,
            last.loss,
            records.len()
        );
    }
    let hash = checkpoint::save(&args.out, &params, &cfg, stage, records.len())?;
    let csv = args.loss_csv.clone().unwrap_or_else(|| args.out.join("loss.csv"));
    write_loss_csv(&csv, &records)?;
    println!("{hash}");
    Ok(())
}

pub fn verify(args: VerifyArgs) -> Outcome {
    let cfg = setup(&args.config)?;
    let opts = VerifyOptions {
        suites: args.suites,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::Gradient => Fault::Gradient,
        }),
        instances: args.instances,
    };
    let report = verify::run(&cfg, &opts)?;
    if args.json {
        println!("{}", pretty(&report)?);
    } else {
        println!("{report}");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn collect_box_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), Failure> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))
            .map_err(data_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        // Directory order is unspecified; sort so output is stable.
        entries.sort();
        for e in entries {
            if e.is_dir() || e.extension().is_some_and(|x| x == "json") {
                collect_box_files(&e, out)?;
            }
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn stats(args: StatsArgs) -> Outcome {
    let mut files = Vec::new();
    for p in &args.paths {
        collect_box_files(p, &mut files)?;
    }
    let sets = files
        .iter()
        .map(|f| DetectionSet::load(f))
        .collect::<mgflow::Result<Vec<_>>>()?;
    let hist = box_stats(&sets);
    print!("{hist}");
    if let Some(csv) = &args.csv {
        fs::write(csv, hist.to_csv())
            .with_context(|| format!("writing {}", csv.display()))
            .map_err(data_err)?;
    }
    Ok(())
}

/// Frames of one scene whose objects drift right and down, clamped to the canvas.
fn drifting_video(seed: u64, extent: usize, objects: usize, frames: usize) -> Vec<SceneDescriptor> {
    let base = SceneDescriptor::random(seed, extent, extent, objects);
    let limit = extent as f64;
    (0..frames)
        .map(|f| {
            let step = (f * extent / 64) as f64;
            let mut scene = base.clone();
            scene.seed = seed + f as u64;
            for o in &mut scene.objects {
                let dx = step.min(limit - o.x1);
                let dy = (step / 2.0).min(limit - o.y1);
                o.x0 += dx;
                o.x1 += dx;
                o.y0 += dy;
                o.y1 += dy;
            }
            scene
        })
        .collect()
}

pub fn gen_data(args: GenDataArgs) -> Outcome {
    match args.kind {
        DataKind::Dataset => Dataset::synthetic(args.seed, args.count, args.extent).save(&args.out)?,
        DataKind::Scene => {
            let scene = SceneDescriptor::random(args.seed, args.extent, args.extent, args.objects);
            write_or_print(Some(&args.out), &pretty(&scene)?)?;
        }
        DataKind::Video => {
            let frames = drifting_video(args.seed, args.extent, args.objects, args.count);
            write_or_print(Some(&args.out), &pretty(&frames)?)?;
        }
        DataKind::Boxes => {
            fs::create_dir_all(&args.out)
                .with_context(|| format!("creating {}", args.out.display()))
                .map_err(data_err)?;
            let cfg = mgflow::BoxConfig::default();
            let tags = cfg.tags.build()?;
            for i in 0..args.count {
                let seed = args.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                // Object counts cycle so every histogram bin gets traffic.
                let objects = [0, 1, 3, 6, 12, 24][i % 6];
                let scene = SceneDescriptor::random(seed, args.extent, args.extent, objects);
                let image = SyntheticImage::render(&scene)?;
                let set = generate_boxes(&image, tags.as_ref(), &MockDetector::new(seed), &cfg)?;
                set.save(&args.out.join(format!("boxes-{i:05}.json")))?;
            }
        }
    }
    Ok(())
}

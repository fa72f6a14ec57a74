use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dve_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ProvenanceStep};
use dve_core::config::{DataConfig, DataSource, EvalConfig, RunConfig};
use dve_core::datasets::{synth_arm_generate, ArmGenConfig, Dataset, FaceName};
use dve_core::evalkit::{
    iod_error, limited_annotation_study, matching_benchmark, nn_match, train_regressor, write_limited_report,
    AnnotationCount, MatchProtocol,
};
use dve_core::image::{to_normalized, to_pixel, Image, Point};
use dve_core::trainer::{finetune_unsupervised, train_until, LogRecord, TrainObserver, TrainState};
use dve_core::warp::WarpConfig;
use dve_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::run::RunDir;
use crate::{EvalArgs, FinetuneArgs, GenDataArgs, Protocol, TrainArgs, VisualizeArgs};

const CHECKPOINT: &str = "checkpoint.ckpt";
const LOG: &str = "train_log.jsonl";
const CONFIG: &str = "config.toml";

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?.arm,
        None => None,
    };
    let mut cfg = base.unwrap_or(ArmGenConfig { n_instances: 100, frames_per_instance: 20, image_size: 64, seed: 0 });
    cfg.n_instances = a.instances.unwrap_or(cfg.n_instances);
    cfg.frames_per_instance = a.frames.unwrap_or(cfg.frames_per_instance);
    cfg.image_size = a.size.unwrap_or(cfg.image_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let test_cfg = ArmGenConfig {
        n_instances: a.test_instances.unwrap_or((cfg.n_instances / 5).max(2)),
        seed: cfg.seed ^ 0x7e57_0000_0000,
        ..cfg
    };
    let mut run = RunDir::create("gen-data", &a.out, Some(&a.out), cfg.seed, a.config.as_deref())?;
    for (part, c) in [("train", cfg), ("test", test_cfg)] {
        let data = synth_arm_generate(c)?;
        let dir = a.out.join(part);
        data.save(&dir, &format!("arm_{part}"))?;
        eprintln!("{part}: {} instances x {} frames -> {}", c.n_instances, c.frames_per_instance, dir.display());
        run.record(dir.join("manifest.json"));
    }
    run.finish()?;
    Ok(())
}

/// Writes the step log and a checkpoint after every epoch.
struct RunObserver {
    log: BufWriter<File>,
    checkpoint: PathBuf,
    meta: CheckpointMeta,
    stage: &'static str,
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, record: &LogRecord) -> dve_core::Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.log, "{line}").map_err(|e| Error::Data(format!("writing training log: {e}")))
    }

    fn on_epoch(&mut self, state: &TrainState) -> dve_core::Result<()> {
        self.log.flush().map_err(|e| Error::Data(format!("writing training log: {e}")))?;
        let last = state.history.last().expect("epoch just finished");
        eprintln!("epoch {:>4}  loss {:.5}  ({:.1}s)", last.epoch, last.mean_loss, last.wall_time);
        let mut meta = self.meta.clone();
        meta.train_epochs = state.epochs_done;
        meta.history = state.history.clone();
        meta.provenance.push(ProvenanceStep {
            stage: self.stage.into(),
            dataset_id: meta.dataset_id.clone(),
            epochs: state.epochs_done,
        });
        save_checkpoint(&self.checkpoint, &meta, &state.model, Some(&state.optimizer))
    }
}

/// Open the step log, dropping records beyond `keep_epochs` left by an
/// interrupted epoch.
fn open_log(path: &Path, keep_epochs: usize) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if keep_epochs > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let rec: LogRecord = serde_json::from_str(&line).with_context(|| format!("bad log line in {}", path.display()))?;
            if rec.epoch <= keep_epochs {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(BufWriter::new(f))
}

fn write_loss_curve(run: &mut RunDir, state: &TrainState) -> Result<()> {
    let path = run.file("loss_curve.csv");
    let mut f = BufWriter::new(File::create(&path)?);
    writeln!(f, "epoch,mean_loss,wall_time")?;
    for e in &state.history {
        writeln!(f, "{},{:.8},{:.3}", e.epoch, e.mean_loss, e.wall_time)?;
    }
    f.flush()?;
    run.record(path);
    Ok(())
}

fn training_summary(state: &TrainState) -> serde_json::Value {
    json!({
        "epochs": state.epochs_done,
        "first_epoch_loss": state.history.first().map(|e| e.mean_loss),
        "final_epoch_loss": state.history.last().map(|e| e.mean_loss),
        "param_hash": state.model.param_hash(),
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (config_path, resume) = match &a.resume {
        Some(dir) => (dir.join(CONFIG), Some(load_checkpoint(&dir.join(CHECKPOINT))?)),
        None => (a.config.clone().expect("clap enforces --config"), None),
    };
    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(seed) = a.seed {
        if resume.is_some() && seed != cfg.train.seed {
            return Err(Error::Config("--seed cannot change the seed of a resumed run".into()).into());
        }
        cfg.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(root) = a.data_root {
        cfg.data.root = root;
    }
    cfg.train.validate()?;
    let explicit = a.resume.as_deref().or(a.output.run_dir.as_deref());
    let mut run = RunDir::create("train", &a.output.out, explicit, cfg.train.seed, Some(&config_path))?;

    let spec = cfg.train.embedder_spec();
    let data = cfg.data.load(cfg.data.train_split, spec.input_size)?;
    let dataset_id = cfg.data.dataset_id(cfg.data.train_split);
    let state = match resume {
        Some(ck) => {
            if ck.meta.spec() != spec {
                return Err(Error::Config("checkpoint architecture differs from the run config".into()).into());
            }
            eprintln!("resuming after epoch {}", ck.meta.train_epochs);
            ck.into_state(cfg.train.adam)
        }
        None => TrainState::new(&cfg.train)?,
    };
    let config_copy = run.file(CONFIG);
    fs::write(&config_copy, cfg.to_toml()?)?;
    run.record(config_copy);

    let mut meta = CheckpointMeta::for_model(&state.model, dataset_id);
    meta.config = Some(serde_json::to_value(&cfg)?);
    let mut observer = RunObserver {
        log: open_log(&run.file(LOG), state.epochs_done)?,
        checkpoint: run.file(CHECKPOINT),
        meta,
        stage: "train",
    };
    let state = train_until(state, data.as_training(), &cfg.train, cfg.train.epochs, &mut observer)?;
    observer.log.flush()?;
    if !run.file(CHECKPOINT).exists() {
        save_checkpoint(&run.file(CHECKPOINT), &observer.meta, &state.model, Some(&state.optimizer))?;
    }
    run.record(run.file(CHECKPOINT));
    run.record(run.file(LOG));
    write_loss_curve(&mut run, &state)?;
    run.write_json("summary.json", &training_summary(&state))?;
    run.finish()?;
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(root) = a.data_root {
        cfg.data.root = root;
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut run = RunDir::create("finetune", &a.output.out, a.output.run_dir.as_deref(), cfg.train.seed, Some(&a.config))?;
    let data = cfg.data.load(cfg.data.train_split, ck.meta.input_size)?;
    let dataset_id = cfg.data.dataset_id(cfg.data.train_split);

    let mut meta = ck.meta.clone();
    meta.dataset_id = dataset_id;
    meta.history.clear();
    meta.config = Some(serde_json::to_value(&cfg)?);
    let mut observer =
        RunObserver { log: open_log(&run.file(LOG), 0)?, checkpoint: run.file(CHECKPOINT), meta, stage: "finetune" };
    let state = finetune_unsupervised(ck.model, data.as_training(), &cfg.train, a.epochs, &mut observer)?;
    observer.log.flush()?;
    if a.epochs == 0 {
        let mut meta = observer.meta.clone();
        meta.provenance.push(ProvenanceStep { stage: "finetune".into(), dataset_id: meta.dataset_id.clone(), epochs: 0 });
        save_checkpoint(&run.file(CHECKPOINT), &meta, &state.model, None)?;
    }
    run.record(run.file(CHECKPOINT));
    run.record(run.file(LOG));
    write_loss_curve(&mut run, &state)?;
    run.write_json("summary.json", &training_summary(&state))?;
    run.finish()?;
    Ok(())
}

fn eval_inputs(a: &EvalArgs) -> Result<(DataConfig, EvalConfig, WarpConfig)> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let mut data = match (&cfg, &a.dataset) {
        (Some(c), _) => c.data.clone(),
        (None, Some(root)) => DataConfig {
            source: DataSource::Arm,
            root: root.clone(),
            name: None,
            train_split: dve_core::datasets::Split::Train,
            test_split: dve_core::datasets::Split::Test,
        },
        (None, None) => return Err(Error::Config("either --config or --dataset is required".into()).into()),
    };
    if let Some(root) = &a.dataset {
        data.root = root.clone();
    }
    if let Some(face) = &a.face {
        data.source = DataSource::Faces;
        data.name = Some(face.clone());
    }
    let mut eval = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
    if let Some(n) = a.n_pairs {
        eval.n_pairs = n;
    }
    if let Some(s) = a.seed {
        eval.seed = s;
    }
    if let Some(counts) = &a.counts {
        eval.counts = counts.iter().map(|c| c.parse::<AnnotationCount>()).collect::<dve_core::Result<_>>()?;
    }
    if let Some(n) = a.n_seeds {
        eval.n_seeds = n;
    }
    let warp = cfg.map(|c| c.train.warp).unwrap_or_default();
    Ok((data, eval, warp))
}

/// Landmark pair normalizing regression errors: the eyes for faces, the
/// first and last keypoint otherwise.
fn normalizer(data: &DataConfig, dataset: &Dataset) -> Result<(usize, usize)> {
    Ok(match data.source {
        DataSource::Faces => data.face_name()?.eye_indices(),
        DataSource::Arm => {
            let k = dataset.items.first().and_then(|a| a.landmarks.as_ref()).map_or(0, |l| l.len());
            if k < 2 {
                bail!(Error::Data("regression needs at least two landmarks".into()));
            }
            (0, k - 1)
        }
    })
}

fn face_label(data: &DataConfig) -> String {
    match data.source {
        DataSource::Arm => format!("arm:{}", data.root.display()),
        DataSource::Faces => data.face_name().map(FaceName::as_str).unwrap_or("?").to_string(),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (data_cfg, eval_cfg, warp) = eval_inputs(&a)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let size = ck.meta.input_size;
    let mut run = RunDir::create("eval", &a.output.out, a.output.run_dir.as_deref(), eval_cfg.seed, a.config.as_deref())?;
    let load = |split| -> Result<Dataset> {
        Ok(data_cfg.load(split, size)?.to_dataset(&face_label(&data_cfg), split))
    };
    let test = load(data_cfg.test_split)?;
    let base = json!({
        "checkpoint": a.checkpoint,
        "dataset": face_label(&data_cfg),
        "split": data_cfg.test_split.as_str(),
        "seed": eval_cfg.seed,
    });
    let mut summary = base.as_object().cloned().unwrap_or_default();
    match a.protocol {
        Protocol::MatchSame | Protocol::MatchDiff => {
            let protocol =
                if a.protocol == Protocol::MatchSame { MatchProtocol::SameIdentity } else { MatchProtocol::DifferentIdentity };
            let mut rng = ChaCha8Rng::seed_from_u64(eval_cfg.seed);
            let report = matching_benchmark(&ck.model, &test, eval_cfg.n_pairs, protocol, &warp, &mut rng)?;
            let csv = run.file("pairs.csv");
            report.write_csv(&csv)?;
            run.record(csv);
            summary.insert("protocol".into(), json!(protocol.as_str()));
            summary.insert("n_pairs".into(), json!(eval_cfg.n_pairs));
            summary.insert("mean_error_px".into(), json!(report.mean_error));
            summary.insert("frame".into(), json!(format!("preprocessed {}x{}", report.frame.0, report.frame.1)));
            if let Some(m) = report.mean_error {
                println!("{} mean error: {m:.4} px", protocol.as_str());
            }
        }
        Protocol::Regress => {
            let train = load(data_cfg.train_split)?;
            let eyes = normalizer(&data_cfg, &test)?;
            let head = train_regressor(&ck.model, &train, &eval_cfg.head)?;
            let path = run.file("predictions.csv");
            let mut f = BufWriter::new(File::create(&path)?);
            writeln!(f, "id,iod_error")?;
            let mut errors = Vec::new();
            for item in &test.items {
                let gt = item.landmarks.as_ref().ok_or_else(|| Error::Data(format!("`{}` has no landmarks", item.id)))?;
                let pred = head.predict(&ck.model.embed(&[&item.image])?[0])?;
                let e = iod_error(&pred, gt, eyes.0, eyes.1)?;
                writeln!(f, "{},{e:.6}", item.id)?;
                errors.push(e);
            }
            f.flush()?;
            run.record(path);
            let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
            summary.insert("protocol".into(), json!("regress"));
            summary.insert("train_images".into(), json!(train.len()));
            summary.insert("mean_iod_error".into(), json!(mean));
            summary.insert("normalizer".into(), json!([eyes.0, eyes.1]));
            summary.insert("head".into(), serde_json::to_value(&eval_cfg.head)?);
            println!("regression error: {mean:.4} % of normalizing distance");
        }
        Protocol::Limited => {
            let train = load(data_cfg.train_split)?;
            let eyes = normalizer(&data_cfg, &test)?;
            let rows = limited_annotation_study(
                &ck.model,
                &train,
                &test,
                &eval_cfg.counts,
                eval_cfg.n_seeds,
                &eval_cfg.head,
                eyes,
            )?;
            for p in write_limited_report(&rows, &run.path)? {
                run.record(p);
            }
            let table: Vec<_> =
                rows.iter().map(|r| json!({"count": r.count.to_string(), "mean": r.mean, "std": r.std})).collect();
            for r in &rows {
                println!("{:>5}: {:.4} ± {:.4}", r.count.to_string(), r.mean, r.std);
            }
            summary.insert("protocol".into(), json!("limited"));
            summary.insert("n_seeds".into(), json!(eval_cfg.n_seeds));
            summary.insert("rows".into(), json!(table));
        }
    }
    run.write_json("summary.json", &summary)?;
    run.finish()?;
    Ok(())
}

fn parse_points(text: &str, size: usize) -> Result<Vec<Point>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (x, y) = s.split_once(',').ok_or_else(|| Error::Config(format!("bad point `{s}`, expected x,y")))?;
            let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad coordinate `{v}`")));
            Ok(Point::new(to_normalized(parse(x)?, size), to_normalized(parse(y)?, size)))
        })
        .collect()
}

fn palette(k: usize, n: usize) -> [f32; 3] {
    let h = 6.0 * k as f32 / n.max(1) as f32;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn draw_marker(img: &mut Image, cx: f64, cy: f64, radius: f64, color: [f32; 3]) {
    let r_out = radius + 1.0;
    let (y0, y1) = ((cy - r_out).floor().max(0.0) as usize, (cy + r_out).ceil().min(img.height as f64 - 1.0) as usize);
    let (x0, x1) = ((cx - r_out).floor().max(0.0) as usize, (cx + r_out).ceil().min(img.width as f64 - 1.0) as usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            if d <= radius {
                img.set_pixel(y, x, color);
            } else if d <= r_out {
                img.set_pixel(y, x, [0.0, 0.0, 0.0]);
            }
        }
    }
}

pub fn visualize(a: VisualizeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let s = ck.meta.input_size;
    let load = |p: &Path| -> Result<Image> {
        let img = Image::load(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(if img.height == s && img.width == s { img } else { img.resize(s, s) })
    };
    let (img_a, img_b) = (load(&a.image_a)?, load(&a.image_b)?);
    let queries = match &a.points {
        Some(text) => parse_points(text, s)?,
        None => (0..a.n_points)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / a.n_points as f64;
                Point::new(0.5 * t.cos(), 0.5 * t.sin())
            })
            .collect(),
    };
    if queries.is_empty() {
        return Err(Error::Config("no query points".into()).into());
    }
    let maps = ck.model.embed(&[&img_a, &img_b])?;
    let matches = nn_match(&maps[0], &maps[1], &queries, true)?;
    let mut run = RunDir::create("visualize", &a.output.out, a.output.run_dir.as_deref(), 0, None)?;

    let gap = 4;
    let mut fig = Image::filled(s, 2 * s + gap, [1.0, 1.0, 1.0]);
    for y in 0..s {
        for x in 0..s {
            fig.set_pixel(y, x, img_a.pixel(y, x));
            fig.set_pixel(y, s + gap + x, img_b.pixel(y, x));
        }
    }
    let radius = (s as f64 / 40.0).max(1.5);
    let csv = run.file("matches.csv");
    let mut f = BufWriter::new(File::create(&csv)?);
    writeln!(f, "point,query_x,query_y,match_x,match_y")?;
    for (k, (q, m)) in queries.iter().zip(&matches).enumerate() {
        let color = palette(k, queries.len());
        let (qx, qy) = (to_pixel(q.x, s), to_pixel(q.y, s));
        let (mx, my) = (to_pixel(m.x, s), to_pixel(m.y, s));
        draw_marker(&mut fig, qx, qy, radius, color);
        draw_marker(&mut fig, (s + gap) as f64 + mx, my, radius, color);
        writeln!(f, "{k},{qx:.3},{qy:.3},{mx:.3},{my:.3}")?;
    }
    f.flush()?;
    run.record(csv);
    let png = run.file("figure.png");
    fig.save_png(&png)?;
    run.record(png);
    run.finish()?;
    Ok(())
}

//! Everything behind the command-line binary: the run config file, dotted
//! key overrides, and the five commands (train, track, eval, gradcheck,
//! synth). The binary itself only parses flags and forwards here.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::load_model_into;
use crate::error::{Error, Result};
use crate::evaluation::{
    load_boxes, load_sequence, save_boxes, EvalReport, Sequence, SequenceEval, SynthSpec,
};
use crate::gam::{BiasFlags, DwXcorrOp, GamConfig, GamOp, GamParams, MaskingPolicy, SelectionMode};
use crate::geometry::{BoundingBox, CropSpec, GridSpec, TemplateROI};
use crate::head::{assign_labels, Head, HeadConfig, HeadLossOp, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    grad_check, BatchNorm, BatchNormOp, Conv1x1, Conv1x1Op, GradCheckReport, MaskedSoftmaxOp,
    Mode, Tensor,
};
use crate::tracker::{TrackConfig, TrackerState};
use crate::training::{train, PairSource, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Where runs read and write their artifacts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoints: PathBuf,
    pub data: PathBuf,
    pub results: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            checkpoints: "checkpoints".into(),
            data: "data".into(),
            results: "results".into(),
        }
    }
}

/// The single config file governing a run. Every knob has a default, so an
/// empty file is a valid config, and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for model initialization (data sampling uses train.seed).
    pub seed: u64,
    pub model: ModelConfig,
    pub crop: CropSpec,
    pub train: TrainConfig,
    pub track: TrackConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.crop.validate()?;
        self.train.validate()?;
        self.track.validate()?;
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    match raw {
        "true" => toml::Value::Boolean(true),
        "false" => toml::Value::Boolean(false),
        _ => toml::Value::String(raw.to_string()),
    }
}

/// Applies one "dotted.key=value" override to a fully expanded config
/// table. The key must already exist (every key does once defaults are
/// expanded), and integers are coerced to floats where the config holds a
/// float.
fn set_dotted(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{assignment}' is not of the form key=value"))
    })?;
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            Error::Config(format!("'{}' is not a config section", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            let existing = table.get(*part).ok_or_else(|| {
                Error::Config(format!("unknown config key '{path}'"))
            })?;
            let mut parsed = parse_scalar(raw.trim());
            if existing.is_float() {
                if let toml::Value::Integer(n) = parsed {
                    parsed = toml::Value::Float(n as f64);
                }
            }
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table.get_mut(*part).ok_or_else(|| {
            Error::Config(format!("unknown config section '{}'", parts[..=i].join(".")))
        })?;
    }
    unreachable!("split('.') yields at least one part");
}

/// Loads the config file (or pure defaults), expands defaults so every key
/// is present, applies --set overrides, and validates the result.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base: RunConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut value = toml::Value::try_from(&base)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    for ov in overrides {
        set_dotted(&mut value, ov)?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Full TOML rendering with every default spelled out; reloading this text
/// reproduces the identical config.
pub fn dump_run_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config dump: {e}")))
}

/// Loads every sequence directory under `data` (any subdirectory with a
/// groundtruth.txt), sorted by name; `data` itself may also be a single
/// sequence.
pub fn load_sequence_dirs(data: &Path) -> Result<Vec<Sequence>> {
    if data.join("groundtruth.txt").exists() {
        return Ok(vec![load_sequence(data)?]);
    }
    let mut dirs: Vec<PathBuf> = Vec::new();
    let listing = fs::read_dir(data).map_err(|e| {
        Error::InvalidArgument(format!("cannot read data directory {}: {e}", data.display()))
    })?;
    for entry in listing {
        let p = entry?.path();
        if p.is_dir() && p.join("groundtruth.txt").exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no sequences under {} (expected subdirectories with groundtruth.txt)",
            data.display()
        )));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Trains a fresh model on the sequences under paths.data and writes
/// checkpoints plus the metric log into paths.checkpoints.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let sequences = load_sequence_dirs(&cfg.paths.data)?;
    let sources: Vec<&dyn PairSource> =
        sequences.iter().map(|s| s as &dyn PairSource).collect();
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    train(&mut model, &sources, &cfg.crop, &cfg.train, &cfg.paths.checkpoints)
}

/// Runs the tracker over one sequence from its first ground-truth box.
/// Writes one "x,y,w,h" line per frame (the first line is the init box)
/// and returns the results path. `overlay` optionally receives each frame
/// with the predicted box burned in.
pub fn cmd_track(
    cfg: &RunConfig,
    sequence_dir: &Path,
    checkpoint: &Path,
    results_out: Option<&Path>,
    overlay: Option<&Path>,
) -> Result<PathBuf> {
    let seq = load_sequence(sequence_dir)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    load_model_into(checkpoint, &mut model)?;

    let mut state = TrackerState::init(&model, &seq.frames[0], &seq.gt[0], cfg.crop, cfg.track)?;
    let mut boxes = Vec::with_capacity(seq.len());
    boxes.push(state.current_box);
    for frame in &seq.frames[1..] {
        boxes.push(state.update(&model, frame)?);
    }

    let results_path = match results_out {
        Some(p) => p.to_path_buf(),
        None => {
            fs::create_dir_all(&cfg.paths.results)?;
            cfg.paths.results.join(format!("{}.txt", seq.name))
        }
    };
    if let Some(parent) = results_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_boxes(&results_path, &boxes)?;

    if let Some(dir) = overlay {
        fs::create_dir_all(dir)?;
        for (i, (frame, b)) in seq.frames.iter().zip(&boxes).enumerate() {
            let mut painted = frame.clone();
            painted.draw_box(b, [0, 255, 0]);
            painted.save(&dir.join(format!("{:06}.png", i + 1)))?;
        }
    }
    Ok(results_path)
}

fn eval_one(data: &Path, results_file: &Path) -> Result<SequenceEval> {
    let name = results_file
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| {
            Error::InvalidArgument(format!("odd results filename {}", results_file.display()))
        })?;
    let pred = load_boxes(results_file)?;
    let gt = load_boxes(&data.join(name).join("groundtruth.txt"))?;
    SequenceEval::new(name, &pred, &gt)
}

/// Scores results files against their ground truth. `results` may be a
/// single file (its stem naming the sequence under `data`) or a directory
/// of such files. Sequences are scored in parallel when workers > 1.
pub fn cmd_eval(data: &Path, results: &Path, workers: usize) -> Result<EvalReport> {
    let mut files: Vec<PathBuf> = if results.is_dir() {
        fs::read_dir(results)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
            .collect()
    } else {
        vec![results.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .txt results files under {}",
            results.display()
        )));
    }

    let workers = workers.max(1).min(files.len());
    let mut evals: Vec<Option<Result<SequenceEval>>> = Vec::new();
    evals.resize_with(files.len(), || None);
    std::thread::scope(|scope| {
        for (chunk_files, chunk_out) in files
            .chunks(files.len().div_ceil(workers))
            .zip(evals.chunks_mut(files.len().div_ceil(workers)))
        {
            scope.spawn(move || {
                for (f, out) in chunk_files.iter().zip(chunk_out.iter_mut()) {
                    *out = Some(eval_one(data, f));
                }
            });
        }
    });
    let seqs: Vec<SequenceEval> = evals
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<_>>()?;
    EvalReport::from_sequences(seqs)
}

/// The finite-difference sweep behind `gatrack gradcheck`: every
/// differentiable block at tol 1e-4, three seeds each, tiny instances so
/// the full sweep stays quick.
pub fn cmd_gradcheck(seed: u64) -> Result<Vec<GradCheckReport>> {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut reports = Vec::new();
    for k in 0..3u64 {
        let s = seed ^ (0x9E37_79B9 * (k + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(s);

        let conv = Conv1x1Op(Conv1x1::new(3, 4, true, &mut rng));
        let x = Tensor::randn(&[5, 4, 3], 1.0, &mut rng);
        reports.push(grad_check(&conv, &[x], EPS, TOL, s)?);

        let bn = BatchNormOp {
            bn: BatchNorm::new(3),
            mode: Mode::Train,
        };
        let x = Tensor::randn(&[4, 5, 3], 1.0, &mut rng);
        reports.push(grad_check(&bn, &[x], EPS, TOL, s)?);

        let sm = MaskedSoftmaxOp {
            mask: vec![true, true, false, true, true],
        };
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        reports.push(grad_check(&sm, &[x], EPS, TOL, s)?);

        let gam = GamOp {
            params: GamParams::new(3, 4, BiasFlags::default(), &mut rng),
            roi: TemplateROI::centered(2, 4, 4)?,
            cfg: GamConfig {
                selection: SelectionMode::ZeroMask,
                masking: MaskingPolicy::Exclude,
            },
            mode: Mode::Train,
        };
        let ft = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let fsr = Tensor::randn(&[5, 5, 3], 1.0, &mut rng);
        reports.push(grad_check(&gam, &[ft, fsr], EPS, TOL, s)?);

        let ft = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let fsr = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        reports.push(grad_check(&DwXcorrOp, &[ft, fsr], EPS, TOL, s)?);

        let head = Head::new(
            4,
            &HeadConfig {
                hidden: 4,
                tower_depth: 1,
                centerness: true,
            },
            &mut rng,
        )?;
        let grid = GridSpec::centered(47, 3, 8);
        let gt = BoundingBox::new(23.5, 23.5, 20.0, 20.0)?;
        let op = HeadLossOp {
            head,
            labels: assign_labels(&gt, &grid),
            weights: LossWeights::default(),
            mode: Mode::Train,
        };
        let resp = Tensor::rand_uniform(&[3, 3, 4], 0.1, 1.0, &mut rng);
        reports.push(grad_check(&op, &[resp], EPS, TOL, s)?);
    }
    Ok(reports)
}

/// Renders a synthetic sequence into a directory tree consumable by
/// `track` and `train`. Returns the directory and whether the trajectory
/// had to be clipped at a canvas edge.
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> Result<(PathBuf, bool)> {
    let out = crate::evaluation::synth_sequence(spec)?;
    let dir = out_dir.join(&out.sequence.name);
    out.sequence.save(&dir)?;
    Ok((dir, out.clipped))
}

/// One aligned text row per gradcheck report.
pub fn format_gradcheck_table(reports: &[GradCheckReport]) -> String {
    let mut out = String::from("op                     max_rel_err      tol     verdict\n");
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>11.3e} {:>8.0e}     {}\n",
            r.op,
            r.max_rel_err,
            r.tol,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    out
}

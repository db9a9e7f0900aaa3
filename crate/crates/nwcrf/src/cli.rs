use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nwcrf_core::crf_classic::count_pairwise_edges;
use nwcrf_core::metrics::{evaluate, MetricsReport, METRIC_NAMES};
use nwcrf_core::neural_crf::{CrfOptimConfig, CrfOptimization};
use nwcrf_core::optim::OptimizerState;
use nwcrf_core::oracle::{brute_force_edges, crf_block_gradients, dense_equivalence, ppm_gradients, shift_connectivity, silog_gradients, worst};
use nwcrf_core::synth::{upsample_depth, DepthSample};
use nwcrf_core::train::{predict_full, TrainEvent};
use nwcrf_core::{partition_windows, train, Initializer, Model, ParamStore, Tape, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{parse_override, RunConfig};
use crate::dataset::{read_index, write_samples};
use crate::error::CliError;
use crate::netpbm::{read_ppm, write_depth_pgm, DEPTH_SCALE};

pub const CHECKPOINT_FILE: &str = "checkpoint.nwcf";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "nwcrf", version, about = "Monocular depth estimation with neural window fully-connected CRFs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, loss log and validation metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint, including its optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Depth cap in meters applied before the metrics.
        #[arg(long)]
        cap: Option<f64>,
        /// Metrics CSV path (default: `<output>/eval_<split>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict depth for one PPM image and write a 16-bit PGM.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reference checks on a small grid.
    Check {
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic dataset as PPM/PGM pairs with index files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    raw.iter().map(|s| parse_override(s)).collect()
}

fn load_config(path: Option<&Path>, raw: &[String]) -> Result<RunConfig, CliError> {
    let ov = overrides(raw)?;
    match path {
        Some(p) => RunConfig::load(p, &ov),
        None => RunConfig::from_pairs(&[], &ov),
    }
}

/// Training and validation samples from index files or the generator.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<DepthSample>, Vec<DepthSample>), CliError> {
    let d = &cfg.data;
    let (mut train, mut val) = if d.train_index.is_none() || d.val_index.is_none() { d.spec.generate()? } else { (vec![], vec![]) };
    if let Some(p) = &d.train_index {
        train = read_index(p)?;
    }
    if let Some(p) = &d.val_index {
        val = read_index(p)?;
    }
    Ok((train, val))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(format!("cannot write {}", path.display()), e)
}

/// Metrics CSV with the fixed header; `note` becomes a leading comment.
pub fn metrics_csv(rows: &[MetricsReport], note: &str) -> String {
    let mut s = format!("# {note}; sq_rel = mean((pred - gt)^2 / gt)\n{}\n", METRIC_NAMES.join(","));
    for r in rows {
        let vals: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

/// Mean metrics over `samples`, spreading the work over `threads` threads
/// and merging in sample order.
pub fn evaluate_parallel(model: &Model, samples: &[DepthSample], cap: f64, threads: usize) -> Result<MetricsReport, CliError> {
    if samples.is_empty() {
        return Err(CliError::Input("dataset is empty".into()));
    }
    let one = |s: &DepthSample| -> Result<MetricsReport, CliError> { Ok(evaluate(&predict_full(model, &s.image)?, &s.depth, &s.valid, cap)?) };
    let threads = threads.clamp(1, samples.len());
    let reports: Vec<MetricsReport> = if threads == 1 {
        samples.iter().map(one).collect::<Result<_, _>>()?
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(one).collect::<Result<Vec<_>, _>>())).collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, CliError>(all)
        })?
    };
    Ok(MetricsReport::mean(&reports).expect("non-empty"))
}

/// Thread count from `NWCRF_THREADS`; sequential when unset or invalid.
pub fn eval_threads() -> usize {
    std::env::var("NWCRF_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let (train_set, val_set) = load_data(cfg)?;
    let (mut model, mut optimizer) = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let opt = ck.optimizer.unwrap_or_else(|| OptimizerState::new(ck.model.params.tensors()));
            (ck.model, opt)
        }
        None => {
            let model = Model::new(cfg.model.clone())?;
            let opt = OptimizerState::new(model.params.tensors());
            (model, opt)
        }
    };
    create_dir(&cfg.output)?;
    let loss_path = cfg.output.join(LOSS_FILE);
    let mut loss_log = create(&loss_path)?;
    writeln!(loss_log, "step,lr,loss").map_err(write_err(&loss_path))?;
    let mut rows = Vec::new();
    let mut steps_evaluated = Vec::new();
    let mut io_failure = None;
    let result = train(&mut model, &mut optimizer, &cfg.train, &train_set, &val_set, |event| match event {
        TrainEvent::Step(l) => {
            if let Err(e) = writeln!(loss_log, "{},{},{}", l.step, l.lr, l.loss) {
                io_failure.get_or_insert(e);
            }
            if l.step % 100 == 0 {
                eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", l.step, l.lr, l.loss);
            }
        }
        TrainEvent::Validation { step, report } => {
            eprintln!("validation after {step} steps: abs_rel {:.4}  rmse {:.4}  d1 {:.4}", report.abs_rel, report.rmse, report.delta1);
            rows.push(*report);
            steps_evaluated.push(step);
        }
    });
    loss_log.flush().map_err(write_err(&loss_path))?;
    if let Some(e) = io_failure {
        return Err(write_err(&loss_path)(e));
    }
    result?;
    let done = optimizer.step as usize;
    if !val_set.is_empty() && steps_evaluated.last() != Some(&cfg.train.steps) {
        let report = evaluate_parallel(&model, &val_set, cfg.train.eval_cap, eval_threads())?;
        eprintln!("final validation: abs_rel {:.4}  rmse {:.4}  d1 {:.4}", report.abs_rel, report.rmse, report.delta1);
        rows.push(report);
        steps_evaluated.push(cfg.train.steps);
    }
    let ck_path = cfg.output.join(CHECKPOINT_FILE);
    checkpoint::save(&ck_path, &Checkpoint { model, optimizer: Some(optimizer) })?;
    let steps: Vec<String> = steps_evaluated.iter().map(ToString::to_string).collect();
    let note = format!("validation after steps {} ({done} optimizer steps in total)", steps.join(" "));
    let metrics_path = cfg.output.join(METRICS_FILE);
    fs::write(&metrics_path, metrics_csv(&rows, &note)).map_err(write_err(&metrics_path))?;
    Ok(())
}

pub fn cmd_eval(ck_path: &Path, cfg: &RunConfig, split: Split, cap: f64, out: &Path) -> Result<MetricsReport, CliError> {
    let ck = checkpoint::load(ck_path)?;
    let (train_set, val_set) = load_data(cfg)?;
    let samples = if split == Split::Train { &train_set } else { &val_set };
    let report = evaluate_parallel(&ck.model, samples, cap, eval_threads())?;
    let split_name = if split == Split::Train { "train" } else { "val" };
    let csv = metrics_csv(&[report], &format!("{split_name} split, {} samples, cap {cap} m", samples.len()));
    print!("{csv}");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, csv).map_err(write_err(out))?;
    Ok(report)
}

fn pad_image(image: &Tensor, to_h: usize, to_w: usize) -> (Tensor, usize, usize) {
    let [h, w, _] = *image.extents() else { unreachable!() };
    let (top, left) = ((to_h - h) / 2, (to_w - w) / 2);
    let padded = Tensor::from_fn(&[to_h, to_w, 3], |i| {
        let (y, x, c) = (i / (to_w * 3), (i / 3) % to_w, i % 3);
        if y < top || y >= top + h || x < left || x >= left + w {
            0.0
        } else {
            image.at(&[y - top, x - left, c])
        }
    });
    (padded, top, left)
}

/// Full-resolution depth for an arbitrary-size image: zero-pad
/// symmetrically to multiples of 32, predict, upsample and crop.
pub fn infer_depth(model: &Model, image: &Tensor) -> Result<Tensor, CliError> {
    let [h, w, 3] = *image.extents() else {
        return Err(CliError::Input(format!("image must be H×W×3, got {:?}", image.extents())));
    };
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    let (padded, top, left) = pad_image(image, ph, pw);
    let full = upsample_depth(&model.predict(&padded)?, 4);
    Ok(Tensor::from_fn(&[h, w], |i| full.at(&[i / w + top, i % w + left])))
}

pub fn cmd_infer(ck_path: &Path, image_path: &Path, out: &Path) -> Result<(), CliError> {
    let ck = checkpoint::load(ck_path)?;
    let image = read_ppm(image_path)?;
    let depth = infer_depth(&ck.model, &image)?;
    let saturated = write_depth_pgm(out, &depth)?;
    if saturated > 0 {
        eprintln!("warning: {saturated} pixels exceed {:.2} m and were saturated", 65535.0 / DEPTH_SCALE);
    }
    Ok(())
}

/// Outcome of the `check` command: printed lines and failed properties.
#[derive(Debug, Default)]
pub struct CheckReport {
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

impl CheckReport {
    fn record(&mut self, name: &str, passed: bool, detail: String) {
        self.lines.push(format!("{name}: {} ({detail})", if passed { "pass" } else { "FAIL" }));
        if !passed {
            self.failures.push(name.to_string());
        }
    }
}

fn measured_logits(rows: usize, cols: usize, n: usize) -> Result<usize, CliError> {
    let cfg = CrfOptimConfig { feature_channels: 2, heads: 1, head_dim: 2, window_size: n, mlp_ratio: 1, scale_logits: true, qk_layer_norm: true };
    let mut store = ParamStore::new();
    let stage = CrfOptimization::new(&mut store, "count", cfg, &mut Initializer::new(0));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let f = tape.leaf(Tensor::zeros(&[rows, cols, 2]));
    let x = tape.leaf(Tensor::zeros(&[rows, cols, 2]));
    let (_, stats) = stage.pairwise(&mut tape, &p, f, x, &partition_windows(rows, cols, n, false)?)?;
    Ok(stats.logits_per_head)
}

pub fn run_checks(rows: usize, cols: usize, n: usize, seed: u64) -> Result<CheckReport, CliError> {
    if rows == 0 || cols == 0 || rows > 12 || cols > 12 {
        return Err(CliError::Input(format!("check grids must lie within 12×12, got {rows}×{cols}")));
    }
    if n == 0 || n > rows.min(cols) {
        return Err(CliError::Input(format!("window size {n} must lie in 1..={}", rows.min(cols))));
    }
    let mut report = CheckReport::default();
    let hw = (rows * cols) as u64;

    let dense = count_pairwise_edges(rows, cols, n, true)?;
    let enumerated = brute_force_edges(rows, cols, None);
    report.record("fully connected edges", dense == enumerated, format!("formula {dense}, enumerated {enumerated}"));
    let part = partition_windows(rows, cols, n, false)?;
    let enumerated = brute_force_edges(rows, cols, Some(&part));
    let logits = measured_logits(rows, cols, n)? as u64;
    match count_pairwise_edges(rows, cols, n, false) {
        Ok(windowed) => {
            let messages = logits - hw;
            report.record(
                "window edges",
                windowed == enumerated && windowed == messages,
                format!("formula {windowed}, enumerated {enumerated}, measured {logits} logits = {messages} messages + {hw} self"),
            );
        }
        Err(_) => report.lines.push(format!(
            "window edges: n/a (window {n} does not tile {rows}×{cols}; enumerated {enumerated}, measured {logits} logits with padding)"
        )),
    }

    if n >= rows && n >= cols {
        let diff = dense_equivalence(rows, cols, n, seed)?;
        report.record("dense equivalence", diff < 1e-10, format!("max difference {diff:.3e}"));
    } else {
        report.lines.push(format!("dense equivalence: skipped ({rows}×{cols} spans several {n}×{n} windows)"));
    }

    let c = shift_connectivity(rows, cols, n, seed)?;
    report.record(
        "shift connectivity",
        c.failures.is_empty(),
        if c.failures.is_empty() {
            format!("{} neighbour pairs, smallest weight {:.3e}", c.pairs, c.min_weight)
        } else {
            format!("{} of {} pairs unconnected, first {:?}", c.failures.len(), c.pairs, c.failures[0])
        },
    );

    for (name, errors) in [
        ("crf block gradients", crf_block_gradients(seed, None)?),
        ("ppm head gradients", ppm_gradients(seed, None)?),
        ("silog gradients", silog_gradients(seed)?),
    ] {
        let w = worst(&errors);
        report.record(name, w < GRADIENT_TOLERANCE, format!("{} tensors, worst relative error {w:.3e}", errors.len()));
    }
    Ok(report)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (train, val) = cfg.data.spec.generate()?;
    for (name, samples) in [("train", &train), ("val", &val)] {
        let dir = out.join(name);
        create_dir(&dir)?;
        let lines = write_samples(&dir, name, samples)?;
        let index = dir.join("index.txt");
        let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&index, body).map_err(write_err(&index))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, steps, output, resume, overrides: raw } => {
            let mut cfg = load_config(Some(&config), &raw)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            cmd_train(&cfg, resume.as_deref())
        }
        Command::Eval { checkpoint, config, split, cap, out, overrides: raw } => {
            let cfg = load_config(config.as_deref(), &raw)?;
            let cap = cap.unwrap_or(cfg.eval_cap);
            if !(cap > nwcrf_core::metrics::MIN_EVAL_DEPTH) {
                return Err(CliError::config("--cap", format!("cap must exceed {} m", nwcrf_core::metrics::MIN_EVAL_DEPTH)));
            }
            let name = if split == Split::Train { "eval_train.csv" } else { "eval_val.csv" };
            let out = out.unwrap_or_else(|| cfg.output.join(name));
            cmd_eval(&checkpoint, &cfg, split, cap, &out).map(|_| ())
        }
        Command::Infer { checkpoint, image, out } => cmd_infer(&checkpoint, &image, &out),
        Command::Check { rows, cols, window, seed } => {
            let report = run_checks(rows, cols, window, seed)?;
            for line in &report.lines {
                println!("{line}");
            }
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::Check(report.failures.join(", ")))
            }
        }
        Command::Synth { config, out, overrides: raw } => cmd_synth(&load_config(config.as_deref(), &raw)?, &out),
    }
}

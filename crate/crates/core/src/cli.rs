//! Command-line surface: preprocessing, synthetic data, training, evaluation,
//! benchmarking and gradient checks.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{bench, BenchMode};
use crate::cloud_io::{grid_sample, load_cloud, write_cloud, Format, PointCloud};
use crate::error::{Error, Result};
use crate::lsnet::{evaluate, parse_config, train_to_dir, Evaluation};
use crate::synth::{synth_scene, DEFAULT_EXTENT};
use crate::verify::{render_results, run_gradcheck, CheckModule, DEFAULT_INSTANCES};

#[derive(Debug, Parser)]
#[command(name = "lsnet", version, about = "Point-cloud segmentation with local split attention pooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grid-sample a cloud, one centroid per occupied cell.
    Preprocess {
        /// Cell edge in meters.
        #[arg(long)]
        grid: f64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Write a labelled synthetic street scene.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4096)]
        points: usize,
        #[arg(long, default_value_t = DEFAULT_EXTENT)]
        extent: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score predicted labels against ground truth; prints CSV.
    Eval {
        /// One class id per line.
        #[arg(long)]
        preds: PathBuf,
        /// One class id per line, or a labelled point cloud.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        classes: usize,
    },
    /// Time one pooling block; prints a key=value report.
    Bench {
        #[arg(long, value_parser = parse_mode)]
        mode: BenchMode,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 16384)]
        points: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_module)]
        module: CheckModule,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<BenchMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_module(s: &str) -> std::result::Result<CheckModule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Binary for `.lspc`/`.bin`, ASCII otherwise.
pub fn format_for_output(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("lspc") | Some("bin") => Format::Binary,
        _ => Format::Ascii,
    }
}

fn load_any(path: &Path, classes: Option<usize>) -> Result<PointCloud> {
    load_cloud(path, Format::detect(path)?, classes)
}

/// Parses one unsigned id per nonblank line.
pub fn read_label_list(text: &str) -> Result<Vec<u32>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(row, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                row,
                msg: format!("expected a class id, found {l:?}"),
            })
        })
        .collect()
}

fn read_labels(path: &Path, classes: usize) -> Result<Vec<u32>> {
    if Format::detect(path)? == Format::Ascii {
        let text = fs::read_to_string(path)?;
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        if first.split_whitespace().count() == 1 {
            return read_label_list(&text);
        }
    }
    load_any(path, Some(classes))?
        .labels
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no labels", path.display())))
}

/// `oa,miou,iou_0,...` header and one value row.
pub fn evaluation_csv(e: &Evaluation) -> String {
    let mut s = String::from("oa,miou");
    for c in 0..e.iou.len() {
        write!(s, ",iou_{c}").unwrap();
    }
    write!(s, "\n{},{}", e.oa, e.miou).unwrap();
    for iou in &e.iou {
        match iou {
            Some(v) => write!(s, ",{v}").unwrap(),
            None => s.push_str(",nan"),
        }
    }
    s.push('\n');
    s
}

/// Executes a parsed command, returning what it prints on success.
pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Preprocess { grid, input, output } => {
            let cloud = load_any(&input, None)?;
            let sampled = grid_sample(&cloud, grid)?;
            write_cloud(&sampled, &output, format_for_output(&output))?;
            Ok(format!("points_in={}\npoints_out={}\n", cloud.len(), sampled.len()))
        }
        Command::Synth { seed, points, extent, out } => {
            let scene = synth_scene(seed, points, extent)?;
            write_cloud(&scene.cloud, &out, format_for_output(&out))?;
            Ok(format!("points={}\nseed={seed}\n", scene.cloud.len()))
        }
        Command::Train { config } => {
            let text = fs::read_to_string(&config)?;
            let (net, mut train) = parse_config(&text)?;
            // Relative paths are taken from the config file's directory.
            let base = config.parent().unwrap_or(Path::new("."));
            for p in &mut train.data {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if train.out_dir.is_relative() {
                train.out_dir = base.join(&train.out_dir);
            }
            let report = train_to_dir(net, train)?;
            let mut s = String::new();
            if let Some(last) = report.metrics.last() {
                writeln!(s, "epochs_run={}\nloss={}\nmiou={}", report.metrics.len(), last.loss, last.eval.miou).unwrap();
            }
            writeln!(s, "out_dir={}", report.out_dir.display()).unwrap();
            Ok(s)
        }
        Command::Eval { preds, labels, classes } => {
            let p = read_label_list(&fs::read_to_string(&preds)?)?;
            let l = read_labels(&labels, classes)?;
            Ok(evaluation_csv(&evaluate(&p, &l, classes)?))
        }
        Command::Bench { mode, k, points, dim, reps, seed } => Ok(bench(mode, k, points, dim, reps, seed)?.render()),
        Command::Gradcheck { module, instances, seed } => {
            let results = run_gradcheck(module, instances, seed)?;
            let text = render_results(&results);
            if results.iter().all(|r| r.passed()) {
                Ok(text)
            } else {
                Err(Error::InvalidArgument(format!("gradient check failed\n{text}")))
            }
        }
    }
}

/// Parses `args` (program name first) and runs. Exit codes: 0 success,
/// 1 runtime failure, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

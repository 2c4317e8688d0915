//! `annoclean` command-line interface.
//!
//! Exit status: 0 on success, 1 when the pipeline fails, 2 on unreadable or
//! malformed input. Outputs are rendered in memory and only written once the
//! whole command has succeeded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annoclean::annotations::{read_table, write_table_to};
use annoclean::config::Config;
use annoclean::evaluation::{evaluate, write_metrics_to, MetricsReport};
use annoclean::merging::{clean_detailed, merge_table};
use annoclean::nodule_scoring::{score_nodules, with_confidences, write_nodule_scores_to};
use annoclean::scoring::{read_score_history, score_annotators, write_score_history_to};
use annoclean::synthetic::{read_truth, scenario_with, write_truth_to};
use annoclean::{Error, RadiusMode, Scenario, Vec3};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "annoclean",
    version,
    about = "Clean noisy multi-annotator nodule annotations"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Log one line per pipeline stage.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Whether the size column of a single-size table holds radii or diameters.
    #[arg(long, global = true, value_name = "MODE", help_heading = "Input")]
    radius_mode: Option<RadiusMode>,

    #[arg(long, global = true, help_heading = "Annotator scoring")]
    iterations: Option<usize>,
    #[arg(long, global = true, help_heading = "Annotator scoring")]
    tol: Option<f64>,
    #[arg(long, global = true, help_heading = "Annotator scoring")]
    initial_score: Option<f64>,
    /// Voxel size for scoring, mm: one value or z,y,x.
    #[arg(long, global = true, value_parser = parse_vec3, value_name = "MM", help_heading = "Annotator scoring")]
    spacing: Option<Vec3>,
    #[arg(long, global = true, value_name = "MM", help_heading = "Annotator scoring")]
    pad: Option<f64>,

    #[arg(long, global = true, help_heading = "Nodule scoring")]
    alpha: Option<f64>,
    #[arg(long, global = true, value_name = "MM", help_heading = "Nodule scoring")]
    kernel_bandwidth_mm: Option<f64>,
    /// Do not divide neighbor support by the number of other annotators.
    #[arg(long, global = true, help_heading = "Nodule scoring")]
    raw_sum: bool,

    #[arg(long, global = true, help_heading = "Merging")]
    q: Option<f64>,
    #[arg(long, global = true, help_heading = "Merging")]
    threshold: Option<f64>,

    /// Voxel size for evaluation, mm: one value or z,y,x.
    #[arg(long, global = true, value_parser = parse_vec3, value_name = "MM", help_heading = "Evaluation")]
    eval_spacing: Option<Vec3>,

    #[arg(long, global = true, help_heading = "Synthetic data")]
    scenario: Option<Scenario>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    n_images: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_vec3, value_name = "MM", help_heading = "Synthetic data")]
    volume_mm: Option<Vec3>,
    #[arg(long, global = true, value_parser = parse_range::<usize>, value_name = "LO,HI", help_heading = "Synthetic data")]
    nodules_per_image: Option<(usize, usize)>,
    #[arg(long, global = true, value_parser = parse_range::<f64>, value_name = "LO,HI", help_heading = "Synthetic data")]
    diameter_mm: Option<(f64, f64)>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    false_count_max: Option<u32>,
    #[arg(long, global = true, value_parser = parse_vec3, value_name = "MM2", help_heading = "Synthetic data")]
    false_center_cov: Option<Vec3>,
    #[arg(long, global = true, value_parser = parse_range::<f64>, value_name = "LO,HI", help_heading = "Synthetic data")]
    false_diameter_range: Option<(f64, f64)>,
    #[arg(long, global = true, value_parser = parse_vec3, value_name = "MM2", help_heading = "Synthetic data")]
    loc_cov: Option<Vec3>,
    #[arg(long, global = true, value_name = "MM", help_heading = "Synthetic data")]
    diam_sigma: Option<f64>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    keep_prob: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Iteratively score annotators; writes iteration,annotator_id,score.
    ScoreDoctors {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score every nodule from annotator scores.
    ScoreNodules {
        input: PathBuf,
        /// Score history written by score-doctors; its last iteration is used.
        #[arg(long)]
        scores: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the input table with a confidence column, ready for merge.
        #[arg(long, value_name = "FILE")]
        table_out: Option<PathBuf>,
    },
    /// Merge overlapping nodules of a table with confidences, then filter.
    Merge {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Full pipeline: score annotators and nodules, merge, filter.
    Clean {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write <out>.doctor_scores.csv and <out>.nodule_scores.csv.
        #[arg(long)]
        emit_intermediates: bool,
    },
    /// Generate ground truth and a noisy table for a benchmark scenario.
    Simulate {
        #[arg(long)]
        truth_out: PathBuf,
        #[arg(long)]
        noisy_out: PathBuf,
    },
    /// Voxelwise metrics of a table against ground truth.
    Evaluate {
        candidate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run all four scenarios and print Markdown metric tables.
    Repro {
        /// Write the Markdown here instead of standard output.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("not a number: {p:?}")))
        .collect()
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    match parse_list::<f64>(s)?.as_slice() {
        [v] => Ok([*v; 3]),
        [z, y, x] => Ok([*z, *y, *x]),
        _ => Err("expected one value or z,y,x".into()),
    }
}

fn parse_range<T: std::str::FromStr + Copy>(s: &str) -> Result<(T, T), String> {
    match parse_list::<T>(s)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err("expected LO,HI".into()),
    }
}

impl Overrides {
    fn apply(&self, c: &mut Config) {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut c.radius_mode, self.radius_mode);
        set(&mut c.scoring.iterations, self.iterations);
        set(&mut c.scoring.tol, self.tol);
        set(&mut c.scoring.initial_score, self.initial_score);
        set(&mut c.scoring.spacing, self.spacing);
        set(&mut c.scoring.pad, self.pad);
        set(&mut c.nodule_scoring.alpha, self.alpha);
        set(&mut c.nodule_scoring.kernel_bandwidth_mm, self.kernel_bandwidth_mm);
        c.nodule_scoring.raw_sum |= self.raw_sum;
        set(&mut c.merging.q, self.q);
        set(&mut c.merging.threshold, self.threshold);
        set(&mut c.evaluation.spacing, self.eval_spacing);
        let s = &mut c.synthetic;
        set(&mut s.scenario, self.scenario);
        set(&mut s.n_images, self.n_images);
        set(&mut s.seed, self.seed);
        set(&mut s.volume_mm, self.volume_mm);
        set(&mut s.nodules_per_image, self.nodules_per_image);
        set(&mut s.diameter_mm, self.diameter_mm);
        set(&mut s.false_count_max, self.false_count_max);
        set(&mut s.false_center_cov, self.false_center_cov);
        set(&mut s.false_diameter_range, self.false_diameter_range);
        if self.loc_cov.is_some() {
            s.loc_cov = self.loc_cov;
        }
        if self.diam_sigma.is_some() {
            s.diam_sigma = self.diam_sigma;
        }
        if self.keep_prob.is_some() {
            s.keep_prob = self.keep_prob;
        }
    }
}

/// Files to write once a command has fully succeeded.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn render(&mut self, path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> annoclean::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.0.push((path.to_path_buf(), buf));
        Ok(())
    }

    /// Writes every file next to its target first, then renames them all.
    fn commit(self) -> annoclean::Result<()> {
        let io = |path: &Path, e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut staged = Vec::new();
        for (path, bytes) in &self.0 {
            let mut tmp = path.clone().into_os_string();
            tmp.push(".partial");
            let tmp = PathBuf::from(tmp);
            if let Err(e) = fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(io(path, e));
            }
            staged.push((tmp, path));
        }
        for (tmp, path) in staged {
            fs::rename(&tmp, path).map_err(|e| io(path, e))?;
        }
        Ok(())
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}.csv"))
}

fn run(cli: Cli) -> annoclean::Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::from_toml_file(path)?,
        None => Config::default(),
    };
    cli.overrides.apply(&mut config);
    config.validate()?;
    let mut out = Outputs::default();

    match &cli.command {
        Command::ScoreDoctors { input, out: path } => {
            let table = read_table(input, config.radius_mode)?;
            log::info!("read {} nodules from {}", table.nodules().len(), input.display());
            let state = score_annotators(&table, &config.scoring.into())?;
            log::info!(
                "scored {} annotators in {} iterations",
                state.scores.len(),
                state.iteration
            );
            out.render(path, |w| write_score_history_to(&state, w))?;
        }
        Command::ScoreNodules {
            input,
            scores,
            out: path,
            table_out,
        } => {
            let table = read_table(input, config.radius_mode)?;
            let state = read_score_history(scores)?;
            let confs = score_nodules(&table, &state.scores, &config.nodule_scoring)?;
            log::info!("scored {} nodules", confs.len());
            out.render(path, |w| write_nodule_scores_to(&confs, w))?;
            if let Some(t) = table_out {
                let scored = with_confidences(&table, &confs)?;
                out.render(t, |w| write_table_to(&scored, w))?;
            }
        }
        Command::Merge { input, out: path } => {
            let table = read_table(input, config.radius_mode)?;
            let merged = merge_table(&table, &config.merging)?;
            log::info!(
                "{} nodules merged into {}",
                table.nodules().len(),
                merged.nodules().len()
            );
            out.render(path, |w| write_table_to(&merged, w))?;
        }
        Command::Clean {
            input,
            out: path,
            emit_intermediates,
        } => {
            let table = read_table(input, config.radius_mode)?;
            log::info!("read {} nodules from {}", table.nodules().len(), input.display());
            let result = clean_detailed(&table, &config.clean_config())?;
            log::info!(
                "annotator scores after {} iterations, {} nodules kept",
                result.annotator_scores.iteration,
                result.cleaned.nodules().len()
            );
            out.render(path, |w| write_table_to(&result.cleaned, w))?;
            if *emit_intermediates {
                out.render(&sidecar(path, "doctor_scores"), |w| {
                    write_score_history_to(&result.annotator_scores, w)
                })?;
                out.render(&sidecar(path, "nodule_scores"), |w| {
                    write_nodule_scores_to(&result.nodule_confidences, w)
                })?;
            }
        }
        Command::Simulate { truth_out, noisy_out } => {
            let s = &config.synthetic;
            let (truth, table) = scenario_with(s.scenario, &s.truth(), &s.noise(s.scenario))?;
            log::info!(
                "{}: {} images, {} nodules",
                s.scenario,
                truth.images.len(),
                table.nodules().len()
            );
            out.render(truth_out, |w| write_truth_to(&truth, w))?;
            out.render(noisy_out, |w| write_table_to(&table, w))?;
        }
        Command::Evaluate {
            candidate,
            truth,
            out: path,
        } => {
            let table = read_table(candidate, config.radius_mode)?;
            let truth = read_truth(truth)?;
            let report = evaluate(&table, &truth, config.evaluation.spacing)?;
            println!("{report}");
            out.render(path, |w| write_metrics_to(&report, w))?;
        }
        Command::Repro { out: path } => {
            let md = repro(&config)?;
            match path {
                Some(p) => out.render(p, |w| {
                    w.extend_from_slice(md.as_bytes());
                    Ok(())
                })?,
                None => print!("{md}"),
            }
        }
    }
    out.commit()
}

fn repro(config: &Config) -> annoclean::Result<String> {
    let s = &config.synthetic;
    let mut rows: Vec<(Scenario, MetricsReport, MetricsReport)> = Vec::new();
    for name in Scenario::ALL {
        let (truth, noisy) = scenario_with(name, &s.truth(), &s.noise(name))?;
        let cleaned = clean_detailed(&noisy, &config.clean_config())?.cleaned;
        let before = evaluate(&noisy, &truth, config.evaluation.spacing)?;
        let after = evaluate(&cleaned, &truth, config.evaluation.spacing)?;
        log::info!(
            "{name}: IoU {:.3} -> {:.3}",
            before.aggregate.iou(),
            after.aggregate.iou()
        );
        rows.push((name, before, after));
    }
    let mut md = String::new();
    let _ = writeln!(md, "{} images per scenario, seed {}\n", s.n_images, s.seed);
    type Metric = fn(&MetricsReport) -> f64;
    let tables: [(&str, Metric); 3] = [
        ("Sensitivity", |r| r.aggregate.sensitivity()),
        ("1 - Specificity", |r| r.aggregate.one_minus_specificity()),
        ("IoU", |r| r.aggregate.iou()),
    ];
    for (title, metric) in tables {
        let _ = writeln!(md, "### {title}\n");
        let _ = writeln!(md, "| | A1 | A2 | B1 | B2 |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for (label, pick) in [("Noised", 0), ("Cleaned", 1)] {
            let cells: Vec<String> = rows
                .iter()
                .map(|(_, before, after)| {
                    let v = metric(if pick == 0 { before } else { after });
                    if title == "1 - Specificity" {
                        format!("{v:.2e}")
                    } else {
                        format!("{v:.3}")
                    }
                })
                .collect();
            let _ = writeln!(md, "| {label} | {} |", cells.join(" | "));
        }
        md.push('\n');
    }
    Ok(md)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use sae_core::data::{read_activations, write_activations, SuperpositionGenerator};
use sae_core::metrics::{evaluate, Histogram, MetricsReport};
use sae_core::models::checkpoint;
use sae_core::training::{train, DataSource, History};
use sae_core::{sparsemax, Matrix, Model, Sae};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_USED: &str = "config.used";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.tsv";
pub const REPORT: &str = "report.txt";
pub const HISTOGRAM: &str = "histogram.tsv";
pub const K_STAR: &str = "k_star.txt";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_matrix(path: &Path) -> Result<Matrix, CliError> {
    Ok(read_activations(path)?.read_all()?)
}

/// Training samples, ground truth and held-out samples of a synthetic
/// source, written as activation files.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let spec = config
        .data
        .synthetic
        .clone()
        .ok_or_else(|| CliError::Config("gen-data needs a [data.synthetic] section".into()))?;
    prepare_dir(out)?;
    write_file(&out.join(CONFIG_USED), config.to_toml()?)?;

    let mut train_gen = SuperpositionGenerator::with_stream(spec.clone(), 0)?;
    let (train_x, _) = train_gen.batch(config.train.total_samples);
    let mut eval_gen = SuperpositionGenerator::with_stream(spec, 1)?;
    let (eval_x, _) = eval_gen.batch(config.eval.samples);

    let files = [
        (out.join("train.act"), train_x),
        (out.join("eval.act"), eval_x),
        (
            out.join("ground_truth.act"),
            train_gen.ground_truth().transpose(),
        ),
    ];
    for (path, m) in &files {
        write_activations(path, m)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

fn train_source(config: &RunConfig) -> Result<Box<dyn DataSource>, CliError> {
    if let Some(spec) = &config.data.synthetic {
        return Ok(Box::new(SuperpositionGenerator::with_stream(
            spec.clone(),
            0,
        )?));
    }
    let path = config.data.path.as_ref().expect("validated data source");
    let reader = read_activations(path)?;
    if reader.meta().dim != config.model.d {
        return Err(CliError::Config(format!(
            "{} holds {}-dimensional rows but model.d = {}",
            path.display(),
            reader.meta().dim,
            config.model.d
        )));
    }
    Ok(Box::new(reader))
}

pub struct TrainOutcome {
    pub history: History,
    pub checkpoint: PathBuf,
}

pub fn train_cmd(config: &RunConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    prepare_dir(out)?;
    write_file(&out.join(CONFIG_USED), config.to_toml()?)?;
    let mut model = Model::init(config.model.clone(), config.train.seed)?;
    let mut data = train_source(config)?;
    let history_path = out.join(HISTORY);
    let mut log = Vec::new();
    let result = train(&mut model, data.as_mut(), &config.train, Some(&mut log));
    // Whatever was logged before a failure is still useful.
    write_file(&history_path, &log)?;
    let history = result?;
    let checkpoint = out.join(CHECKPOINT);
    checkpoint::write(&checkpoint, &model, config.train.seed)?;
    Ok(TrainOutcome {
        history,
        checkpoint,
    })
}

fn eval_data(config: &RunConfig) -> Result<Matrix, CliError> {
    if let Some(path) = &config.eval.path {
        return read_matrix(path);
    }
    match &config.data.synthetic {
        Some(spec) => {
            let mut g = SuperpositionGenerator::with_stream(spec.clone(), 1)?;
            Ok(g.batch(config.eval.samples).0)
        }
        None => Err(CliError::Config(
            "evaluating on file data needs eval.path".into(),
        )),
    }
}

fn ground_truth(config: &RunConfig) -> Result<Option<Matrix>, CliError> {
    if let Some(path) = &config.eval.ground_truth {
        return Ok(Some(read_matrix(path)?.transpose()));
    }
    match &config.data.synthetic {
        Some(spec) => Ok(Some(
            SuperpositionGenerator::new(spec.clone())?
                .ground_truth()
                .clone(),
        )),
        None => Ok(None),
    }
}

/// The trained model from `checkpoint`, or a fresh one built from the
/// config when `checkpoint` is `None`.
fn load_model(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Model, CliError> {
    match checkpoint {
        Some(path) => Ok(checkpoint::read(path)?.0),
        None => Ok(Model::init(config.model.clone(), config.train.seed)?),
    }
}

fn check_width(model: &Model, x: &Matrix) -> Result<(), CliError> {
    if x.cols() != model.config().d {
        return Err(CliError::Config(format!(
            "evaluation data has {} columns but the model expects d = {}",
            x.cols(),
            model.config().d
        )));
    }
    Ok(())
}

pub fn eval_cmd(
    config: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    suffix: &str,
) -> Result<MetricsReport, CliError> {
    let model = load_model(config, checkpoint)?;
    let x = eval_data(config)?;
    check_width(&model, &x)?;
    let truth = ground_truth(config)?;
    let report = evaluate(&model, &x, config.eval.batch_size, truth.as_ref())?;
    prepare_dir(out)?;
    write_file(&out.join(with_suffix(REPORT, suffix)), report.to_text())?;
    write_file(
        &out.join(with_suffix(HISTOGRAM, suffix)),
        report.histogram.to_tsv(),
    )?;
    Ok(report)
}

/// `report.txt` with suffix `untrained` becomes `report.untrained.txt`.
fn with_suffix(name: &str, suffix: &str) -> String {
    if suffix.is_empty() {
        return name.to_string();
    }
    match name.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}.{suffix}.{ext}"),
        None => format!("{name}.{suffix}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSuggestion {
    pub k_star: f64,
    pub k_star_rounded: usize,
    pub mean_l0: f64,
    pub samples: usize,
    pub suggested_k: usize,
}

impl KSuggestion {
    pub fn to_text(&self) -> String {
        format!(
            "k_star={:?}\nk_star_rounded={}\nmean_l0={:?}\nsamples={}\nsuggested_activation=topk\nsuggested_k={}\n",
            self.k_star, self.k_star_rounded, self.mean_l0, self.samples, self.suggested_k
        )
    }
}

pub fn suggest_k_cmd(
    config: &RunConfig,
    out: &Path,
    checkpoint: &Path,
) -> Result<KSuggestion, CliError> {
    let model = load_model(config, Some(checkpoint))?;
    let x = eval_data(config)?;
    check_width(&model, &x)?;
    let report = evaluate(&model, &x, config.eval.batch_size, None)?;
    let m = model.config().m;
    let suggestion = KSuggestion {
        k_star: report.k_star.mean,
        k_star_rounded: report.k_star.rounded,
        mean_l0: report.mean_l0,
        samples: report.samples,
        suggested_k: report.k_star.rounded.clamp(1, m),
    };
    prepare_dir(out)?;
    write_file(&out.join(K_STAR), suggestion.to_text())?;
    Ok(suggestion)
}

fn format_values(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sparsemax of every non-blank input line of whitespace-separated numbers.
pub fn project<R: BufRead, W: Write>(input: R, mut output: W) -> Result<usize, CliError> {
    let mut done = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(format!("i/o error on <input>: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let z = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("input line {}: {e}", i + 1)))?;
        let code =
            sparsemax(&z).map_err(|e| CliError::Config(format!("input line {}: {e}", i + 1)))?;
        let support: Vec<String> = code.support.iter().map(|s| s.to_string()).collect();
        let block = format!(
            "{}values {}\ntau {}\nk {}\nsupport {}\n",
            if done > 0 { "\n" } else { "" },
            format_values(&code.values),
            code.threshold,
            code.support_size(),
            support.join(" ")
        );
        output
            .write_all(block.as_bytes())
            .map_err(|e| CliError::Io(format!("i/o error on <output>: {e}")))?;
        done += 1;
    }
    Ok(done)
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Merges run directories into plot-ready tables; returns the files written.
pub fn report_cmd(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut curves = String::from("run\tstep\tloss\tmean_L0\tdead_count\n");
    let mut hists = String::from("run\tactive_concepts\tsamples\n");
    let mut freqs = String::from("run\tconcept\tfrequency\n");
    let mut summary = String::from(
        "run\tnmse\tfvu\tmean_l0\tcosine_sim\tdead_fraction\tk_star\trecovery_mean_max_cos\n",
    );
    for dir in runs {
        let label = run_label(dir);
        let history = dir.join(HISTORY);
        let report = dir.join(REPORT);
        if !history.exists() && !report.exists() {
            return Err(CliError::Io(format!(
                "{}: neither {HISTORY} nor {REPORT} found",
                dir.display()
            )));
        }
        if history.exists() {
            for r in History::from_tsv(&read_file(&history)?)?.records {
                curves.push_str(&format!(
                    "{label}\t{}\t{:?}\t{:?}\t{}\n",
                    r.step, r.loss, r.mean_l0, r.dead_count
                ));
            }
        }
        if report.exists() {
            let rep = MetricsReport::from_text(&read_file(&report)?)?;
            append_histogram(&mut hists, &label, &rep.histogram);
            for (j, f) in rep.concept_frequency.iter().enumerate() {
                freqs.push_str(&format!("{label}\t{j}\t{f:?}\n"));
            }
            let recovery = rep
                .recovery
                .map_or("na".to_string(), |r| format!("{:?}", r.mean_max_cos));
            summary.push_str(&format!(
                "{label}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{recovery}\n",
                rep.nmse, rep.fvu, rep.mean_l0, rep.cosine_sim, rep.dead_fraction, rep.k_star.mean
            ));
        }
    }
    prepare_dir(out)?;
    let files = [
        ("loss_curves.tsv", curves),
        ("histograms.tsv", hists),
        ("concept_frequency.tsv", freqs),
        ("summary.tsv", summary),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out.join(name);
        write_file(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

fn append_histogram(out: &mut String, label: &str, h: &Histogram) {
    for (i, c) in h.counts.iter().enumerate() {
        out.push_str(&format!("{label}\t{i}\t{c}\n"));
    }
}

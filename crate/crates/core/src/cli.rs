//! The `ion-readout` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::classical::{
    default_gamma, kmeans2_classify, svm_predict, svm_train, threshold_classify, ConvolutionClassifier, KernelSpec,
    ReferenceChoice, SvmModel, SvmParams, DEFAULT_THRESHOLD,
};
use crate::evaluation::{benchmark, extract_samples, parse_methods, BenchmarkConfig, IonSample, LabelSource};
use crate::features::{write_feature_table, FeatureRow, FeatureScaler, FeatureVector};
use crate::imaging::{load_dataset, synth_dataset, Dataset, StatePreparation, SynthParams};
use crate::localization::{
    locate_ions, IonChainLayout, DEFAULT_BACKGROUND_PERCENTILE, DEFAULT_BOX_HEIGHT, DEFAULT_BOX_WIDTH,
};
use crate::quantum::{qsvm_train, quant_classify, QsvmEncoding, QuantConfig, DEFAULT_EPSILON};
use crate::qubo::{QuboProblem, SolverConfig};
use crate::state::{format_bitstring, IonState};

type CliResult<T> = Result<T, String>;

fn fail<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{context}: {e}")
}

#[derive(Parser, Debug)]
#[command(name = "ion-readout", version, about = "State readout for trapped-ion camera images")]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset
    Synth(SynthArgs),
    /// Find ion centers from the frames of a dataset
    Locate(LocateArgs),
    /// Export per-ion features as CSV
    Features(FeaturesArgs),
    /// Fit a classifier on a labeled dataset
    Train(TrainArgs),
    /// Classify every frame of a dataset
    Classify(ClassifyArgs),
    /// Benchmark classifiers and write a report
    Eval(EvalArgs),
    /// Work with QUBO files
    #[command(subcommand)]
    Qubo(QuboCommand),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    /// 900 frames with every ion bright
    Allbright,
    /// 10000 frames, each ion bright or dark with probability 1/2
    H1,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "h1")]
    preset: Preset,
    /// Number of frames (default: 900 for allbright, 10000 for h1)
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a [synth] table overriding the frame generator defaults
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LocateArgs {
    /// Dataset directory or manifest file
    #[arg(long)]
    dataset: PathBuf,
    /// Number of ions (default: from the manifest)
    #[arg(long)]
    n_ions: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_PERCENTILE)]
    percentile: f64,
    #[arg(long)]
    seed: u64,
    /// Layout JSON to write (default: print to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct BoxArgs {
    #[arg(long, default_value_t = DEFAULT_BOX_WIDTH)]
    box_width: usize,
    #[arg(long, default_value_t = DEFAULT_BOX_HEIGHT)]
    box_height: usize,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Layout JSON from `locate`
    #[arg(long)]
    layout: PathBuf,
    #[command(flatten)]
    boxes: BoxArgs,
    /// CSV file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq)]
enum TrainMethod {
    Svm,
    Qsvm,
    Conv,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Layout JSON (default: locate ions in the dataset)
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: TrainMethod,
    #[arg(long)]
    seed: u64,
    /// Model JSON to write
    #[arg(long)]
    out: PathBuf,
    /// SVM box constraint
    #[arg(long, default_value_t = 10.0)]
    c: f64,
    /// RBF kernel width (default: 1 / (n_features * variance))
    #[arg(long)]
    gamma: Option<f64>,
    /// Bits per dual variable (qsvm)
    #[arg(long, default_value_t = 3)]
    bits: usize,
    /// Encoding base (qsvm)
    #[arg(long, default_value_t = 2.0)]
    base: f64,
    /// Equality-constraint penalty (qsvm)
    #[arg(long, default_value_t = 5.0)]
    penalty: f64,
    /// QUBO solver (qsvm)
    #[arg(long, default_value = "anneal")]
    solver: String,
    /// Use at most this many training samples, drawn in frame order
    #[arg(long)]
    max_samples: Option<usize>,
    #[command(flatten)]
    boxes: BoxArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq)]
enum ClassifyMethod {
    Stats,
    Quant,
    Kmeans,
    /// Any model written by `train`
    Model,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: ClassifyMethod,
    /// Model JSON from `train` (method model)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Brightness threshold (stats)
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Intensity threshold (quant)
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// QUBO solver (quant)
    #[arg(long, default_value = "exhaustive")]
    solver: String,
    #[arg(long)]
    seed: u64,
    /// CSV of image,bitstring (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    boxes: BoxArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq)]
enum LabelArg {
    GroundTruth,
    Statistics,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated subset of stats,conv,kmeans,svm,quant,qsvm
    #[arg(long, default_value = "stats,conv,kmeans,svm,quant,qsvm")]
    methods: String,
    #[arg(long)]
    seed: u64,
    /// Directory for report.csv, report.json and metrics.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, value_enum)]
    labels: Option<LabelArg>,
    /// Also report whole-chain bitstring fidelity
    #[arg(long)]
    bitstring: bool,
    /// TOML file with an [eval] table of benchmark settings
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum QuboCommand {
    /// Solve a QUBO file and print the assignment and value
    Solve(QuboSolveArgs),
}

#[derive(Args, Debug)]
struct QuboSolveArgs {
    /// File with header "n C sense" and "i j value" lines
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "exhaustive")]
    method: String,
    #[arg(long)]
    seed: u64,
}

/// Settings file shared by `synth` and `eval`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    synth: SynthParams,
    eval: BenchmarkConfig,
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(fail(path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))
}

/// Model file written by `train`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
enum TrainedModel {
    Svm { scaler: FeatureScaler, model: SvmModel },
    Qsvm { scaler: FeatureScaler, model: SvmModel },
    Conv { classifier: ConvolutionClassifier },
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(fail(dir.display()))?;
            }
            fs::write(p, text).map_err(fail(p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(fail("stdout"))
        }
    }
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(fail(path.display()))
}

fn layout_for(dataset: &Dataset, path: Option<&Path>, seed: u64) -> CliResult<IonChainLayout> {
    match path {
        Some(p) => IonChainLayout::load(p).map_err(fail(p.display())),
        None => locate_ions(&dataset.frames, dataset.manifest.n_ions, DEFAULT_BACKGROUND_PERCENTILE, seed)
            .map_err(fail("locating ions")),
    }
}

fn samples_for(dataset: &Dataset, layout: &IonChainLayout, boxes: &BoxArgs) -> CliResult<Vec<IonSample>> {
    if layout.len() != dataset.manifest.n_ions {
        return Err(format!(
            "layout has {} ions but the dataset has {}",
            layout.len(),
            dataset.manifest.n_ions
        ));
    }
    extract_samples(&dataset.frames, layout, boxes.box_width, boxes.box_height).map_err(fail("features"))
}

fn parse_solver(name: &str) -> CliResult<SolverConfig> {
    name.parse()
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (prep, default_frames, name) = match a.preset {
        Preset::Allbright => (StatePreparation::AllBright, 900, "allbright"),
        Preset::H1 => (StatePreparation::Hadamard, 10_000, "h1"),
    };
    let n = a.frames.unwrap_or(default_frames);
    let params = cfg.synth;
    synth_dataset(&params, prep, n, &a.out, a.seed, name).map_err(fail(a.out.display()))?;
    let layout = params.layout().map_err(fail("layout"))?;
    layout
        .save(a.out.join("layout_truth.json"))
        .map_err(fail(a.out.display()))?;
    println!("wrote {n} frames to {}", a.out.display());
    Ok(())
}

fn cmd_locate(a: &LocateArgs) -> CliResult<()> {
    let ds = open_dataset(&a.dataset)?;
    let n = a.n_ions.unwrap_or(ds.manifest.n_ions);
    let layout = locate_ions(&ds.frames, n, a.percentile, a.seed).map_err(fail("locating ions"))?;
    match &a.out {
        Some(p) => layout.save(p).map_err(fail(p.display())),
        None => {
            let json = serde_json::to_string_pretty(&layout).map_err(fail("layout"))?;
            write_output(None, &(json + "\n"))
        }
    }
}

fn cmd_features(a: &FeaturesArgs) -> CliResult<()> {
    let ds = open_dataset(&a.dataset)?;
    let layout = IonChainLayout::load(&a.layout).map_err(fail(a.layout.display()))?;
    let samples = samples_for(&ds, &layout, &a.boxes)?;
    let labels = ds.labels();
    let rows: Vec<FeatureRow> = samples
        .iter()
        .map(|s| FeatureRow {
            frame: s.frame,
            ion: s.ion,
            label: labels.as_ref().map(|l| l[s.frame][s.ion]),
            features: s.features,
        })
        .collect();
    write_feature_table(&a.out, &rows).map_err(|e| e.to_string())
}

fn labeled(ds: &Dataset) -> CliResult<Vec<IonState>> {
    ds.labels()
        .map(|l| l.into_iter().flatten().collect())
        .ok_or_else(|| "dataset has unlabeled frames; training needs labels".to_string())
}

fn fit_scaler(features: &[FeatureVector]) -> (FeatureScaler, Vec<Vec<f64>>) {
    let rows: Vec<[f64; 11]> = features.iter().map(|f| f.to_array()).collect();
    let scaler = FeatureScaler::fit(&rows);
    let x = rows.iter().map(|r| scaler.transform(r)).collect();
    (scaler, x)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let ds = open_dataset(&a.dataset)?;
    let layout = layout_for(&ds, a.layout.as_deref(), a.seed)?;
    let mut samples = samples_for(&ds, &layout, &a.boxes)?;
    let mut labels = labeled(&ds)?;
    if let Some(m) = a.max_samples {
        samples.truncate(m);
        labels.truncate(m);
    }
    let model = match a.method {
        TrainMethod::Conv => {
            let boxes: Vec<_> = samples.iter().map(|s| s.pixels.clone()).collect();
            let classifier = ConvolutionClassifier::calibrate(&boxes, &labels, ReferenceChoice::FirstBright)
                .map_err(fail("conv"))?;
            TrainedModel::Conv { classifier }
        }
        TrainMethod::Svm | TrainMethod::Qsvm => {
            let feats: Vec<FeatureVector> = samples.iter().map(|s| s.features).collect();
            let (scaler, x) = fit_scaler(&feats);
            let y: Vec<f64> = labels.iter().map(|l| l.svm_label()).collect();
            let kernel = KernelSpec::Rbf {
                gamma: a.gamma.unwrap_or_else(|| default_gamma(&x)),
            };
            if a.method == TrainMethod::Svm {
                let mut params = SvmParams::new(kernel);
                params.c = a.c;
                let fit = svm_train(&x, &y, &params).map_err(fail("svm"))?;
                TrainedModel::Svm {
                    scaler,
                    model: fit.model,
                }
            } else {
                let enc = QsvmEncoding {
                    bits: a.bits,
                    base: a.base,
                    penalty: a.penalty,
                    kernel: Some(kernel),
                };
                let solver = parse_solver(&a.solver)?;
                let fit = qsvm_train(&x, &y, &enc, &solver, a.seed).map_err(fail("qsvm"))?;
                TrainedModel::Qsvm {
                    scaler,
                    model: fit.model,
                }
            }
        }
    };
    let json = serde_json::to_string_pretty(&model).map_err(fail("model"))?;
    write_output(Some(&a.out), &(json + "\n"))
}

fn cmd_classify(a: &ClassifyArgs) -> CliResult<()> {
    let ds = open_dataset(&a.dataset)?;
    let layout = layout_for(&ds, a.layout.as_deref(), a.seed)?;
    let samples = samples_for(&ds, &layout, &a.boxes)?;
    let preds: Vec<IonState> = match a.method {
        ClassifyMethod::Stats => samples
            .iter()
            .map(|s| threshold_classify(s.intensity(), a.threshold))
            .collect(),
        ClassifyMethod::Quant => {
            let config = QuantConfig {
                epsilon: a.epsilon,
                solver: parse_solver(&a.solver)?,
            };
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| quant_classify(s.intensity(), &config, a.seed.wrapping_add(i as u64)))
                .collect::<Result<_, _>>()
                .map_err(fail("quant"))?
        }
        ClassifyMethod::Kmeans => {
            let feats: Vec<FeatureVector> = samples.iter().map(|s| s.features).collect();
            kmeans2_classify(&feats, a.seed).map_err(fail("kmeans"))?
        }
        ClassifyMethod::Model => {
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| "--model is required with --method model".to_string())?;
            let text = fs::read_to_string(path).map_err(fail(path.display()))?;
            let model: TrainedModel = serde_json::from_str(&text).map_err(fail(path.display()))?;
            match model {
                TrainedModel::Svm { scaler, model } | TrainedModel::Qsvm { scaler, model } => samples
                    .iter()
                    .map(|s| svm_predict(&model, &scaler.transform(&s.features.to_array())))
                    .collect(),
                TrainedModel::Conv { classifier } => samples
                    .iter()
                    .map(|s| classifier.classify(&s.pixels))
                    .collect::<Result<_, _>>()
                    .map_err(fail("conv"))?,
            }
        }
    };
    let n = ds.manifest.n_ions;
    let mut out = String::from("image,bitstring\n");
    for (entry, chunk) in ds.manifest.entries.iter().zip(preds.chunks(n)) {
        out.push_str(&format!("{},{}\n", entry.image.display(), format_bitstring(chunk)));
    }
    write_output(a.out.as_deref(), &out)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let methods = parse_methods(&a.methods).map_err(|e| e.to_string())?;
    let mut config = load_config(a.config.as_deref())?.eval;
    if let Some(l) = a.labels {
        config.labels = match l {
            LabelArg::GroundTruth => LabelSource::GroundTruth,
            LabelArg::Statistics => LabelSource::Statistics,
        };
    }
    config.bitstring_fidelity |= a.bitstring;
    let ds = open_dataset(&a.dataset)?;
    let layout = layout_for(&ds, a.layout.as_deref(), a.seed)?;
    let labels = ds.labels();
    let name = if ds.manifest.name.is_empty() {
        a.dataset.display().to_string()
    } else {
        ds.manifest.name.clone()
    };
    let report = benchmark(&name, &ds.frames, labels.as_deref(), &layout, &methods, &config, a.seed)
        .map_err(|e| e.to_string())?;
    if let Some(dir) = &a.out {
        report.write_dir(dir).map_err(|e| e.to_string())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_qubo_solve(a: &QuboSolveArgs) -> CliResult<()> {
    let q = QuboProblem::load(&a.input).map_err(fail(a.input.display()))?;
    let solver = parse_solver(&a.method)?;
    let sol = solver.solve(&q, a.seed).map_err(fail(&a.method))?;
    let bits: String = sol.x.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
    println!("{bits} {}", sol.value);
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Locate(a) => cmd_locate(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Qubo(QuboCommand::Solve(a)) => cmd_qubo_solve(a),
    }
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit code. Failures print one `error:` line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return 2;
            }
            // fold clap's multi-line message into one line, dropping usage hints
            let text = e.to_string();
            let parts: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", parts.join(" "));
            return 2;
        }
    };
    let result = match cli.threads {
        Some(0) => Err("--threads must be at least 1".to_string()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| e.to_string())
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

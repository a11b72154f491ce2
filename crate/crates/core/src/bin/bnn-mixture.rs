use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bnn_mixture::classify::{binary_run, multiclass_run, MulticlassData, SigmoidExpectation};
use bnn_mixture::construct::GaussianCandidates;
use bnn_mixture::data::{generate_test_points, Activation, CandidateSet, Dataset, NetworkShape, TestPoint};
use bnn_mixture::harness::{
    run_heatmap, run_optimality_gap, run_pdf_dump, run_prior_comparison, run_selftest, run_variance_scaling,
    with_threads, ExperimentConfig, ExperimentOutput, Table,
};
use bnn_mixture::io::{read_candidates, read_dataset, read_matrix};
use bnn_mixture::mixture::evaluate_candidates;
use bnn_mixture::source::CandidateSource;

#[derive(Parser)]
#[command(
    name = "bnn-mixture",
    version,
    about = "Gaussian-mixture posterior predictives for networks with a discrete prior on interior weights"
)]
struct Cli {
    /// JSON file with experiment config fields; missing fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores. Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Weight above which a component counts as significant.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mixture predictive for a dataset directory.
    Predict(ModelArgs),
    /// Significant-component counts over the (d, n, p, noise) grid.
    Heatmap,
    /// Density grid and components for every cell and test point.
    PdfDump,
    /// Median predictive variance as network and data grow together.
    VarianceScaling,
    /// Conjectured optimum versus the best Gaussian candidate.
    OptimalityGap,
    /// Constructed weights versus prior draws.
    PriorComparison,
    /// Class probabilities for 0/1 or integer class labels.
    Classify {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of classes; inferred from the labels when omitted.
        #[arg(long)]
        classes: Option<usize>,
        /// Rescale mean-field probabilities to sum to one.
        #[arg(long)]
        renormalize: bool,
    },
    /// Runs the built-in oracle checks.
    Selftest,
}

#[derive(Args)]
struct ModelArgs {
    /// Directory with x1.csv, y.csv and meta.json.
    #[arg(long)]
    data: PathBuf,
    /// Directory of saved candidates; Gaussian candidates are drawn when omitted.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Feature width for drawn candidates (defaults to d).
    #[arg(long)]
    p: Option<usize>,
    /// Number of drawn candidates (defaults to `j_count`).
    #[arg(long)]
    j: Option<usize>,
    /// Test inputs, d rows and one column per point; drawn when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ActivationArg {
    Relu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Predict(_) => "predict",
        Command::Heatmap => "heatmap",
        Command::PdfDump => "pdf-dump",
        Command::VarianceScaling => "variance-scaling",
        Command::OptimalityGap => "optimality-gap",
        Command::PriorComparison => "prior-comparison",
        Command::Classify { .. } => "classify",
        Command::Selftest => "selftest",
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let base = ExperimentConfig::defaults_for(command_name(&cli.command));
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json_over(&base, &text)?
        }
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

enum Source {
    Saved(CandidateSet),
    Drawn(GaussianCandidates),
}

impl Source {
    fn as_dyn(&self) -> &dyn CandidateSource {
        match self {
            Source::Saved(s) => s,
            Source::Drawn(g) => g,
        }
    }
}

struct Model {
    data: Dataset,
    shape: NetworkShape,
    source: Source,
    tests: Vec<TestPoint>,
}

fn load_model(args: &ModelArgs, cfg: &ExperimentConfig) -> anyhow::Result<Model> {
    let data = read_dataset(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    let d = data.d();
    let act = Activation::from(args.activation);
    let (shape, source) = match &args.candidates {
        Some(dir) => {
            let set = read_candidates(dir).with_context(|| format!("reading candidates {}", dir.display()))?;
            let first = &set.candidates()[0];
            let mut widths = vec![d];
            widths.extend(first.layers.iter().map(|l| l.weights.ncols()));
            (NetworkShape::new(widths, act)?, Source::Saved(set))
        }
        None => {
            let shape = NetworkShape::two_layer(d, args.p.unwrap_or(d), act)?;
            let g = GaussianCandidates::new(shape.clone(), args.j.unwrap_or(cfg.j_count), cfg.prior(), cfg.seed)?;
            (shape, Source::Drawn(g))
        }
    };
    let tests = match &args.test {
        Some(path) => {
            let m = read_matrix(path)?;
            if m.nrows() != d {
                bail!("test matrix has {} rows, dataset has d = {d}", m.nrows());
            }
            (0..m.ncols())
                .map(|c| TestPoint::new(m.column(c).into_owned()))
                .collect::<Result<Vec<_>, _>>()?
        }
        None => generate_test_points(d, cfg.n_test_points, cfg.seed)?,
    };
    Ok(Model {
        data,
        shape,
        source,
        tests,
    })
}

fn predict(args: &ModelArgs, cfg: &ExperimentConfig) -> anyhow::Result<ExperimentOutput> {
    let m = load_model(args, cfg)?;
    let run = evaluate_candidates(m.source.as_dyn(), &m.data, &m.tests, &m.shape)?;
    let mut tables = Vec::new();
    for t in 0..m.tests.len() {
        let mix = run.mixture(t)?;
        let mut table = Table::new(format!("predict_t{t}"), &["component", "weight", "mean", "sd"]);
        for j in 0..mix.len() {
            table.push(vec![
                j.into(),
                mix.weights[j].into(),
                mix.means[j].into(),
                mix.sds[j].into(),
            ]);
        }
        tables.push(table);
    }
    Ok(ExperimentOutput {
        experiment: "predict",
        tables,
        failures: Vec::new(),
    })
}

fn classify(
    args: &ModelArgs,
    classes: Option<usize>,
    renormalize: bool,
    cfg: &ExperimentConfig,
) -> anyhow::Result<ExperimentOutput> {
    let m = load_model(args, cfg)?;
    let labels: Vec<usize> = m
        .data
        .y()
        .iter()
        .map(|v| {
            if *v >= 0.0 && v.fract() == 0.0 {
                Ok(*v as usize)
            } else {
                bail!("labels must be non-negative integers, got {v}")
            }
        })
        .collect::<anyhow::Result<_>>()?;
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(2, |l| l + 1).max(2));
    let mut table = Table::new("classify", &["test_point", "class", "probability", "class_sum"]);
    if k == 2 {
        let run = binary_run(m.source.as_dyn(), &m.data, &m.tests, &m.shape)?;
        for t in 0..m.tests.len() {
            let p1 = run.prob(t, SigmoidExpectation::Probit);
            table.push(vec![t.into(), 0usize.into(), (1.0 - p1).into(), 1.0.into()]);
            table.push(vec![t.into(), 1usize.into(), p1.into(), 1.0.into()]);
        }
    } else {
        let data = MulticlassData::from_labels(m.data.x1().clone(), &labels, k, m.data.noise_var())?;
        let run = multiclass_run(m.source.as_dyn(), &data, &m.tests, &m.shape)?;
        for t in 0..m.tests.len() {
            let probs = run.probs(t, SigmoidExpectation::Probit, renormalize)?;
            let total: f64 = probs.iter().sum();
            for (c, p) in probs.iter().enumerate() {
                table.push(vec![t.into(), c.into(), (*p).into(), total.into()]);
            }
        }
    }
    Ok(ExperimentOutput {
        experiment: "classify",
        tables: vec![table],
        failures: Vec::new(),
    })
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<ExperimentOutput> {
    Ok(match &cli.command {
        Command::Predict(args) => predict(args, cfg)?,
        Command::Heatmap => run_heatmap(cfg)?,
        Command::PdfDump => run_pdf_dump(cfg)?,
        Command::VarianceScaling => run_variance_scaling(cfg)?,
        Command::OptimalityGap => run_optimality_gap(cfg)?,
        Command::PriorComparison => run_prior_comparison(cfg)?,
        Command::Classify {
            model,
            classes,
            renormalize,
        } => classify(model, *classes, *renormalize, cfg)?,
        Command::Selftest => run_selftest(cfg.seed)?,
    })
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load_config(cli)?;
    let out = with_threads(cli.threads, || execute(cli, &cfg))??;
    let dir: &Path = &cfg.output_dir;
    for path in out.write(dir, &cfg)? {
        println!("{}", path.display());
    }
    for f in &out.failures {
        eprintln!("failed: {f}");
    }
    Ok(out.failures.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rnnprop::evalkit::{comparison_csv, evaluate_policy, report_csv, EvalReport};
use rnnprop::imagecore::{read_image, write_pgm};
use rnnprop::inference::{generate_proposals, proposals_csv, segment_image, MergePolicy};
use rnnprop::pipeline::{eval_images, load_dataset, training_examples, write_dataset, RunConfig};
use rnnprop::rnnmodel::{load_model, save_model, Dims, ModelParams};
use rnnprop::training::{train, write_train_log};
use rnnprop::Error;

#[derive(Parser)]
#[command(name = "rnnprop", version, about = "Object proposals by learned hierarchical region grouping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `data_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write it with `train_log.csv` alongside.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Rank proposals for one image and write `proposals.csv`.
    Propose {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        n: usize,
        /// Also write one PGM mask per proposal.
        #[arg(long)]
        masks: bool,
        #[arg(long, value_enum, default_value_t = PolicyKind::Random)]
        policy: PolicyKind,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Proposal recall over a dataset; writes `eval_report.csv`.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Add greedy and random@{1,2,4,8} rows and write `comparison.csv`.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Greedy,
    Random,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Decode { .. } | Error::ModelFormat(_) | Error::Json { .. } => 2,
            Error::NonFinite { .. } => 4,
            Error::DimMismatch { .. } => 5,
            Error::Contract(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let config = match path {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| fail(2, format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| fail(3, format!("{}: {e}", path.display())))?
        }
    };
    config.validate().map_err(|e| fail(3, e.to_string()))?;
    Ok(config)
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Outcome<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| fail(3, format!("no {what} given on the command line or in the config")))
}

fn write_file(path: &Path, contents: &str) -> Outcome<()> {
    fs::write(path, contents).map_err(|e| fail(2, format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| fail(2, format!("cannot create {}: {e}", dir.display())))
}

fn load_checked_model(path: &Path, config: &RunConfig) -> Outcome<ModelParams> {
    let params = load_model(path)?;
    params.expect_dims(Dims { feature: config.feature_dim, semantic: config.train.semantic_dim })?;
    Ok(params)
}

fn gen_data(config: &Path, out: Option<PathBuf>, count: usize) -> Outcome<()> {
    let config = load_config(Some(config))?;
    let out = pick(out, &config.data_dir, "output directory")?;
    write_dataset(&config.scene, &out, count)?;
    Ok(())
}

fn train_cmd(data: Option<PathBuf>, config: &Path, model_out: Option<PathBuf>) -> Outcome<()> {
    let config = load_config(Some(config))?;
    let data = pick(data, &config.data_dir, "data directory")?;
    let model_out = pick(model_out, &config.model_path, "model path")?;
    let scenes = load_dataset(&data)?;
    if scenes.is_empty() {
        return Err(fail(6, format!("no scenes in {}", data.display())));
    }
    let examples = training_examples(&scenes, &config)?;
    let outcome = train(&examples, &config.train)?;
    let dir = model_out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    save_model(&outcome.params, &model_out)?;
    write_train_log(&outcome.log, &dir.join("train_log.csv"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn propose(
    model: Option<PathBuf>,
    image: &Path,
    n: usize,
    masks: bool,
    policy: PolicyKind,
    k: Option<usize>,
    repeats: Option<usize>,
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Outcome<()> {
    let config = load_config(config.as_deref())?;
    let model = pick(model, &config.model_path, "model path")?;
    let out = out.or(config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let params = load_checked_model(&model, &config)?;
    let policy = match policy {
        PolicyKind::Greedy => MergePolicy::greedy(),
        PolicyKind::Random => MergePolicy {
            k: k.unwrap_or(config.policy.k),
            repeats: repeats.unwrap_or(config.policy.repeats),
            seed: seed.unwrap_or(config.policy.seed),
        },
    };
    policy.validate().map_err(|e| fail(3, e.to_string()))?;
    let image = read_image(image)?;
    let seg_configs = config.seg_configs_for(&image);
    let proposals = generate_proposals(&image, &params, &seg_configs, &policy, n)?;
    create_dir(&out)?;
    write_file(&out.join("proposals.csv"), &proposals_csv(&proposals))?;
    if masks {
        let segs = segment_image(&image, &seg_configs, params.dims.feature)?;
        for (rank, p) in proposals.iter().enumerate() {
            let gray = p.mask(&segs[p.seg_index].seg);
            write_pgm(image.width(), image.height(), &gray, &out.join(format!("mask_{:04}.pgm", rank + 1)))?;
        }
    }
    Ok(())
}

fn comparison_policies(base_seed: u64) -> Vec<(String, MergePolicy)> {
    let mut out = vec![("greedy".to_string(), MergePolicy::greedy())];
    for repeats in [1, 2, 4, 8] {
        out.push((format!("random@{repeats}"), MergePolicy { k: 5, repeats, seed: base_seed }));
    }
    out
}

fn eval(
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    budgets: Option<Vec<usize>>,
    compare: bool,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Outcome<()> {
    let config = load_config(config.as_deref())?;
    let model = pick(model, &config.model_path, "model path")?;
    let data = pick(data, &config.data_dir, "data directory")?;
    let out = out.or(config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let budgets = budgets.unwrap_or_else(|| config.budgets.clone());
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(fail(3, "budgets must be positive"));
    }
    let params = load_checked_model(&model, &config)?;
    let scenes = load_dataset(&data)?;
    if scenes.is_empty() {
        return Err(fail(6, format!("no scenes in {}", data.display())));
    }
    let images = eval_images(&scenes, &config)?;
    let mut reports: Vec<EvalReport> = vec![evaluate_policy(&images, &params, "random", &config.policy, &budgets)?];
    create_dir(&out)?;
    if compare {
        let compared = comparison_policies(config.policy.seed)
            .iter()
            .map(|(name, p)| evaluate_policy(&images, &params, name, p, &budgets))
            .collect::<rnnprop::Result<Vec<_>>>()?;
        write_file(&out.join("comparison.csv"), &comparison_csv(&compared))?;
        reports.extend(compared);
    }
    write_file(&out.join("eval_report.csv"), &report_csv(&reports))?;
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::GenData { config, out, count } => gen_data(&config, out, count),
        Command::Train { data, config, model_out } => train_cmd(data, &config, model_out),
        Command::Propose { model, image, n, masks, policy, k, repeats, seed, config, out } => {
            propose(model, &image, n, masks, policy, k, repeats, seed, config, out)
        }
        Command::Eval { model, data, budgets, compare, config, out } => eval(model, data, budgets, compare, config, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rnnprop: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

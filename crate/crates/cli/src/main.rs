use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use augment::{run_augmentation, FixtureBackend, HttpBackend, LlmEndpointConfig, RunOptions, TemplateBackend};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskgst::config::resolve;
use maskgst::eval::F1_GATE;
use maskgst::model::ModelConfig;
use maskgst::numeric::gradcheck::primitive_suite;
use maskgst::pipeline::ExperimentConfig;
use maskgst::training::model_gradcheck;
use maskgst_cli::{sweep_table, Workspace, SIDECAR};

#[derive(Parser)]
#[command(name = "maskgst", version, about = "Story visualization with a masked generative transformer", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; sections mirror the resolved-config snapshot
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for data, tokenizer, classifier, training and sampling
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all steps of one experiment
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Override a config value, e.g. --set train.epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to manifests and PNG frames
    SynthData,
    /// Train the image tokenizer
    TrainVq,
    /// Train the caption vocabulary and the transformer
    TrainModel,
    /// Decode the evaluation stories to a frame grid
    Generate,
    /// Generate and report Char-F1, Char-Acc and the feature distance
    Evaluate,
    /// Write augmented captions for the training split
    Augment(AugmentArgs),
    /// Finite-difference checks of every primitive and the full model
    Gradcheck {
        /// Parameter coordinates probed in the full model
        #[arg(long, default_value_t = 200)]
        probes: usize,
    },
    /// Evaluate once per guidance strength
    SweepLambda {
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    Fixtures,
    Template,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    /// Directory of canned replies named <story_id>.txt
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Start the sidecar afresh instead of skipping augmented stories
    #[arg(long)]
    no_resume: bool,
}

fn config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = run.seed {
        for key in ["data.seed", "vq_train.seed", "classifier.seed", "train.seed"] {
            overrides.push(format!("{key}={s}"));
        }
    }
    overrides.extend(run.overrides.iter().cloned());
    Ok(resolve(run.config.as_deref(), &overrides)?)
}

fn augment(ws: &Workspace, a: &AugmentArgs) -> Result<()> {
    ws.require_data()?;
    let ds = ws.dataset()?;
    let out = ws.data_dir().join(SIDECAR);
    let opts = RunOptions {
        concurrency: a.concurrency,
        resume: !a.no_resume,
    };
    let report = match a.backend {
        BackendKind::Template => run_augmentation(&ds.train, &ds.characters, &TemplateBackend, &out, opts)?,
        BackendKind::Fixtures => {
            let Some(dir) = &a.fixtures else { bail!("--backend fixtures needs --fixtures DIR") };
            run_augmentation(&ds.train, &ds.characters, &FixtureBackend::new(dir), &out, opts)?
        }
        BackendKind::Http => {
            let d = LlmEndpointConfig::default();
            let cfg = LlmEndpointConfig {
                base_url: a.endpoint.clone().unwrap_or(d.base_url),
                model: a.model.clone().unwrap_or(d.model),
                api_key_env: a.api_key_env.clone().unwrap_or(d.api_key_env),
                timeout_secs: a.timeout.unwrap_or(d.timeout_secs),
                max_retries: a.max_retries.unwrap_or(d.max_retries),
                ..d
            };
            run_augmentation(&ds.train, &ds.characters, &HttpBackend::from_env(cfg)?, &out, opts)?
        }
    };
    ws.attach_sidecar()?;
    println!("{report}");
    Ok(())
}

fn gradcheck(probes: usize) -> Result<()> {
    let mut worst: f64 = 0.0;
    for r in primitive_suite(0)? {
        println!("{:<24} probes {:>4}  max rel err {:.3e}", r.name, r.probes, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    let cfg = ModelConfig {
        text_vocab: 64,
        ..ModelConfig::default()
    };
    let r = model_gradcheck(cfg, probes, 3)?;
    println!("{:<24} probes {:>4}  max rel err {:.3e}", r.name, r.probes, r.max_rel_err);
    worst = worst.max(r.max_rel_err);
    println!("max rel err {worst:.3e}");
    if worst >= 1e-4 {
        bail!("gradient check failed: max relative error {worst:.3e}");
    }
    Ok(())
}

fn run(cli: Cli, cfg: ExperimentConfig) -> Result<()> {
    if let Command::Gradcheck { probes } = cli.command {
        return gradcheck(probes);
    }
    let ws = Workspace::open(&cli.run.out, cfg)?;
    match &cli.command {
        Command::SynthData => {
            let ds = ws.synth_data()?;
            println!("wrote {} / {} / {} stories to {}", ds.train.len(), ds.val.len(), ds.test.len(), ws.data_dir().display());
        }
        Command::TrainVq => {
            let stats = ws.train_vq()?;
            if let Some(s) = stats.last() {
                println!("reconstruction mse {:.5}, {} codes used", s.recon_mse, s.codes_used);
            }
        }
        Command::TrainModel => {
            ws.train_model()?;
            println!("saved {}", ws.model_path().display());
        }
        Command::Generate => println!("wrote {}", ws.generate()?.display()),
        Command::Evaluate => {
            let r = ws.evaluate()?;
            print!("{}", r.table());
            println!("classifier held-out f1 {:.4} (gate {F1_GATE})", r.classifier_f1);
        }
        Command::Augment(a) => augment(&ws, a)?,
        Command::SweepLambda { values } => print!("{}", sweep_table(&ws.sweep_lambda(values)?)),
        Command::Gradcheck { .. } => unreachable!(),
    }
    Ok(())
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cfg = match config(&cli.run) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            return ExitCode::from(2);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use fusegraph::harness::commands::{
    cmd_build_graph, cmd_eval, cmd_gradcheck, cmd_synth_gen, cmd_train, GradCheckConfig,
    CHECKPOINT_DIR,
};
use fusegraph::harness::io::read_json;
use fusegraph::harness::{RunConfig, SyntheticSpec};
use fusegraph::knowledge::DeterministicEmbedder;
use fusegraph::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fusegraph",
    version,
    about = "Multimodal semantic graph construction, training and evaluation"
)]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and validate the candidate graphs of one example.
    BuildGraph {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        example: String,
    },
    /// Train a model and write a checkpoint plus a JSONL epoch log.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on a dataset and write metrics.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory; defaults to `<output>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Examples to score; defaults to the eval examples, then the training examples.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a small fixture.
    Gradcheck {
        /// JSON file with gradient-check settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        norm_mode: Option<String>,
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Perturb this parameter's analytic gradient (the check should then fail).
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long, default_value = "gradcheck_out")]
        output: PathBuf,
    },
    /// Write a synthetic dataset with stores, a run config and a self-check.
    SynthGen {
        /// JSON file with a synthetic spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        n_examples: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        n_candidates: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        rationales: bool,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Flags mirroring [`RunConfig`]; unset flags keep the config file's value.
#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    examples: Option<PathBuf>,
    #[arg(long)]
    eval_examples: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Embed text with a hash embedder of this seed instead of `text:` lookups.
    #[arg(long)]
    text_embedder_seed: Option<u64>,
    #[arg(long, requires = "text_embedder_seed")]
    text_embedder_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// batch, layer or none.
    #[arg(long)]
    norm_mode: Option<String>,
    /// bidirectional, unidirectional, single or single_cross_modal.
    #[arg(long)]
    fusion: Option<String>,
    /// sum or mean.
    #[arg(long)]
    aggregation: Option<String>,
    /// multiple_choice or open_domain.
    #[arg(long)]
    head: Option<String>,
    /// Answer classes of the open-domain head, comma separated.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// mean or max.
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    scene_width: Option<usize>,
    #[arg(long)]
    concept_width: Option<usize>,
    #[arg(long)]
    text_width: Option<usize>,
    #[arg(long)]
    scene_cap: Option<usize>,
    #[arg(long)]
    concept_cap: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    stop_list: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Encoder-side and GNN-side learning rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long)]
    no_joint: bool,
}

/// Parses a lower snake_case enum name through its serde representation.
fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::invalid(format!("--{flag}: unknown value {value:?}")))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunArgs {
    fn resolve(self, (seed, threads): (Option<u64>, Option<usize>)) -> Result<RunConfig> {
        let mut c: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, seed);
        set(&mut c.threads, threads);
        set(&mut c.paths.triples, self.triples);
        set(&mut c.paths.regions, self.regions);
        set(&mut c.paths.features, self.features);
        set(&mut c.paths.examples, self.examples);
        if self.eval_examples.is_some() {
            c.paths.eval_examples = self.eval_examples;
        }
        set(&mut c.paths.output, self.output);
        if let Some(seed) = self.text_embedder_seed {
            let dim = self.text_embedder_dim.unwrap_or(c.model.gnn.widths.text);
            c.text_embedder = Some(DeterministicEmbedder::new(seed, dim)?);
        }
        let g = &mut c.model.gnn;
        set(&mut g.layers, self.layers);
        set(&mut g.hidden, self.hidden);
        if let Some(v) = &self.norm_mode {
            g.norm_mode = parse_enum("norm-mode", v)?;
        }
        if let Some(v) = &self.fusion {
            g.fusion = parse_enum("fusion", v)?;
        }
        if let Some(v) = &self.aggregation {
            g.aggregation = parse_enum("aggregation", v)?;
        }
        set(&mut g.widths.scene, self.scene_width);
        set(&mut g.widths.concept, self.concept_width);
        set(&mut g.widths.text, self.text_width);
        if let Some(v) = &self.head {
            c.model.head = parse_enum("head", v)?;
        }
        set(&mut c.model.classes, self.classes);
        if let Some(v) = &self.pooling {
            c.model.pooling = parse_enum("pooling", v)?;
        }
        let b = &mut c.build;
        set(&mut b.scene_cap, self.scene_cap);
        set(&mut b.concept_cap, self.concept_cap);
        set(&mut b.threshold, self.threshold);
        set(&mut b.top_k, self.top_k);
        set(&mut b.stop_list, self.stop_list);
        set(&mut c.epochs, self.epochs);
        set(&mut c.warmup, self.warmup);
        set(&mut c.lrs, self.lrs);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.batch_size, self.batch_size);
        if self.no_shuffle {
            c.shuffle = false;
        }
        if self.no_joint {
            c.joint = false;
        }
        c.check()?;
        Ok(c)
    }
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let global = (cli.seed, cli.threads);
    match cli.command {
        Command::BuildGraph { run, example } => {
            let run = run.resolve(global)?;
            let out = cmd_build_graph(&run, &example)?;
            print_json(&out)
        }
        Command::Train { run } => {
            let run = run.resolve(global)?;
            let out = cmd_train(&run)?;
            print_json(&out)
        }
        Command::Eval {
            run,
            checkpoint,
            dataset,
        } => {
            let run = run.resolve(global)?;
            let checkpoint = checkpoint.unwrap_or_else(|| run.paths.output.join(CHECKPOINT_DIR));
            let dataset = dataset
                .or_else(|| run.paths.eval_examples.clone())
                .unwrap_or_else(|| run.paths.examples.clone());
            let m = cmd_eval(&run, &checkpoint, &dataset)?;
            print_json(&m)
        }
        Command::Gradcheck {
            config,
            norm_mode,
            fusion,
            layers,
            hidden,
            corrupt,
            output,
        } => {
            let mut c: GradCheckConfig = load_or_default(config.as_deref())?;
            set(&mut c.seed, global.0);
            if let Some(v) = &norm_mode {
                c.norm_mode = parse_enum("norm-mode", v)?;
            }
            if let Some(v) = &fusion {
                c.fusion = parse_enum("fusion", v)?;
            }
            set(&mut c.layers, layers);
            set(&mut c.hidden, hidden);
            if corrupt.is_some() {
                c.corrupt = corrupt;
            }
            let out = cmd_gradcheck(&c, &output)?;
            print_json(&out)
        }
        Command::SynthGen {
            spec,
            mode,
            n_examples,
            n_test,
            n_candidates,
            noise,
            width,
            rationales,
            output,
        } => {
            let mut s: SyntheticSpec = load_or_default(spec.as_deref())?;
            set(&mut s.seed, global.0);
            if let Some(v) = &mode {
                s.mode = parse_enum("mode", v)?;
            }
            set(&mut s.n_examples, n_examples);
            set(&mut s.n_test, n_test);
            set(&mut s.n_candidates, n_candidates);
            set(&mut s.noise, noise);
            set(&mut s.width, width);
            if rationales {
                s.rationales = true;
            }
            let out = cmd_synth_gen(&s, &output)?;
            print_json(&out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

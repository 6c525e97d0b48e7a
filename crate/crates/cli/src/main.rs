use std::io::{stdin, stdout, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use corpus_forge::adapter::mock::{serve, ServeExit, ServeOptions};
use corpus_forge::pipeline::{adapters_check, Overrides, Pipeline, PipelineConfig, StageReport};

/// Build captioned music corpora from audio collections.
///
/// Exit status: 0 on success, 1 when some clips were flagged, 2 on a fatal
/// error. Set CORPUS_FORGE_LOG (error, warn, info, debug) for logging.
#[derive(Parser)]
#[command(name = "corpus-forge", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory of source audio.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory holding manifests and derived audio.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Adapter command for a task, as TASK=COMMAND. TASK may be `*`.
    /// COMMAND `builtin:mock` uses the built-in mock.
    #[arg(long = "adapter-cmd", value_name = "TASK=CMD", global = true)]
    adapter_cmd: Vec<String>,
    /// Fail captions instead of falling back to the template.
    #[arg(long, global = true)]
    no_adapter_fallback: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Decode, canonicalize and register source tracks.
    Ingest,
    /// Cut tracks into clips.
    Segment,
    /// Split clips into vocal and instrumental stems.
    Separate,
    /// Attach tempo, energy, key, instrument and metadata tags.
    Tag,
    /// Build prompts and captions.
    Caption,
    /// Print corpus statistics.
    Stats,
    /// Write the three training-stage manifests.
    ExportStages,
    /// Compare generated audio with references.
    Eval(EvalArgs),
    /// Start every configured adapter and list its tasks.
    AdaptersCheck,
    /// Run ingest through export-stages.
    Run,
    /// Serve the mock adapter protocol on stdin and stdout.
    #[command(hide = true)]
    MockAdapter {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Pairs file for the conditioning sweep.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Generated clip manifest.
    #[arg(long, requires = "reference")]
    generated: Option<PathBuf>,
    /// Reference clip manifest.
    #[arg(long, requires = "generated")]
    reference: Option<PathBuf>,
    /// Score the whole generated clip, including a copied prefix.
    #[arg(long)]
    include_prefix: bool,
    /// Skip the feature KLD.
    #[arg(long)]
    no_kld: bool,
    /// Add the label-distribution KLD via the classify_labels adapter.
    #[arg(long)]
    label_kld: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORPUS_FORGE_LOG", "warn")).init();
    if let Command::MockAdapter { args } = &cli.command {
        return mock_adapter(args);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn mock_adapter(args: &[String]) -> ExitCode {
    let options = match ServeOptions::from_args(args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}\n{}", ServeOptions::USAGE);
            return ExitCode::from(2);
        }
    };
    match serve(stdin().lock(), BufWriter::new(stdout().lock()), &options) {
        Ok(ServeExit::Eof) => ExitCode::SUCCESS,
        Ok(ServeExit::Crash) => std::process::abort(),
        Err(e) => {
            eprintln!("mock adapter: {e}");
            ExitCode::FAILURE
        }
    }
}

fn summarize(reports: &[StageReport]) -> u8 {
    let mut code = 0;
    for r in reports {
        println!(
            "{:<14} {:>6} records  {:>4} flagged  {}",
            serde_json::to_value(r.stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            r.records,
            r.flagged,
            r.output.display()
        );
        for n in &r.notes {
            println!("    {n}");
        }
        code = code.max(r.exit_code() as u8);
    }
    code
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let mut config = PipelineConfig::load(cli.common.config.as_deref())?;
    config.apply(&Overrides {
        input_dir: cli.common.input,
        output_dir: cli.common.output,
        global_seed: cli.common.seed,
        workers: cli.common.workers,
        adapter_cmds: cli.common.adapter_cmd,
        no_adapter_fallback: cli.common.no_adapter_fallback,
    })?;

    if let Command::AdaptersCheck = cli.command {
        config.validate()?;
        let results = adapters_check(&config.adapters);
        if results.is_empty() {
            println!("no adapters configured");
        }
        let mut code = 0;
        for (cmd, result) in results {
            match result {
                Ok(tasks) => println!("ok    {cmd}: {}", tasks.join(", ")),
                Err(e) => {
                    println!("FAIL  {cmd}: {e}");
                    code = 2;
                }
            }
        }
        return Ok(code);
    }

    if let Command::Eval(args) = &cli.command {
        if args.pairs.is_some() {
            config.eval.pairs = args.pairs.clone();
        }
        if args.generated.is_some() {
            config.eval.generated_manifest = args.generated.clone();
            config.eval.reference_manifest = args.reference.clone();
        }
        if args.include_prefix {
            config.eval.exclude_prefix = false;
        }
        if args.no_kld {
            config.eval.kld = false;
        }
        if args.label_kld {
            config.eval.label_kld = true;
        }
    }

    let pipeline = Pipeline::new(config)?;
    let reports = match cli.command {
        Command::Ingest => vec![pipeline.ingest()?],
        Command::Segment => vec![pipeline.segment()?],
        Command::Separate => vec![pipeline.separate()?],
        Command::Tag => vec![pipeline.tag()?],
        Command::Caption => vec![pipeline.caption()?],
        Command::Stats => {
            let (report, stats) = pipeline.stats()?;
            print!("{}", stats.to_table());
            vec![report]
        }
        Command::ExportStages => vec![pipeline.export_stages()?],
        Command::Eval(_) => {
            let (report, outcome) = pipeline.eval().context("evaluation failed")?;
            print!("{}", outcome.to_table());
            vec![report]
        }
        Command::Run => pipeline.run_all()?,
        Command::AdaptersCheck | Command::MockAdapter { .. } => unreachable!("handled above"),
    };
    Ok(summarize(&reports))
}

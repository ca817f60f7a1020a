use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gnnd::harness::ber::stopping_rule;
use gnnd::harness::{
    run_gmi_sweep, run_ldpc_ber, run_scatter, run_train_net, run_viterbi_ber, write_csv, ExperimentConfig, ExperimentKind,
    Metadata,
};

#[derive(Parser)]
#[command(name = "gnnd", version, about = "GNND link-level experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sum GMI / MI sweep over SNR and channel draws.
    GmiSweep(Common),
    /// GNND vs LMMSE estimate clouds.
    Scatter(Common),
    /// Convolutional code + Viterbi BER.
    ViterbiBer(Common),
    /// LDPC + belief propagation BER.
    LdpcBer(Common),
    /// Train the conditional-mean network on one channel draw.
    TrainNet(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; defaults to the config's `output`, else `<kind>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Use full-scale sample counts instead of desk defaults.
    #[arg(long)]
    paper_scale: bool,
}

impl Command {
    fn parts(&self) -> (ExperimentKind, &Common) {
        match self {
            Command::GmiSweep(c) => (ExperimentKind::GmiSweep, c),
            Command::Scatter(c) => (ExperimentKind::Scatter, c),
            Command::ViterbiBer(c) => (ExperimentKind::ViterbiBer, c),
            Command::LdpcBer(c) => (ExperimentKind::LdpcBer, c),
            Command::TrainNet(c) => (ExperimentKind::TrainNet, c),
        }
    }
}

fn load_config(kind: ExperimentKind, args: &Common) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", args.config.display()))?;
    if config.kind != kind {
        bail!(
            "{} describes a {} experiment, not {}",
            args.config.display(),
            config.kind.as_str(),
            kind.as_str()
        );
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.paper_scale {
        config.apply_paper_scale();
    }
    config.validate()?;
    Ok(config)
}

/// `dir/stem.suffix` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn write_rows<R: serde::Serialize>(path: &Path, meta: &Metadata, rows: &[R]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(BufWriter::new(file), meta, rows)?;
    Ok(())
}

fn run(kind: ExperimentKind, args: &Common) -> Result<()> {
    let config = load_config(kind, args)?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", kind.as_str())));
    let runtime = match kind {
        ExperimentKind::GmiSweep => {
            let res = run_gmi_sweep(&config)?;
            let meta = Metadata::new(&config, &[]);
            write_rows(&out, &meta, &res.rows)?;
            write_rows(&sibling(&out, "summary.csv"), &meta, &res.summary)?;
            res.runtime
        }
        ExperimentKind::Scatter => {
            let res = run_scatter(&config)?;
            let notes = ["estimates divided by their cloud's RMS magnitude".to_string()];
            write_rows(&out, &Metadata::new(&config, &notes), &res.rows)?;
            res.runtime
        }
        ExperimentKind::ViterbiBer | ExperimentKind::LdpcBer => {
            let res = if kind == ExperimentKind::ViterbiBer {
                run_viterbi_ber(&config)?
            } else {
                run_ldpc_ber(&config)?
            };
            write_rows(&out, &Metadata::new(&config, &[stopping_rule(&config)]), &res.rows)?;
            res.runtime
        }
        ExperimentKind::TrainNet => {
            let res = run_train_net(&config)?;
            let notes = [
                format!("heldout net mse = {:?} (std error {:?})", res.net_mse.mean(), res.net_mse.std_error()),
                format!("heldout exact mmse = {:?} (std error {:?})", res.exact_mse.mean(), res.exact_mse.std_error()),
            ];
            write_rows(&out, &Metadata::new(&config, &notes), &res.losses)?;
            let model_path = sibling(&out, "model.txt");
            let file = File::create(&model_path).with_context(|| format!("creating {}", model_path.display()))?;
            res.model.save(BufWriter::new(file))?;
            eprintln!("net/exact mse ratio {:.3}", res.mse_ratio());
            res.runtime
        }
    };
    eprintln!("wrote {} in {:.2?}", out.display(), runtime);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (kind, args) = cli.command.parts();
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    run(kind, args)
}

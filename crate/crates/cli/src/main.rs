//! `tinydense` command-line tool.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use tinydense_core::augment::{apply_plan, plan_for_sample, AugmentMode, AugmentRanges};
use tinydense_core::graph::{param_count, GraphSpec};
use tinydense_core::optim::PhaseSchedule;
use tinydense_core::rf::{rf_report, rf_report_with_probe};
use tinydense_core::train::{evaluate, train, Checkpoint, Dataset, Network, TrainConfig};

#[derive(Parser)]
#[command(name = "tinydense", version, about = "Train and analyse compact DenseNet-style classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Receptive-field table for a network.
    Rf(RfArgs),
    /// Write before/after PPM images of sampled augmentation plans.
    AugmentPreview(PreviewArgs),
    /// Learning-rate trace of a schedule as CSV.
    ScheduleTrace(TraceArgs),
    /// Print a network's graph text and parameter count.
    Graph(GraphArgs),
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from a checkpoint (usually `<out_dir>/last.ckpt`).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Number of worst classes to list.
    #[arg(long, default_value_t = 10)]
    worst: usize,
    /// Input resolution; defaults to the dataset's.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Net1,
    Net2,
}

impl From<NetworkArg> for Network {
    fn from(n: NetworkArg) -> Self {
        match n {
            NetworkArg::Net1 => Network::Net1,
            NetworkArg::Net2 => Network::Net2,
        }
    }
}

#[derive(Args)]
struct RfArgs {
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    network: Option<NetworkArg>,
    /// Graph text file instead of a built-in network.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Also measure each node with the impulse probe.
    #[arg(long)]
    empirical: bool,
    /// CSV instead of a table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    epoch: u64,
    /// Range override `key=min,max`; repeatable.
    #[arg(long = "range", value_name = "KEY=MIN,MAX")]
    ranges: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long, default_value = "clr_replay")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    points_per_epoch: u32,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    network: NetworkArg,
    #[arg(long, default_value_t = 200)]
    classes: usize,
    /// Divide every width by this (rounded up).
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rf(a) => cmd_rf(a),
        Command::AugmentPreview(a) => cmd_preview(a),
        Command::ScheduleTrace(a) => cmd_trace(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let out = train(cfg, a.resume.as_deref())?;
    match out.rows.last() {
        Some(r) => println!(
            "finished {} epochs: train_acc {:.4} val_acc {:.4}, best val_acc {:.4} in {}",
            out.rows.len(),
            r.train_acc,
            r.val_acc,
            out.best_val_acc,
            out.best_checkpoint.display()
        ),
        None => println!("nothing to do"),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint, None)?;
    let ds = Dataset::load(&a.dataset)?;
    let res = a.resolution.unwrap_or(ds.height());
    if ds.height() != ds.width() {
        warn!("dataset is {}x{}; images are resized to {res}x{res}", ds.height(), ds.width());
    }
    if let Some(trained) = ck.state_value("resolution").and_then(|v| v.parse::<usize>().ok()) {
        if trained != res {
            warn!("checkpoint last trained at {trained}x{trained}, evaluating at {res}x{res}");
        }
    }
    let mut params = ck.params.clone();
    let report = evaluate(&ck.graph, &mut params, &ds, res, a.batch)?;
    print!("{}", report.render(ds.class_names(), a.worst, a.worst));
    Ok(())
}

fn cmd_rf(a: RfArgs) -> Result<()> {
    let g = match (&a.spec, a.network) {
        (Some(path), _) => GraphSpec::parse(&fs::read_to_string(path)?)?,
        (None, Some(net)) => TrainConfig::defaults_for(net.into()).build_graph(200)?,
        (None, None) => bail!("give --network or --spec"),
    };
    let report = if a.empirical { rf_report_with_probe(&g, a.resolution)? } else { rf_report(&g, a.resolution)? };
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_preview(a: PreviewArgs) -> Result<()> {
    let mode: AugmentMode = a.mode.parse()?;
    let mut ranges = AugmentRanges::default();
    for kv in &a.ranges {
        let (k, v) = kv.split_once('=').with_context(|| format!("--range `{kv}` is not key=min,max"))?;
        ranges.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    let ds = Dataset::load(&a.dataset)?;
    fs::create_dir_all(&a.out)?;
    for i in 0..a.count.min(ds.len()) {
        let img = ds.image(i);
        let plan = plan_for_sample(mode, &ranges, a.seed, a.epoch, i as u64);
        let after = apply_plan(&plan, &img);
        write_ppm(&a.out.join(format!("{i:04}_before.ppm")), |w| img.write_ppm(w))?;
        write_ppm(&a.out.join(format!("{i:04}_after.ppm")), |w| after.write_ppm(w))?;
        println!("{i}: {plan}");
    }
    info!("wrote {} pairs to {}", a.count.min(ds.len()), a.out.display());
    Ok(())
}

fn write_ppm(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> tinydense_core::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let schedule = match a.mode.as_str() {
        "clr_replay" => PhaseSchedule::replay(),
        other => bail!("schedule-trace supports clr_replay only, got `{other}`"),
    };
    fs::write(&a.out, schedule.trace_csv(a.points_per_epoch))?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_graph(a: GraphArgs) -> Result<()> {
    let mut cfg = TrainConfig::defaults_for(a.network.into());
    cfg.widths = cfg.widths.scaled_down(a.width_divisor);
    let g = cfg.build_graph(a.classes)?;
    let text = g.to_text();
    match &a.out {
        Some(path) => fs::write(path, &text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    eprintln!("{} nodes, {} parameters, {} channels into the head", g.len(), param_count(&g), g.head_input_channels());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let ds = Dataset::synthetic(a.classes, a.per_class, a.res, a.seed)?;
    ds.save(&a.out)?;
    println!("wrote {} records ({} classes at {}x{}) to {}", ds.len(), a.classes, a.res, a.res, a.out.display());
    Ok(())
}

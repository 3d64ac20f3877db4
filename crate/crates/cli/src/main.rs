mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esfpnet::accounting::spec_complexity;
use esfpnet::data::{load_dataset, make_split, DatasetLayout, Protocol, SynthConfig};
use esfpnet::model::{EsfpNet, VariantSpec};
use esfpnet::stream::{
    run_stream, DirSink, DirSource, FrameSink, FrameSource, NullSink, StreamMode, SyntheticSource,
    Y4mSource,
};
use esfpnet::train::{evaluate, protocol_datasets, run_protocol};
use esfpnet::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "esfpnet",
    version,
    about = "Polyp and lesion segmentation: train, evaluate, benchmark, stream"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training protocol end to end and report its metrics.
    Train(TrainArgs),
    /// Evaluate a saved model on one or more datasets.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts per module.
    Bench(BenchArgs),
    /// Segment a frame stream and report throughput.
    Stream(StreamArgs),
    /// Write the split manifest of a protocol.
    Split(SplitArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config file, or an artifact with an embedded config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// B0, B2 or B4.
    #[arg(long)]
    variant: Option<String>,
    /// Directory for artifacts; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding one subdirectory per dataset.
    #[arg(long, env = "ESFPNET_DATA")]
    data_root: Option<PathBuf>,
    /// Comma-separated dataset directory names.
    #[arg(long, value_delimiter = ',')]
    datasets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// learning-ability, generalizability or power-balance.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Encoder weight archive to start from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    input_size: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// NCHW input shape, e.g. 1,3,352,352.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    input_shape: Option<Vec<usize>>,
    /// key=value lines instead of a table.
    #[arg(long)]
    machine: bool,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    common: Common,
    /// Model file; an untrained model of `--variant` when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Frame directory or .y4m file; synthetic frames when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    synthetic_frames: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    queue_depth: Option<usize>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    protocol: Option<String>,
}

fn base(common: &Common) -> Result<RunConfig> {
    let mut c = RunConfig::from_file_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(v) = &common.variant {
        c.variant = v.clone();
    }
    Ok(c)
}

fn apply_data(c: &mut RunConfig, d: &DataArgs) {
    if let Some(r) = &d.data_root {
        c.data_root = Some(r.clone());
    }
    if !d.datasets.is_empty() {
        c.datasets = d.datasets.clone();
    }
}

/// Print `body` behind the header and, with `--out`, also write it to `name`.
fn emit(c: &RunConfig, out: Option<&Path>, name: &str, body: &str) -> Result<()> {
    let text = format!("{}{body}", c.provenance()?);
    print!("{text}");
    if let Some(dir) = out {
        write_artifact(c, dir, name, body)?;
    }
    Ok(())
}

fn write_artifact(c: &RunConfig, dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), format!("{}{body}", c.provenance()?))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut c = base(&a.common)?;
    apply_data(&mut c, &a.data);
    if let Some(p) = a.protocol {
        c.protocol = p;
    }
    let t = &mut c.train;
    a.epochs.inspect(|&v| t.epochs = v);
    a.batch_size.inspect(|&v| t.batch_size = v);
    a.input_size.inspect(|&v| t.input_size = v);
    a.lr.inspect(|&v| t.optimizer.lr = v);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if a.pretrained.is_some() {
        t.pretrained = a.pretrained;
    }
    if a.no_augment {
        t.augment.enabled = false;
    }
    if let (Some(out), None) = (&a.common.out, &t.checkpoint_dir) {
        t.checkpoint_dir = Some(out.join("checkpoints"));
    }
    let c = c.resolve("train");
    let protocol: Protocol = c.protocol.parse()?;
    let report = run_protocol::<f32>(
        protocol,
        c.data_root()?,
        &c.datasets,
        &c.train,
        &DatasetLayout::default(),
    )?;
    emit(
        &c,
        a.common.out.as_deref(),
        "report.txt",
        &report.to_table(),
    )?;
    if let Some(out) = &a.common.out {
        write_artifact(&c, out, "report_machine.txt", &report.to_machine_lines())?;
        for (i, m) in report.manifests.iter().enumerate() {
            write_artifact(&c, out, &format!("manifest_{i}.txt"), &m.to_text())?;
        }
        let mut log = String::new();
        for (run, records) in &report.logs {
            for r in records {
                log.push_str(&format!("run={run} {}\n", r.to_line()));
            }
        }
        write_artifact(&c, out, "train_log.txt", &log)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut c = base(&a.common)?;
    apply_data(&mut c, &a.data);
    if a.model.is_some() {
        c.model = a.model;
    }
    a.input_size.inspect(|&v| c.train.input_size = v);
    let path = c
        .model
        .clone()
        .ok_or_else(|| Error::Config("eval needs --model".into()))?;
    let model: EsfpNet<f32> = if a.common.variant.is_some() {
        esfpnet::io::load_model_strict(&path, &c.variant)?
    } else {
        esfpnet::io::load_model(&path)?
    };
    c.variant = model.spec.id.clone();
    let c = c.resolve("eval");
    if c.datasets.is_empty() {
        return Err(Error::Config("eval needs --datasets".into()));
    }
    let mut body = format!(
        "{:<18} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>4} {:>4}\n",
        "dataset", "frames", "mDice", "mIoU", "S_a", "E_max", "MAE", "FN", "FP"
    );
    for name in &c.datasets {
        let mut d = load_dataset(c.data_root()?.join(name), &DatasetLayout::default())?;
        for s in &mut d.samples {
            s.dataset = name.clone();
        }
        let r = evaluate(
            &model,
            &d.samples,
            c.train.input_size,
            c.train.min_area_fraction,
        )?;
        body.push_str(&format!(
            "{:<18} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>4} {:>4}\n",
            name,
            r.per_image.len(),
            r.m_dice,
            r.m_iou,
            r.s_alpha,
            r.e_phi_max,
            r.mae,
            r.fn_frames,
            r.fp_frames
        ));
    }
    emit(&c, a.common.out.as_deref(), "eval.txt", &body)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut c = base(&a.common)?;
    if let Some(s) = a.input_shape {
        c.input_shape = [s[0], s[1], s[2], s[3]];
    }
    let c = c.resolve("bench");
    let report = spec_complexity(&VariantSpec::from_id(&c.variant)?, c.input_shape)?;
    let body = if a.machine {
        report.to_machine_lines()
    } else {
        report.to_table()
    };
    emit(&c, a.common.out.as_deref(), "complexity.txt", &body)
}

fn cmd_stream(a: StreamArgs) -> Result<()> {
    let mut c = base(&a.common)?;
    if a.model.is_some() {
        c.model = a.model;
    }
    if a.input.is_some() {
        c.input = a.input;
    }
    a.synthetic_frames.inspect(|&v| c.synthetic_frames = v);
    let s = &mut c.stream;
    a.input_size.inspect(|&v| s.input_size = v);
    a.threshold.inspect(|&v| s.threshold = v);
    a.queue_depth.inspect(|&v| s.queue_depth = v);
    if a.sequential {
        s.mode = StreamMode::Sequential;
    }
    let model: EsfpNet<f32> = match &c.model {
        Some(p) => {
            let m = esfpnet::io::load_model(p)?;
            c.variant = m.spec.id.clone();
            m
        }
        None => {
            eprintln!(
                "warning: no --model given, streaming through an untrained {}",
                c.variant
            );
            EsfpNet::build(&c.variant, c.seed)?
        }
    };
    let c = c.resolve("stream");
    let mut source: Box<dyn FrameSource> = match &c.input {
        Some(p) if p.is_dir() => Box::new(DirSource::open(p)?),
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m")) => {
            Box::new(Y4mSource::open(p)?)
        }
        Some(p) => {
            return Err(Error::Config(format!(
                "{} is neither a frame directory nor a .y4m file",
                p.display()
            )))
        }
        None => {
            let synth = SynthConfig {
                width: 256,
                height: 256,
                lesion_prob: 0.5,
                ..Default::default()
            };
            Box::new(SyntheticSource::new(synth, c.synthetic_frames, c.seed))
        }
    };
    let out = a.common.out.as_deref();
    let mut sink: Box<dyn FrameSink> = match out {
        Some(dir) => Box::new(DirSink::create(
            dir.join("frames"),
            true,
            true,
            c.stream.overlay_alpha,
        )?),
        None => Box::new(NullSink),
    };
    let report = run_stream(source.as_mut(), &model, sink.as_mut(), &c.stream)?;
    emit(
        &c,
        out,
        "throughput.txt",
        &format!("{}{}", report.to_table(), report.to_machine_lines()),
    )
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let mut c = base(&a.common)?;
    apply_data(&mut c, &a.data);
    if let Some(p) = a.protocol {
        c.protocol = p;
    }
    let c = c.resolve("split");
    let protocol: Protocol = c.protocol.parse()?;
    let root = c.data_root()?;
    let names = protocol_datasets(protocol, &c.datasets);
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !root.join(n).is_dir())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDatasets {
            root: root.to_path_buf(),
            missing,
        });
    }
    let mut indices = Vec::new();
    for n in &names {
        let mut d = load_dataset(root.join(n), &DatasetLayout::default())?;
        d.name = n.clone();
        indices.push(d.index());
    }
    let manifest = make_split(protocol, &indices, c.seed)?;
    emit(
        &c,
        a.common.out.as_deref(),
        "manifest.txt",
        &manifest.to_text(),
    )
}

fn main() -> ExitCode {
    // clap prints usage and exits with 2 on bad arguments.
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Stream(a) => cmd_stream(a),
        Command::Split(a) => cmd_split(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

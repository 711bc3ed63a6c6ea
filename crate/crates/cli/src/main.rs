//! `rdoq`: data generation, training, evaluation, BD-rate and search
//! benchmarking for the RDOQ lab.
//!
//! Every subcommand accepts `--config FILE.json`. Top-level keys of that
//! object, and keys under a section named after the subcommand, supply
//! defaults for flags of the same name (`sq-offset` or `sq_offset`); flags
//! given on the command line win.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use rdoq_core::dataset::{BuildConfig, FrameSource};
use rdoq_core::eval::{read_rd_table, EvalConfig, Method};
use rdoq_core::nn::{Arch, ClassSet, TrainConfig};
use rdoq_core::pipeline::{self, GenDataConfig, SearchBenchConfig};
use rdoq_core::search::SearchConfig;

const EXIT_DATA: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "rdoq", version, about = "Rate-distortion optimized quantization lab")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// JSON file with default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label corpus blocks and write train/validation datasets per (N, QP).
    GenData(GenDataArgs),
    /// Train a quantization network on a dataset pair.
    Train(TrainArgs),
    /// Compare quantizers on corpus blocks; writes a report and RD points.
    Eval(EvalArgs),
    /// BD-rate between two RD point tables.
    Bdrate(BdrateArgs),
    /// Time the quantizers and check the cost chain.
    SearchBench(SearchBenchArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Raw 4:2:0 geometry `WIDTHxHEIGHTxBITDEPTH` for non-PGM sources.
    #[arg(long)]
    raw: Option<String>,
    /// Keep every k-th frame of raw video.
    #[arg(long)]
    interleave: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    train: Option<Vec<PathBuf>>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    val: Option<Vec<PathBuf>>,
    /// Block sizes (4, 8, 16, 32).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    qps: Option<Vec<i32>>,
    /// Rounding offset of the network's SQ input.
    #[arg(long)]
    sq_offset: Option<f64>,
    /// Greedy refinement passes.
    #[arg(long)]
    passes: Option<usize>,
    /// Adjustment classes, e.g. `-1,0`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    classes: Option<Vec<i32>>,
    /// Tiles sampled per plane (default: all).
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// `fcnn` or `arm`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Let the network change coefficients whose SQ level is zero.
    #[arg(long)]
    no_zero_mask: bool,
    /// Weight the loss by the RD sensitivity of each position.
    #[arg(long)]
    sensitivity_map: bool,
    #[arg(long, value_delimiter = ',')]
    class_weights: Option<Vec<f64>>,
    /// FCNN `DEPTHxWIDTH`.
    #[arg(long)]
    fcnn_layers: Option<String>,
    #[arg(long)]
    arm_hidden: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    sources: Option<Vec<PathBuf>>,
    /// Block size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    qps: Option<Vec<i32>>,
    /// Any of nir, deadzone, rdoq, refined, fcnn, arm.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Model files; each is used for its own architecture and QP.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    models: Option<Vec<PathBuf>>,
    #[arg(long)]
    sq_offset: Option<f64>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    classes: Option<Vec<i32>>,
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_zero_mask: bool,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BdrateArgs {
    /// RD point table of the tested method.
    #[arg(long)]
    test: Option<PathBuf>,
    /// RD point table of the anchor.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Method to read from the test table when it holds several.
    #[arg(long)]
    test_method: Option<String>,
    #[arg(long)]
    reference_method: Option<String>,
}

#[derive(Args)]
struct SearchBenchArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    qps: Option<Vec<i32>>,
    #[arg(long)]
    random_blocks: Option<usize>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    corpus: Option<Vec<PathBuf>>,
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(rdoq_core::Error),
}

impl From<rdoq_core::Error> for Failure {
    fn from(e: rdoq_core::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

/// Config-file defaults for one subcommand.
struct Defaults {
    section: Map<String, Value>,
    top: Map<String, Value>,
}

impl Defaults {
    fn load(path: Option<&Path>, subcommand: &str) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(Self { section: Map::new(), top: Map::new() });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(top) = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))? else {
            return usage(format!("config {} is not a JSON object", path.display()));
        };
        let section = match top.get(subcommand) {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        };
        Ok(Self { section, top })
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Outcome<Option<T>> {
        let alt = key.replace('-', "_");
        let found = [&self.section, &self.top].into_iter().find_map(|m| m.get(key).or_else(|| m.get(&alt)));
        match found {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(|e| Failure::Usage(format!("config key {key:?}: {e}"))),
        }
    }

    /// Flag value, else config value.
    fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Outcome<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Outcome<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn required<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Outcome<T> {
        self.pick(flag, key)?.ok_or_else(|| Failure::Usage(format!("--{key} is required")))
    }

    fn switch(&self, flag: bool, key: &str) -> Outcome<bool> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }
}

fn parse_triple(text: &str) -> Outcome<(usize, usize, u32)> {
    let parts: Vec<&str> = text.split('x').collect();
    match parts.as_slice() {
        [w, h, bd] => match (w.parse(), h.parse(), bd.parse()) {
            (Ok(w), Ok(h), Ok(bd)) => Ok((w, h, bd)),
            _ => usage(format!("bad raw geometry {text:?}; expected WIDTHxHEIGHTxBITDEPTH")),
        },
        _ => usage(format!("bad raw geometry {text:?}; expected WIDTHxHEIGHTxBITDEPTH")),
    }
}

fn sources(paths: &[PathBuf], source: &SourceArgs, d: &Defaults) -> Outcome<Vec<FrameSource>> {
    let raw = match d.pick(source.raw.clone(), "raw")? {
        Some(t) => Some(parse_triple(&t)?),
        None => None,
    };
    let interleave = d.or(source.interleave, "interleave", 1)?;
    paths.iter().map(|p| FrameSource::guess(p, raw, interleave).map_err(|e| Failure::Usage(e.to_string()))).collect()
}

fn class_set(d: &Defaults, flag: Option<Vec<i32>>) -> Outcome<ClassSet> {
    match d.pick(flag, "classes")? {
        Some(v) => ClassSet::new(v).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(ClassSet::default()),
    }
}

fn search_config(d: &Defaults, flag: Option<usize>) -> Outcome<SearchConfig> {
    let passes = d.or(flag, "passes", SearchConfig::default().passes)?;
    SearchConfig::with_passes(passes).map_err(|e| Failure::Usage(e.to_string()))
}

fn gen_data(args: GenDataArgs, d: &Defaults) -> Outcome<()> {
    let train = d.required(args.train, "train")?;
    let val = d.required(args.val, "val")?;
    let sizes = d.or(args.sizes, "sizes", vec![4])?;
    let qps = d.or(args.qps, "qps", vec![22, 27, 32, 37])?;
    let mut build = BuildConfig::new(sizes[0], qps[0]);
    build.sq_offset = d.or(args.sq_offset, "sq-offset", build.sq_offset)?;
    build.search = search_config(d, args.passes)?;
    build.classes = class_set(d, args.classes)?;
    build.max_blocks_per_plane = d.pick(args.max_blocks, "max-blocks")?;
    build.seed = d.or(args.seed, "seed", 0)?;
    let cfg = GenDataConfig {
        train: sources(&train, &args.source, d)?,
        val: sources(&val, &args.source, d)?,
        sizes,
        qps,
        build,
        out: d.or(args.out, "out", PathBuf::from("data/generated"))?,
    };
    pipeline::gen_data(&cfg, |e| {
        let t = &e.train;
        let total: u64 = t.class_counts.iter().sum::<u64>().max(1);
        let histogram: Vec<String> = t
            .class_values
            .iter()
            .zip(&t.class_counts)
            .map(|(v, c)| format!("{v:+}: {c} ({:.2}%)", 100.0 * *c as f64 / total as f64))
            .collect();
        println!("N={} QP={}: {} train / {} val blocks", e.n, e.qp, t.records, e.val.records);
        println!("  classes  {}", histogram.join(", "));
        println!("  labels vs SQ input: {:+.3}% J, vs deadzone: {:+.3}% J", t.label_vs_sq_percent, t.label_vs_deadzone_percent);
        println!("  mean J  sq {:.3}  deadzone {:.3}  label {:.3}", t.mean_cost_sq, t.mean_cost_deadzone, t.mean_cost_label);
        if t.outside_keep_or_decrement > 0 {
            println!("  {} label levels outside keep/decrement of SQ", t.outside_keep_or_decrement);
        }
    })?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn train(args: TrainArgs, d: &Defaults) -> Outcome<()> {
    let train_data: PathBuf = d.required(args.train_data, "train-data")?;
    let val_data: PathBuf = d.required(args.val_data, "val-data")?;
    let arch: Arch = d.or(args.arch, "arch", "fcnn".into())?.parse().map_err(|e: rdoq_core::Error| Failure::Usage(e.to_string()))?;
    let mut cfg = TrainConfig::new(arch);
    cfg.epochs = d.or(args.epochs, "epochs", cfg.epochs)?;
    cfg.batch_size = d.or(args.batch_size, "batch-size", cfg.batch_size)?;
    cfg.lr = d.or(args.lr, "lr", cfg.lr)?;
    cfg.l2 = d.or(args.l2, "l2", cfg.l2)?;
    cfg.patience = d.or(args.patience, "patience", cfg.patience)?;
    cfg.seed = d.or(args.seed, "seed", cfg.seed)?;
    cfg.zero_mask = !d.switch(args.no_zero_mask, "no-zero-mask")?;
    cfg.sensitivity_map = d.switch(args.sensitivity_map, "sensitivity-map")?;
    cfg.class_weights = d.pick(args.class_weights, "class-weights")?;
    cfg.fcnn_layers = match d.pick(args.fcnn_layers, "fcnn-layers")? {
        Some(t) => match t.split_once('x').map(|(a, b)| (a.parse(), b.parse())) {
            Some((Ok(depth), Ok(width))) => Some((depth, width)),
            _ => return usage(format!("bad --fcnn-layers {t:?}; expected DEPTHxWIDTH")),
        },
        None => None,
    };
    cfg.arm_hidden = d.pick(args.arm_hidden, "arm-hidden")?;
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return usage("batch size and learning rate must be positive");
    }
    let out = d.or(args.out, "out", PathBuf::from("models"))?;
    let run = pipeline::train_from_files(&train_data, &val_data, &cfg, &out, |l| match l.train_loss {
        None => println!("epoch {:>3}  untrained      acc {:6.2}%  rd {:+.3}%", l.epoch, l.val_accuracy, l.val_rd_percent),
        Some(loss) => println!(
            "epoch {:>3}  loss {:.5}  acc {:6.2}%  rd {:+.3}%  best {:+.3}%{}",
            l.epoch,
            loss,
            l.val_accuracy,
            l.val_rd_percent,
            l.best_val_rd_percent,
            if l.improved { " *" } else { "" }
        ),
    })?;
    let o = &run.outcome;
    println!(
        "best epoch {}  labels {:+.3}%  SQ input {:+.3}%  gap closed {:.1}%",
        o.best_epoch,
        o.label_rd_percent,
        o.input_rd_percent,
        100.0 * o.gap_closed()
    );
    println!("wrote {} and {}", run.model_path.display(), run.log_path.display());
    Ok(())
}

fn eval(args: EvalArgs, d: &Defaults) -> Outcome<()> {
    let paths: Vec<PathBuf> = d.required(args.sources, "sources")?;
    let n = d.or(args.n, "n", 4)?;
    let mut cfg = EvalConfig::new(n);
    cfg.qps = d.or(args.qps, "qps", cfg.qps)?;
    cfg.sq_offset = d.or(args.sq_offset, "sq-offset", cfg.sq_offset)?;
    cfg.search = search_config(d, args.passes)?;
    cfg.classes = class_set(d, args.classes)?;
    cfg.zero_mask = !d.switch(args.no_zero_mask, "no-zero-mask")?;
    let names = d.or(args.methods, "methods", vec!["nir".into(), "deadzone".into(), "rdoq".into(), "refined".into()])?;
    let methods = names.iter().map(|m| m.parse::<Method>()).collect::<Result<Vec<_>, _>>().map_err(|e| Failure::Usage(e.to_string()))?;
    let model_paths: Vec<PathBuf> = d.or(args.models, "models", Vec::new())?;
    let seed = d.or(args.seed, "seed", 0)?;
    let max_blocks = d.pick(args.max_blocks, "max-blocks")?;
    let out = d.or(args.out, "out", PathBuf::from("eval"))?;

    let blocks = pipeline::collect_eval_blocks(&sources(&paths, &args.source, d)?, n, seed, max_blocks)?;
    let models = pipeline::load_models(&model_paths)?;
    let output = pipeline::eval_to_dir(&blocks, &cfg, &methods, &models, &out)?;
    println!("{} blocks of {n}x{n}", blocks.len());
    println!("{:<10} {:>4} {:>12} {:>9} {:>9} {:>8} {:>8}", "method", "qp", "mean J", "RD %", "acc %", "bpp", "PSNR");
    for m in &output.report.methods {
        println!(
            "{:<10} {:>4} {:>12.3} {:>+9.3} {:>9.2} {:>8.4} {:>8.3}",
            m.method, m.qp, m.mean_cost, m.rd_vs_deadzone_percent, m.accuracy_percent, m.bits_per_pixel, m.psnr_db
        );
    }
    for (method, bd) in &output.report.bd_rate_vs_deadzone {
        println!("BD-rate {method} vs deadzone: {bd:+.3}%");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn bdrate(args: BdrateArgs, d: &Defaults) -> Outcome<()> {
    let test: PathBuf = d.required(args.test, "test")?;
    let reference: PathBuf = d.required(args.reference, "reference")?;
    let read = |p: &Path| -> Outcome<_> { Ok(read_rd_table(&std::fs::read_to_string(p).map_err(rdoq_core::Error::from)?)?) };
    let (t, r) = (read(&test)?, read(&reference)?);
    let tm: Option<String> = d.pick(args.test_method, "test-method")?;
    let rm: Option<String> = d.pick(args.reference_method, "reference-method")?;
    let bd = pipeline::bd_rate_between(&t, tm.as_deref(), &r, rm.as_deref())?;
    println!("{bd:.4}");
    Ok(())
}

fn search_bench(args: SearchBenchArgs, d: &Defaults) -> Outcome<()> {
    let mut cfg = SearchBenchConfig::new(d.or(args.n, "n", 4)?);
    cfg.qps = d.or(args.qps, "qps", cfg.qps)?;
    cfg.random_blocks = d.or(args.random_blocks, "random-blocks", cfg.random_blocks)?;
    let corpus: Vec<PathBuf> = d.or(args.corpus, "corpus", Vec::new())?;
    cfg.corpus = sources(&corpus, &args.source, d)?;
    cfg.corpus_blocks_per_plane = d.or(args.max_blocks, "max-blocks", 256).map(Some)?;
    cfg.search = search_config(d, args.passes)?;
    cfg.seed = d.or(args.seed, "seed", 0)?;
    let entries = pipeline::search_bench(&cfg)?;
    for e in &entries {
        println!("{} QP {} ({} blocks), chain violations {}", e.source, e.qp, e.blocks, e.chain_violations);
        if let Some(m) = e.oracle_mismatches {
            println!("  oracle mismatches {m}");
        }
        for m in &e.methods {
            println!("  {:<9} {:>10.2} us/block  mean J {:.3}", m.method, m.micros_per_block, m.mean_cost);
        }
    }
    if let Some(out) = d.pick(args.out, "out")? {
        let out: PathBuf = out;
        std::fs::create_dir_all(&out).map_err(rdoq_core::Error::from)?;
        let text = serde_json::to_string_pretty(&entries).map_err(rdoq_core::Error::from)?;
        std::fs::write(out.join("search_bench.json"), text + "\n").map_err(rdoq_core::Error::from)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return usage("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let name = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Bdrate(_) => "bdrate",
        Command::SearchBench(_) => "search-bench",
    };
    let d = Defaults::load(cli.config.as_deref(), name)?;
    match cli.command {
        Command::GenData(a) => gen_data(a, &d),
        Command::Train(a) => train(a, &d),
        Command::Eval(a) => eval(a, &d),
        Command::Bdrate(a) => bdrate(a, &d),
        Command::SearchBench(a) => search_bench(a, &d),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

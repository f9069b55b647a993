use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlorq::lorada::{run_sequential_rounding, LoRAdaConfig, RoundingTarget};
use mlorq::pipeline::{self, CompressConfig, HessianMode, SearchConfig};
use mlorq::quantizer::{BitSet, PercentileGrid};
use mlorq::store::{load_solution, save_solution, solution_report, Model};
use mlorq::{report, Error, Result};

#[derive(Parser)]
#[command(name = "mlorq", version, about = "Joint low-rank and mixed-precision compression of linear chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print layer shapes, search-space sizes and float memory.
    Inspect {
        manifest: PathBuf,
        #[arg(long)]
        bitset: Option<BitSet>,
    },
    /// Search and allocate a compressed representation for every layer.
    Compress(CompressArgs),
    /// Compare a saved solution against the float model.
    Eval { manifest: PathBuf, solution: PathBuf },
    /// Dump one layer's Pareto front as CSV.
    Pareto {
        manifest: PathBuf,
        #[arg(long)]
        layer: String,
        #[command(flatten)]
        search: SearchArgs,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine a saved solution with adaptive rounding.
    Round {
        manifest: PathBuf,
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hessian: Option<HessianMode>,
        #[arg(long, value_delimiter = ',')]
        percentiles: Option<Vec<f64>>,
        #[command(flatten)]
        lorada: LoRAdaArgs,
    },
}

#[derive(Args, Default)]
struct SearchArgs {
    /// Comma-separated bit-widths, e.g. 2,3,4,6,8.
    #[arg(long)]
    bitset: Option<BitSet>,
    #[arg(long)]
    rank_stride: Option<usize>,
    /// auto, provided, gauss_newton or identity.
    #[arg(long)]
    hessian: Option<HessianMode>,
    #[arg(long, value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
    /// Only quantization options (no low-rank factorizations).
    #[arg(long)]
    quant_only: bool,
}

impl SearchArgs {
    fn apply(&self, search: &mut SearchConfig) -> Result<()> {
        if let Some(b) = &self.bitset {
            search.bitset = b.clone();
        }
        if let Some(s) = self.rank_stride {
            search.rank_stride = s;
        }
        if let Some(h) = self.hessian {
            search.hessian = h;
        }
        if let Some(p) = &self.percentiles {
            search.percentiles = PercentileGrid::new(p.clone())?;
        }
        search.quant_only |= self.quant_only;
        Ok(())
    }
}

#[derive(Args, Default)]
struct LoRAdaArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// float_input or compressed_input.
    #[arg(long, value_parser = parse_target)]
    target: Option<RoundingTarget>,
}

fn parse_target(s: &str) -> std::result::Result<RoundingTarget, String> {
    match s {
        "float_input" => Ok(RoundingTarget::FloatInput),
        "compressed_input" => Ok(RoundingTarget::CompressedInput),
        _ => Err(format!("expected float_input or compressed_input, got `{s}`")),
    }
}

impl LoRAdaArgs {
    fn any(&self) -> bool {
        self.iterations.is_some()
            || self.lr.is_some()
            || self.lambda.is_some()
            || self.batch_size.is_some()
            || self.beta_start.is_some()
            || self.beta_end.is_some()
            || self.warmup.is_some()
            || self.target.is_some()
    }

    fn apply(&self, c: &mut LoRAdaConfig) {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { c.$target = v; })*
            };
        }
        set!(iterations => iterations, lr => learning_rate, lambda => lambda,
             batch_size => batch_size, beta_start => beta_start, beta_end => beta_end,
             warmup => warmup, seed => seed, target => target);
    }
}

#[derive(Args)]
struct CompressArgs {
    manifest: PathBuf,
    /// Output directory for the report, CSVs and compressed container.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with any of the options below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "avg_bits")]
    budget_bits: Option<u64>,
    #[arg(long)]
    avg_bits: Option<f64>,
    #[arg(long)]
    act_budget_bits: Option<u64>,
    #[arg(long)]
    k_inf: Option<usize>,
    #[arg(long)]
    delta: Option<u64>,
    #[command(flatten)]
    search: SearchArgs,
    /// Refine the chosen codes with adaptive rounding.
    #[arg(long)]
    lorada: bool,
    #[command(flatten)]
    lorada_args: LoRAdaArgs,
}

fn load_config(path: &Path) -> Result<CompressConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn compress_config(args: &CompressArgs) -> Result<CompressConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => CompressConfig::default(),
    };
    if args.budget_bits.is_some() || args.avg_bits.is_some() {
        cfg.budget_bits = args.budget_bits;
        cfg.avg_bits = args.avg_bits;
    }
    if let Some(b) = args.act_budget_bits {
        cfg.act_budget_bits = Some(b);
    }
    if let Some(k) = args.k_inf {
        cfg.k_inf = k;
    }
    if let Some(d) = args.delta {
        cfg.delta = d;
    }
    args.search.apply(&mut cfg.search)?;
    if args.lorada || args.lorada_args.any() {
        args.lorada_args.apply(cfg.lorada.get_or_insert_with(LoRAdaConfig::default));
    } else if let Some(l) = cfg.lorada.as_mut() {
        args.lorada_args.apply(l);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { manifest, bitset } => {
            let model = Model::load(&manifest)?;
            print!("{}", report::inspect_report(&model, &bitset.unwrap_or_default()));
        }
        Command::Compress(args) => {
            let cfg = compress_config(&args)?;
            let model = Model::load(&args.manifest)?;
            let result = pipeline::compress(&model, &cfg)?;
            pipeline::write_artifacts(&result, &args.out)?;
            print!("{}", solution_report(&result.record));
        }
        Command::Eval { manifest, solution } => {
            let model = Model::load(&manifest)?;
            let (_, weights) = load_solution(&solution)?;
            let eval = pipeline::evaluate(&model, &weights)?;
            print!("{}", report::eval_report(&eval));
        }
        Command::Pareto {
            manifest,
            layer,
            search,
            out,
        } => {
            let model = Model::load(&manifest)?;
            let index = model
                .layers
                .iter()
                .position(|l| l.spec.name == layer)
                .ok_or_else(|| Error::InvalidConfig(format!("no layer named `{layer}`")))?;
            let mut cfg = SearchConfig::default();
            search.apply(&mut cfg)?;
            let hessian = pipeline::layer_hessians(&model, cfg.hessian)?.swap_remove(index);
            let analysis = pipeline::analyze_layer(&model, index, hessian, &cfg)?;
            let csv = report::fronts_csv(&[layer], &[&analysis.front], None)?;
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Round {
            manifest,
            solution,
            out,
            hessian,
            percentiles,
            lorada,
        } => {
            let model = Model::load(&manifest)?;
            let (mut record, _) = load_solution(&solution)?;
            let mut cfg = LoRAdaConfig::default();
            lorada.apply(&mut cfg);
            let grid = match percentiles {
                Some(p) => PercentileGrid::new(p)?,
                None => PercentileGrid::default(),
            };
            let hessians = pipeline::layer_hessians(&model, hessian.unwrap_or_default())?;
            let kinds: Vec<_> = record.layers.iter().map(|l| l.kind).collect();
            let plan = pipeline::rounding_plan(&model, &hessians, &kinds, &grid)?;
            let rounded = run_sequential_rounding(&model, plan, &cfg)?;
            let weights: Vec<_> = rounded.into_iter().map(|r| r.weight).collect();
            record.refined = true;
            save_solution(&record, &weights, &out)?;
            print!("{}", solution_report(&record));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end. Exit codes: 0 ok, 1 I/O or failed check,
//! 2 usage, 3 infeasible plan, 4 corrupt file, 5 shape mismatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use crate::conv::{conv_direct, conv_dl, conv_vq, InputVolume, MulCounter};
use crate::error::Error;
use crate::eval::{
    approximations, compress_layer, container_errors, generate_synthetic_kernels, pooled_error,
    run_sweep, Method, SweepConfig, SyntheticKernelSpec,
};
use crate::format::{
    load_kernels, load_volume, save_kernels, save_volume, write_atomic, CodebookContainer,
    Codebooks,
};
use crate::model::{reconstruct_kernels, ErrorReport, LayerShape};
use crate::planner::{cost_original, plan, ratio_f64};

pub const REPORT_SCHEMA: u32 = 1;
pub const CONV_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "kernquant",
    version,
    about = "Weight clustering for convolutional layers"
)]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "KERNQUANT_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Vq,
    Dl,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Layer shape as MxNxpxm.
    #[arg(long, value_parser = parse_shape)]
    pub shape: LayerShape,
    /// Rows per subspace.
    #[arg(long)]
    pub nprime: usize,
    /// Target acceleration over the original layer.
    #[arg(long)]
    pub rho: f64,
    /// Dictionary size as a multiple of the VQ codebook size.
    #[arg(long)]
    pub c: f64,
    /// Nonzeros per sparse code.
    #[arg(long)]
    pub alpha: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the VQ and DL parameters for a target acceleration.
    Plan(PlanArgs),
    /// Build a codebook container from a kernel file.
    Compress {
        /// Kernel file (.kqz or .json).
        #[arg(long)]
        input: PathBuf,
        /// Clustering method.
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Rows per subspace.
        #[arg(long)]
        nprime: usize,
        /// Target acceleration over the original layer.
        #[arg(long)]
        rho: f64,
        /// Dictionary size as a multiple of the VQ codebook size.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        /// Nonzeros per sparse code.
        #[arg(long, default_value_t = 1)]
        alpha: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Report the quantization error of a container against its kernels.
    Eval {
        /// Kernel file (.kqz or .json).
        #[arg(long)]
        input: PathBuf,
        /// Codebook container (.kqc).
        #[arg(long)]
        codebook: PathBuf,
    },
    /// Run direct and accelerated convolutions and compare outputs and counts.
    Convcheck {
        /// Kernel file (.kqz or .json).
        #[arg(long)]
        input: PathBuf,
        /// Codebook container (.kqc).
        #[arg(long)]
        codebook: PathBuf,
        /// Input volume file.
        #[arg(long)]
        volume: PathBuf,
    },
    /// Run an error-versus-acceleration sweep and write CSV files.
    Sweep {
        /// Sweep configuration (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate synthetic kernels or an input volume.
    #[command(subcommand)]
    Gen(GenCommand),
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Low-rank plus noise kernels.
    Kernels {
        /// Layer shape as MxNxpxm.
        #[arg(long, value_parser = parse_shape)]
        shape: LayerShape,
        /// Rank of the noise-free part.
        #[arg(long)]
        rank: usize,
        /// Standard deviation of the added noise.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Overall scale of the weights.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Random input volume.
    Volume {
        /// Input channels.
        #[arg(long)]
        channels: usize,
        /// Spatial side length.
        #[arg(long)]
        side: usize,
    },
}

fn parse_shape(s: &str) -> std::result::Result<LayerShape, String> {
    LayerShape::parse(s).map_err(|e| e.to_string())
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InfeasibleSparsity { .. } | Error::DictionaryTooSmall(_) => 3,
        Error::Corrupt(_) => 4,
        Error::ShapeMismatch(_) => 5,
        Error::Io(_) | Error::Csv(_) | Error::NonOverlappingCurves => 1,
        Error::NonDivisibleChannels { .. }
        | Error::InvalidShape(_)
        | Error::InvalidK { .. }
        | Error::InvalidParameter(_)
        | Error::Json(_) => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli) -> std::result::Result<i32, Failure> {
    match &cli.command {
        Command::Plan(a) => cmd_plan(a, cli.out.as_deref()),
        Command::Compress {
            input,
            method,
            nprime,
            rho,
            c,
            alpha,
            report,
        } => {
            let out = cli
                .out
                .as_deref()
                .ok_or_else(|| usage("compress needs --out"))?;
            let v = cmd_compress(input, *method, *nprime, *rho, *c, *alpha, cli.seed, out)?;
            emit(&v, report.as_deref())
        }
        Command::Eval { input, codebook } => emit(&cmd_eval(input, codebook)?, cli.out.as_deref()),
        Command::Convcheck {
            input,
            codebook,
            volume,
        } => {
            let v = cmd_convcheck(input, codebook, volume)?;
            emit(&v, cli.out.as_deref())?;
            Ok(if v["pass"] == json!(true) { 0 } else { 1 })
        }
        Command::Sweep { config } => cmd_sweep(config, cli.out.as_deref()),
        Command::Gen(g) => {
            let out = cli.out.as_deref().ok_or_else(|| usage("gen needs --out"))?;
            cmd_gen(g, cli.seed, out)
        }
    }
}

fn usage(msg: &str) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

fn check_exists(paths: &[&Path]) -> std::result::Result<(), Failure> {
    for p in paths {
        if !p.is_file() {
            return Err(usage(&format!("no such file: {}", p.display())));
        }
    }
    Ok(())
}

/// Prints to stdout, tolerating a closed pipe.
fn say(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn emit(v: &Value, path: Option<&Path>) -> std::result::Result<i32, Failure> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    say(&text);
    if let Some(p) = path {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(0)
}

fn cmd_plan(a: &PlanArgs, out: Option<&Path>) -> std::result::Result<i32, Failure> {
    let p = plan(&a.shape, a.nprime, a.rho, a.c, a.alpha)?;
    say(&p.table());
    let mut v = serde_json::to_value(p).map_err(Error::from)?;
    v["schema"] = json!(REPORT_SCHEMA);
    emit(&v, out)
}

fn error_json(e: &ErrorReport) -> Value {
    json!({ "mse": e.mse, "relfrob": e.rel_frob })
}

fn layer_json(reports: &[ErrorReport]) -> Value {
    let (mse, relfrob) = pooled_error(reports);
    json!({ "mse": mse, "relfrob": relfrob })
}

/// Counts from the cost formulas, per subspace parameters.
fn formula_counts(container: &CodebookContainer) -> u64 {
    let s = &container.shape;
    let pos = (s.input_side * s.input_side) as u64;
    let np = container.partition.dim() as u64;
    match &container.codebooks {
        Codebooks::Vq(v) => v.iter().map(|cb| pos * np * cb.k() as u64).sum(),
        Codebooks::Dl(v) => v
            .iter()
            .map(|cb| pos * (np * cb.atoms() as u64 + (cb.alpha * cb.k()) as u64))
            .sum(),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_compress(
    input: &Path,
    method: MethodArg,
    nprime: usize,
    rho: f64,
    c: f64,
    alpha: usize,
    seed: u64,
    out: &Path,
) -> std::result::Result<Value, Failure> {
    check_exists(&[input])?;
    let kernels = load_kernels(input)?;
    let method = match method {
        MethodArg::Vq => Method::Vq,
        MethodArg::Dl => Method::Dl,
    };
    let done = compress_layer(&kernels, method, nprime, rho, c, alpha, seed)?;
    let reports = container_errors(&kernels, &done.container)?;
    done.container.save(out)?;
    let p = &done.plan;
    let (k, l, a, t, rho_achieved) = match method {
        Method::Vq => (p.k_vq, 0, 0, p.cost.t_vq, p.cost.rho_vq),
        Method::Dl => (p.k_dl, p.l_dl, p.alpha, p.cost.t_dl, p.cost.rho_dl),
    };
    let subspaces: Vec<Value> = reports
        .iter()
        .zip(&done.iterations)
        .enumerate()
        .map(|(s, (r, it))| {
            let mut v = error_json(r);
            v["subspace"] = json!(s);
            v["iterations"] = json!(it);
            v
        })
        .collect();
    Ok(json!({
        "schema": REPORT_SCHEMA,
        "command": "compress",
        "method": method.to_string(),
        "shape": p.shape,
        "Nprime": nprime,
        "S": p.subspaces,
        "K": k,
        "L": l,
        "alpha": a,
        "rho_target": rho,
        "rho_achieved": ratio_f64(rho_achieved),
        "T_o": p.cost.t_original,
        "T": t,
        "layer": layer_json(&reports),
        "subspaces": subspaces,
        "container": out,
    }))
}

fn cmd_eval(input: &Path, codebook: &Path) -> std::result::Result<Value, Failure> {
    check_exists(&[input, codebook])?;
    let kernels = load_kernels(input)?;
    let container = CodebookContainer::load(codebook)?;
    let reports = container_errors(&kernels, &container)?;
    let subspaces: Vec<Value> = reports
        .iter()
        .enumerate()
        .map(|(s, r)| {
            let mut v = error_json(r);
            v["subspace"] = json!(s);
            v
        })
        .collect();
    Ok(json!({
        "schema": REPORT_SCHEMA,
        "command": "eval",
        "method": container.codebooks.method(),
        "shape": container.shape,
        "layer": layer_json(&reports),
        "subspaces": subspaces,
    }))
}

fn cmd_convcheck(
    input: &Path,
    codebook: &Path,
    volume: &Path,
) -> std::result::Result<Value, Failure> {
    check_exists(&[input, codebook, volume])?;
    let kernels = load_kernels(input)?;
    let container = CodebookContainer::load(codebook)?;
    if kernels.shape() != container.shape {
        return Err(Error::ShapeMismatch(format!(
            "kernels are {} but codebook is for {}",
            kernels.shape(),
            container.shape
        ))
        .into());
    }
    let x = load_volume(volume)?;
    let shape = container.shape;
    if x.channels() != shape.channels || x.side() != shape.input_side {
        return Err(Error::ShapeMismatch(format!(
            "volume is {}x{}x{} but layer expects {}x{}x{}",
            x.channels(),
            x.side(),
            x.side(),
            shape.channels,
            shape.input_side,
            shape.input_side
        ))
        .into());
    }
    let approx_kernels = reconstruct_kernels(&approximations(&container.codebooks)?, shape)?;

    let original = MulCounter::new();
    let y_orig = conv_direct(&x, &kernels, &original)?;
    let direct = MulCounter::new();
    let y_direct = conv_direct(&x, &approx_kernels, &direct)?;
    let accel = MulCounter::new();
    let y_accel = match &container.codebooks {
        Codebooks::Vq(v) => conv_vq(&x, &shape, &container.partition, v, &accel)?,
        Codebooks::Dl(v) => conv_dl(&x, &shape, &container.partition, v, &accel)?,
    };
    let deviation = y_accel.max_relative_deviation(&y_direct)?;
    let vs_original = y_accel.max_relative_deviation(&y_orig)?;
    let t_o = cost_original(&shape);
    let t_method = formula_counts(&container);
    let counters_match =
        direct.total() == t_o && original.total() == t_o && accel.total() == t_method;
    let pass = deviation <= CONV_TOLERANCE && counters_match;
    Ok(json!({
        "schema": REPORT_SCHEMA,
        "command": "convcheck",
        "method": container.codebooks.method(),
        "shape": shape,
        "max_relative_deviation": deviation,
        "deviation_vs_original_kernels": vs_original,
        "tolerance": CONV_TOLERANCE,
        "counts": {
            "direct": direct.total(),
            "direct_formula": t_o,
            "accelerated": accel.total(),
            "accelerated_actual": accel.actual(),
            "accelerated_formula": t_method,
        },
        "counters_match": counters_match,
        "pass": pass,
    }))
}

fn cmd_sweep(config: &Path, out: Option<&Path>) -> std::result::Result<i32, Failure> {
    check_exists(&[config])?;
    let cfg = SweepConfig::load(config).map_err(|e| match e {
        Error::Io(_) => Failure::from(e),
        other => usage(&format!("invalid sweep config: {other}")),
    })?;
    let result = run_sweep(&cfg)?;
    let dir = out.unwrap_or(Path::new("."));
    let written = result.write_csv(dir)?;
    let mut text =
        String::from("method  rho_target  rho_achieved  relfrob_mean  relfrob_std  T_muls\n");
    for r in &result.summary {
        text += &format!(
            "{:<6}  {:>10.3}  {:>12.4}  {:>12.6}  {:>11.6}  {}\n",
            r.method, r.rho_target, r.rho_achieved, r.relfrob_mean, r.relfrob_std, r.t_muls
        );
    }
    if let Some(g) = &result.gain {
        for row in g {
            text += &format!(
                "gain at relfrob {:.6}: {:.2}%\n",
                row.relfrob, row.gain_percent
            );
        }
    }
    say(text.trim_end());
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(0)
}

fn cmd_gen(g: &GenCommand, seed: u64, out: &Path) -> std::result::Result<i32, Failure> {
    match g {
        GenCommand::Kernels {
            shape,
            rank,
            noise,
            scale,
        } => {
            let spec = SyntheticKernelSpec {
                rank: *rank,
                noise: *noise,
                scale: *scale,
            };
            let syn = generate_synthetic_kernels(&spec, shape, seed)?;
            save_kernels(out, &syn.kernels)?;
            emit(
                &json!({
                    "schema": REPORT_SCHEMA,
                    "command": "gen",
                    "shape": shape,
                    "numerical_rank": syn.numerical_rank,
                    "full_rank": syn.full_rank,
                }),
                None,
            )
        }
        GenCommand::Volume { channels, side } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..channels * side * side)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            save_volume(out, &InputVolume::new(*channels, *side, data)?)?;
            Ok(0)
        }
    }
}

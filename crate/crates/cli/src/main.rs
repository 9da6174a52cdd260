use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sodm::config::RunConfig;
use sodm::eval::EvalResult;
use sodm::gradcheck::{CheckOptions, DEFAULT_TOL};
use sodm::gradsuite::{run_suite, CheckGroup};
use sodm::model::Detector;
use sodm::msfem::{Msfem, MsfemConfig};
use sodm::nn::{adaptive_conv_apply, conv2d, deform_conv2d, softmax_channels, AdaptiveGeometry, ConvSpec, DeformSpec};
use sodm::params::{seeded_rng, ModuleParams, ParamInit};
use sodm::slpa::{Slpa, SlpaConfig};
use sodm::synth::{stratum_counts, write_dataset, Profile};
use sodm::threads::configure_threads;
use sodm::train::{evaluate_dataset, load_params, run_training, TrainOptions};
use sodm::{Dims, Mode, Tape, Tensor4};

#[derive(Parser)]
#[command(
    name = "sodm",
    version,
    about = "Small-object detection modules: checks, data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every backward rule against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["all", "tensor", "slpa", "msfem", "deform", "fpn"])]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ProfileArg::Small)]
        profile: ProfileArg,
    },
    /// Train a detector; writes checkpoint.sodm, loss.csv and config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint and print a table followed by JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; defaults to the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the JSON result to this file.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Time one kernel or module forward pass.
    Bench {
        #[arg(long, value_enum)]
        op: BenchOp,
        /// Input size as NxCxHxW.
        #[arg(long, default_value = "1x64x64x64", value_parser = parse_size)]
        size: Dims,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Small,
    Mixed,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Small => Profile::Small,
            ProfileArg::Mixed => Profile::Mixed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchOp {
    Conv2d,
    Deform,
    Adaptive,
    Slpa,
    Msfem,
}

fn parse_size(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("size `{s}` must look like 1x64x64x64"))?;
    match parts[..] {
        [n, c, h, w] if n * c * h * w > 0 => Ok(Dims::new(n, c, h, w)),
        _ => Err(format!("size `{s}` needs four positive extents NxCxHxW")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    let threads = configure_threads()?;
    match command {
        Command::Gradcheck { module, seed, tol } => gradcheck(&CheckGroup::parse_selection(&module)?, seed, tol),
        Command::Synth {
            out,
            images,
            seed,
            profile,
        } => synth(&out, images, seed, profile.into()),
        Command::Train {
            config,
            out,
            resume,
            stop_after,
        } => train(&config, &out, TrainOptions { resume, stop_after }),
        Command::Eval {
            checkpoint,
            config,
            data,
            json_out,
        } => eval(&checkpoint, &config, data.as_deref(), json_out.as_deref()),
        Command::Bench { op, size, iters } => bench(op, size, iters, threads),
    }
}

fn gradcheck(groups: &[CheckGroup], seed: u64, tol: f64) -> Result<ExitCode> {
    let opts = CheckOptions {
        seed,
        tol,
        ..CheckOptions::default()
    };
    let start = Instant::now();
    let reports = run_suite(groups, &opts)?;
    let mut failed = 0;
    for r in &reports {
        print!("{r}");
        failed += usize::from(!r.passed());
    }
    println!(
        "{} checks, {failed} failed, {:.1}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn synth(out: &Path, images: usize, seed: u64, profile: Profile) -> Result<ExitCode> {
    let specs = profile.specs(images, seed);
    let ds = write_dataset(&specs, out)?;
    let [small, medium, large] = stratum_counts(&ds.ground_truth());
    println!("wrote {} images to {}", ds.len(), out.display());
    println!("objects  small {small}  medium {medium}  large {large}");
    Ok(ExitCode::SUCCESS)
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(config: &Path, out: &Path, opts: TrainOptions) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.data.load(&config_base(config))?;
    if data.is_empty() {
        bail!("training dataset is empty");
    }
    let summary = run_training(&cfg, &data, out, &opts).with_context(|| format!("training into {}", out.display()))?;
    if let (Some(first), Some(last)) = (summary.records.first(), summary.records.last()) {
        println!(
            "iterations {}..={}  loss {:.6} -> {:.6}",
            first.iteration, last.iteration, first.loss.total, last.loss.total
        );
    }
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn format_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
}

fn eval_table(r: &EvalResult) -> String {
    let cols = [
        ("AP", r.ap),
        ("AP50", r.ap50),
        ("AP75", r.ap75),
        ("AP_s", r.ap_s),
        ("AP_m", r.ap_m),
        ("AP_l", r.ap_l),
    ];
    let header: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>8}")).collect();
    let values: Vec<String> = cols.iter().map(|(_, v)| format!("{:>8}", format_ap(*v))).collect();
    format!("{}\n{}", header.join(""), values.join(""))
}

fn eval_json(r: &EvalResult) -> serde_json::Value {
    serde_json::json!({
        "ap": r.ap,
        "ap50": r.ap50,
        "ap75": r.ap75,
        "ap_s": r.ap_s,
        "ap_m": r.ap_m,
        "ap_l": r.ap_l,
        "per_threshold": r.per_threshold,
    })
}

fn eval(checkpoint: &Path, config: &Path, data: Option<&Path>, json_out: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let dataset = match data {
        Some(dir) => sodm::synth::load_dataset(dir)?,
        None => cfg.data.load(&config_base(config))?,
    };
    let model = Detector::new(&cfg.model)?;
    let params = load_params(&model, checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let result = evaluate_dataset(&model, &params, &dataset, &cfg.eval)?;
    let json = serde_json::to_string(&eval_json(&result))?;
    println!("{}", eval_table(&result));
    println!("{json}");
    if let Some(path) = json_out {
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn random_tensor(dims: Dims, seed: u64, scale: f32) -> Tensor4<f32> {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let data = (0..dims.len()).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor4::from_vec(dims, data).expect("length matches dims")
}

fn module_params(declare: impl FnOnce(&mut ParamInit<'_, f32>) -> sodm::Result<()>) -> Result<ModuleParams<f32>> {
    let mut params = ModuleParams::new();
    let mut rng = seeded_rng(1);
    declare(&mut ParamInit::new(&mut params, &mut rng))?;
    Ok(params)
}

fn bench(op: BenchOp, size: Dims, iters: usize, threads: usize) -> Result<ExitCode> {
    if iters == 0 {
        bail!("--iters must be positive");
    }
    let x = random_tensor(size, 0, 1.0);
    let c = size.c;
    let mut run: Box<dyn FnMut() -> sodm::Result<usize>> = match op {
        BenchOp::Conv2d => {
            let spec = ConvSpec::same(c, c, 3, 1);
            let w = random_tensor(spec.weight_dims(), 1, 0.1);
            let b = random_tensor(spec.bias_dims(), 2, 0.1);
            Box::new(move || Ok(conv2d(&x, &w, Some(&b), &spec)?.len()))
        }
        BenchOp::Deform => {
            let spec = DeformSpec::same(c, c, 3, 1);
            let w = random_tensor(spec.weight_dims(), 1, 0.1);
            let off = random_tensor(spec.offset_dims(size)?, 2, 1.5);
            Box::new(move || Ok(deform_conv2d(&x, &off, &w, None, &spec)?.0.len()))
        }
        BenchOp::Adaptive => {
            let geo = AdaptiveGeometry {
                kernel: 3,
                dilation: 1,
                groups: 1,
            };
            let kd = geo.kernel_dims(size);
            let logits = random_tensor(Dims::new(kd.n * kd.c, kd.h, kd.w, 1), 1, 1.0);
            let k = softmax_channels(&logits)?.reshape(kd)?;
            Box::new(move || Ok(adaptive_conv_apply(&x, &k, geo)?.len()))
        }
        BenchOp::Slpa => {
            let slpa = Slpa::new("slpa", &SlpaConfig::default())?;
            let params = module_params(|i| slpa.declare(i))?;
            Box::new(move || {
                let mut tape = Tape::new(Mode::Eval);
                let bound = params.bind(&mut tape);
                let xi = tape.constant(x.clone());
                let out = slpa.forward(&mut tape, &bound, xi)?;
                Ok(tape.dims(out.features)?.len())
            })
        }
        BenchOp::Msfem => {
            let msfem = Msfem::new("msfem", &MsfemConfig::new(c, c))?;
            let params = module_params(|i| msfem.declare(i))?;
            Box::new(move || {
                let mut tape = Tape::new(Mode::Eval);
                let bound = params.bind(&mut tape);
                let xi = tape.constant(x.clone());
                let out = msfem.forward(&mut tape, &bound, xi)?;
                Ok(tape.dims(out)?.len())
            })
        }
    };
    for _ in 0..3 {
        run()?;
    }
    let mut times = Vec::with_capacity(iters);
    let mut elements = 0;
    for _ in 0..iters {
        let t = Instant::now();
        elements = run()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = times[(times.len() - 1) / 2];
    let p95 = times[((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1];
    let wall: f64 = times.iter().sum();
    println!(
        "op {:<8} size {}x{}x{}x{} threads {threads} iters {iters}",
        op.to_possible_value().expect("named variant").get_name(),
        size.n,
        size.c,
        size.h,
        size.w
    );
    println!(
        "median {:.3} ms  p95 {:.3} ms  wall {:.3} s  throughput {:.3e} elements/s",
        median * 1e3,
        p95 * 1e3,
        wall,
        elements as f64 / median
    );
    Ok(ExitCode::SUCCESS)
}

//! `carafe` command-line tool.
//!
//! Exit status: 0 on success, 1 when a check or training run fails, 2 on
//! usage errors (bad flags, unknown kinds, out-of-range pixels).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carafe::baselines::{CarafeSettings, UpsamplerKind};
use carafe::cost::{self, round_count};
use carafe::gradcheck::{self, GradcheckOptions};
use carafe::rng::Rng;
use carafe::softmax::NormalizerMode;
use carafe::toy::{self, Pattern, ToyModel, ToyTaskSpec, TrainConfig};
use carafe::{ctns, selftest, viz, CarafeConfig, CarafeParams, Error, Tensor};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "carafe", version, about = "Content-aware feature reassembly toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// FLOPs per source pixel and parameter counts of every upsampler.
    CostTable(CostArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one upsampler on the toy task.
    Train(TrainArgs),
    /// Train several upsamplers under the same budget and seeds.
    Compare(CompareArgs),
    /// Write reassembly-kernel heatmaps for chosen target pixels.
    Visualize(VisualizeArgs),
    /// Run the built-in invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct CarafeFlags {
    #[arg(long, default_value_t = CarafeSettings::default().k_up)]
    k_up: usize,
    #[arg(long, default_value_t = CarafeSettings::default().k_encoder)]
    k_encoder: usize,
    /// Compressed channels, or `none` to drop the compressor.
    #[arg(long, default_value = "64")]
    c_mid: CMid,
    #[arg(long, default_value_t = NormalizerMode::Softmax)]
    normalizer: NormalizerMode,
}

impl CarafeFlags {
    fn settings(&self) -> CarafeSettings {
        CarafeSettings {
            k_up: self.k_up,
            k_encoder: self.k_encoder,
            c_mid: self.c_mid.0,
            normalizer: self.normalizer,
        }
    }
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, default_value_t = 256)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    sigma: usize,
    /// Comma-separated kinds; all kinds when omitted.
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<UpsamplerKind>,
    #[command(flatten)]
    carafe: CarafeFlags,
    /// Write the CSV here and print an aligned table; otherwise print the CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// `σ,k_up,k_encoder` triples separated by `;`.
    #[arg(long, value_parser = parse_configs)]
    configs: Option<Configs>,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, env = "CARAFE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Debug)]
struct Configs(Vec<(usize, usize, usize)>);

#[derive(Args, Debug)]
struct TaskFlags {
    #[arg(long, default_value_t = ToyTaskSpec::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = ToyTaskSpec::default().n_train)]
    n_train: usize,
    #[arg(long, default_value_t = ToyTaskSpec::default().n_eval)]
    n_eval: usize,
    #[arg(long, default_value_t = ToyTaskSpec::default().pattern)]
    pattern: Pattern,
    #[arg(long, default_value_t = ToyTaskSpec::default().noise_std)]
    noise_std: f64,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = ToyModel::DEFAULT_CHANNELS)]
    channels: usize,
    /// Seeds both the task and the initialization.
    #[arg(long, env = "CARAFE_SEED", default_value_t = 0)]
    seed: u64,
    /// Results CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TaskFlags {
    fn task(&self) -> ToyTaskSpec {
        ToyTaskSpec {
            image_size: self.image_size,
            n_train: self.n_train,
            n_eval: self.n_eval,
            pattern: self.pattern,
            seed: self.seed,
            noise_std: self.noise_std,
        }
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "carafe")]
    kind: UpsamplerKind,
    #[command(flatten)]
    flags: TaskFlags,
    /// Save the trained parameters as a tensor archive; a CARAFE
    /// configuration goes next to it with a `.cfg` suffix.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "nearest_conv,carafe")]
    kinds: Vec<UpsamplerKind>,
    #[arg(long, default_value_t = 3)]
    n_seeds: usize,
    #[command(flatten)]
    flags: TaskFlags,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    /// Tensor archive with `compressor.*` and `encoder.*` entries; random
    /// parameters from `--seed` when omitted.
    #[arg(long, requires = "config")]
    params: Option<PathBuf>,
    /// CARAFE configuration in key=value form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `C×H×W` CTNS feature map; random when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Target pixel `y,x` in the final output; repeatable. A 3×3 grid when omitted.
    #[arg(long, value_parser = parse_pixel)]
    at: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 1)]
    level_count: usize,
    #[arg(long, default_value = "carafe")]
    out_prefix: String,
    /// Channels and size of the random input.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    sigma: usize,
    #[arg(long, default_value_t = 5)]
    k_up: usize,
    #[arg(long, default_value_t = 3)]
    k_encoder: usize,
    #[arg(long, default_value = "4")]
    c_mid: CMid,
    #[arg(long, env = "CARAFE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Golden cost table to compare against instead of the built-in one.
    #[arg(long)]
    golden: Option<PathBuf>,
}

/// Compressor width; `none` drops the compressor.
#[derive(Clone, Copy, Debug)]
struct CMid(Option<usize>);

impl std::str::FromStr for CMid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(CMid(None));
        }
        s.parse()
            .map(|c| CMid(Some(c)))
            .map_err(|_| format!("expected a channel count or `none`, got `{s}`"))
    }
}

impl std::fmt::Display for CMid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(c) => write!(f, "{c}"),
            None => f.write_str("none"),
        }
    }
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or_else(|| format!("expected y,x, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad coordinate `{v}`"));
    Ok((p(y)?, p(x)?))
}

fn parse_configs(s: &str) -> Result<Configs, String> {
    s.split(';')
        .map(|t| {
            let v: Vec<usize> = t
                .split(',')
                .map(|n| n.trim().parse().map_err(|_| format!("bad number in `{t}`")))
                .collect::<Result<_, _>>()?;
            match v[..] {
                [a, b, c] => Ok((a, b, c)),
                _ => Err(format!("expected σ,k_up,k_encoder, got `{t}`")),
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Configs)
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            Error::TrainingDiverged { epoch } => Failure::Check(format!("training diverged at epoch {epoch}")),
            e => Failure::Check(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn echo_config(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        eprintln!("config {k}={v}");
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::Check(format!("cannot write {}: {e}", path.display())))
}

fn resolve_kinds(kinds: &[UpsamplerKind], settings: CarafeSettings) -> Vec<UpsamplerKind> {
    let base: Vec<UpsamplerKind> = if kinds.is_empty() {
        UpsamplerKind::all().to_vec()
    } else {
        kinds.to_vec()
    };
    base.into_iter()
        .map(|k| match k {
            UpsamplerKind::Carafe(_) => UpsamplerKind::Carafe(settings),
            k => k,
        })
        .collect()
}

fn cost_table(args: CostArgs) -> CmdResult {
    let kinds = resolve_kinds(&args.kinds, args.carafe.settings());
    echo_config(&[
        ("channels", args.channels.to_string()),
        ("sigma", args.sigma.to_string()),
        ("kinds", kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")),
        ("k_up", args.carafe.k_up.to_string()),
        ("k_encoder", args.carafe.k_encoder.to_string()),
        ("c_mid", args.carafe.c_mid.to_string()),
        ("normalizer", args.carafe.normalizer.to_string()),
    ]);
    let csv = cost::cost_table(args.channels, args.sigma, &kinds)?;
    let Some(out) = args.out else {
        print!("{csv}");
        return Ok(());
    };
    write_file(&out, csv.as_bytes())?;
    let mut table = format!("{:<10} {:>12} {:>8} {:>12} {:>8}\n", "kind", "FLOPs/px", "", "params", "");
    for &kind in &kinds {
        let r = cost::baseline_cost(kind, args.channels, args.sigma)?;
        let _ = writeln!(
            table,
            "{:<10} {:>12} {:>8} {:>12} {:>8}",
            kind.label(),
            r.flops_per_source_pixel,
            round_count(r.flops_per_source_pixel),
            r.params,
            round_count(r.params)
        );
    }
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        seeds: args.seeds,
        configs: args.configs.map_or(gradcheck::DEFAULT_CONFIGS.to_vec(), |c| c.0),
        tolerance: args.tolerance,
        epsilon: args.epsilon,
        base_seed: args.seed,
    };
    if opts.seeds == 0 {
        return Err(Failure::Usage("--seeds must be >= 1".into()));
    }
    echo_config(&[
        ("seeds", opts.seeds.to_string()),
        ("configs", format!("{:?}", opts.configs)),
        ("tolerance", opts.tolerance.to_string()),
        ("epsilon", opts.epsilon.to_string()),
        ("seed", opts.base_seed.to_string()),
    ]);
    let report = gradcheck::run_suite(&opts)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "worst relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            opts.tolerance
        )))
    }
}

fn echo_task(flags: &TaskFlags, extra: &[(&str, String)]) {
    let t = flags.task();
    let c = flags.train();
    let mut pairs = vec![
        ("image_size", t.image_size.to_string()),
        ("n_train", t.n_train.to_string()),
        ("n_eval", t.n_eval.to_string()),
        ("pattern", t.pattern.to_string()),
        ("noise_std", t.noise_std.to_string()),
        ("channels", flags.channels.to_string()),
        ("lr", c.lr.to_string()),
        ("momentum", c.momentum.to_string()),
        ("epochs", c.epochs.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("seed", c.seed.to_string()),
    ];
    pairs.extend_from_slice(extra);
    echo_config(&pairs);
}

fn finish_report(report: &toy::CompareReport, out: Option<&Path>) -> CmdResult {
    if let Some(out) = out {
        write_file(out, report.to_csv().as_bytes())?;
        println!("wrote {}", out.display());
    }
    print!("{}", report.summary_table());
    Ok(())
}

fn train(args: TrainArgs) -> CmdResult {
    let f = &args.flags;
    echo_task(f, &[("kind", args.kind.name().to_string())]);
    let (model, result) = toy::train_model(args.kind, f.channels, &f.task(), &f.train())?;
    for (e, (tl, el)) in result.train_losses.iter().zip(&result.eval_losses).enumerate() {
        println!("epoch {:>3}  train {tl:.6e}  eval {el:.6e}", e + 1);
    }
    let report = toy::CompareReport::from_runs(f.task(), f.train(), f.channels, vec![result])?;
    finish_report(&report, f.out.as_deref())?;
    if let Some(path) = &args.save_params {
        ctns::write_archive(path, &model.named_tensors())?;
        println!("wrote {}", path.display());
        if let Some(cfg) = model.carafe_config() {
            let cfg_path = sidecar(path);
            write_file(&cfg_path, cfg.to_kv().as_bytes())?;
            println!("wrote {}", cfg_path.display());
        }
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn compare(args: CompareArgs) -> CmdResult {
    let f = &args.flags;
    let kinds = args.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",");
    echo_task(f, &[("kinds", kinds), ("n_seeds", args.n_seeds.to_string())]);
    let report = toy::compare(&args.kinds, &f.task(), &f.train(), f.channels, args.n_seeds)?;
    finish_report(&report, f.out.as_deref())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn visualize(args: VisualizeArgs) -> CmdResult {
    let cfg = match &args.config {
        Some(path) => CarafeConfig::from_kv(&read_text(path)?)?,
        None => CarafeConfig::new(args.channels, args.sigma, args.k_up, args.k_encoder, args.c_mid.0)?,
    };
    let mut rng = Rng::new(args.seed);
    let params = match &args.params {
        Some(path) => CarafeParams::from_named_tensors(&cfg, &ctns::read_archive(path)?)?,
        None => CarafeParams::init(&cfg, &mut rng)?,
    };
    let x = match &args.input {
        Some(path) => ctns::read_tensor(path)?,
        None => Tensor::new(vec![cfg.in_channels, args.size, args.size], rng.normal(cfg.in_channels * args.size * args.size, 1.0))?,
    };
    let (_, h, w) = x.chw()?;
    let scale = cfg.sigma.pow(args.level_count as u32);
    let (oh, ow) = (h * scale, w * scale);
    let targets = if args.at.is_empty() {
        let mut t = Vec::new();
        for a in [1, 3, 5] {
            for b in [1, 3, 5] {
                t.push((oh * a / 6, ow * b / 6));
            }
        }
        t
    } else {
        args.at.clone()
    };
    echo_config(&[
        ("config", cfg.to_kv().trim_end().replace('\n', " ")),
        ("params", args.params.as_ref().map_or(format!("random(seed={})", args.seed), |p| p.display().to_string())),
        ("input", args.input.as_ref().map_or(format!("random {}×{h}×{w}", cfg.in_channels), |p| p.display().to_string())),
        ("level_count", args.level_count.to_string()),
        ("out_prefix", args.out_prefix.clone()),
    ]);
    for &(y, x_) in &targets {
        if y >= oh || x_ >= ow {
            return Err(Failure::Usage(format!("target pixel ({y},{x_}) outside the {oh}×{ow} output")));
        }
    }
    let fields = viz::chain_fields(&x, &params, &cfg, args.level_count)?;
    for &(y, xx) in &targets {
        let stem = format!("{}_y{y}_x{xx}", args.out_prefix);
        let window = viz::kernel_window(fields.last().expect("levels >= 1"), y, xx)?;
        let kernel_path = format!("{stem}_kernel.pgm");
        write_file(Path::new(&kernel_path), &viz::heatmap_pgm(&window)?)?;
        let acc = viz::accumulated_source_weights(&fields, y, xx)?;
        let acc_path = format!("{stem}_source.pgm");
        write_file(Path::new(&acc_path), &viz::heatmap_pgm(&acc)?)?;
        let overlay_path = format!("{stem}_overlay.ppm");
        write_file(Path::new(&overlay_path), &viz::overlay_ppm(&x, &acc)?)?;
        println!(
            "({y},{xx}) kernel sum {:.6} max {:.6}; source weight {:.6} -> {kernel_path} {acc_path} {overlay_path}",
            window.sum(),
            window.min_max().1,
            acc.sum()
        );
    }
    Ok(())
}

fn run_selftest(args: SelftestArgs) -> CmdResult {
    echo_config(&[(
        "golden",
        args.golden.as_ref().map_or("built-in".into(), |p| p.display().to_string()),
    )]);
    let golden = args.golden.as_deref().map(read_text).transpose()?;
    let report = selftest::run(golden.as_deref())?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check("selftest failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CostTable(a) => cost_table(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a),
        Command::Visualize(a) => visualize(a),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}

//! `lf`: command-line front end of the `longformer` crate.
//!
//! Environment: `LF_THREADS` pins the worker count, `LF_SEED` replaces the
//! seed of training runs. Exit codes: 0 ok, 1 usage or configuration
//! error, 2 data error, 3 numeric failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use longformer::bench::{time_scaling, BenchOptions, ScalingReport};
use longformer::checkpoint::{load_model, AnyModel, CheckpointElement};
use longformer::corpus::load_corpus;
use longformer::embed::FreezePolicy;
use longformer::eval::{eval_bpc_sliding, EvalProtocol};
use longformer::kernels::band::BandImpl;
use longformer::model::{
    beam_search, check_model_gradients, Architecture, BeamOptions, GradCheckConfig, Model, BOS_ID, EOS_ID,
};
use longformer::pattern::{render_pattern, write_pattern_csv, Mode, PatternConfig, RENDER_LIMIT};
use longformer::train::{evaluate_copy_task, run_copy_task, run_language_model, RunConfig, StepMetrics};
use longformer::{DType, Element, Error};

#[derive(Parser)]
#[command(name = "lf", version, about = "Sparse sliding-window attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attention pattern dumps.
    #[command(subcommand)]
    Pattern(PatternCommand),
    /// Time and memory scaling of one attention implementation.
    Bench(BenchArgs),
    /// Train a character LM (or masked LM) through the configured phases.
    TrainCharlm(TrainArgs),
    /// Bits per character with overlapping windows.
    EvalBpc(EvalArgs),
    /// Grow a checkpoint's position table by tiling.
    ExtendPos(ExtendArgs),
    /// Train an encoder-decoder on the configured copy task.
    TrainLed(TrainLedArgs),
    /// Decode from a checkpoint.
    Generate(GenerateArgs),
    /// Compare backprop gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Subcommand)]
enum PatternCommand {
    /// Write the 0/1 pattern matrix as PGM or CSV (chosen by extension).
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Bidir,
    Causal,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Bidir => Mode::Bidirectional,
            ModeArg::Causal => Mode::Causal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ImplArg {
    Loop,
    Chunk,
    Dense,
}

impl From<ImplArg> for BandImpl {
    fn from(i: ImplArg) -> BandImpl {
        match i {
            ImplArg::Loop => BandImpl::Loop,
            ImplArg::Chunk => BandImpl::Chunk,
            ImplArg::Dense => BandImpl::Dense,
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    n: usize,
    /// Full window width w (even); each side sees w/2 tokens.
    #[arg(long)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    dilation: usize,
    /// Comma-separated global positions.
    #[arg(long, value_delimiter = ',')]
    global: Vec<usize>,
    #[arg(long, value_enum, default_value = "bidir")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "impl", value_enum)]
    implementation: ImplArg,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Full window width w (even).
    #[arg(long)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 64)]
    dk: usize,
    #[arg(long, value_enum, default_value = "bidir")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    eval_len: usize,
    #[arg(long)]
    step: usize,
    /// Which part of the 90/5/5 split to score.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target_len: usize,
    #[arg(long)]
    out: PathBuf,
    /// Freeze policy recorded for the next training run.
    #[arg(long, default_value = "only_new_positions")]
    freeze: FreezePolicy,
}

#[derive(Args)]
struct TrainLedArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Held-out sequences decoded after training (0 skips).
    #[arg(long, default_value_t = 200)]
    eval_samples: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source bytes (encoder-decoder) or prompt bytes (character LM).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("LF_SEED") {
        Ok(s) => s
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("LF_SEED={s:?} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn pin_threads() -> anyhow::Result<()> {
    if let Ok(s) = std::env::var("LF_THREADS") {
        let n: usize = s
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("LF_THREADS={s:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("cannot start {n} workers: {e}"))?;
    }
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    if a.window % 2 != 0 {
        return Err(Error::Config(format!("window {} must be even", a.window)).into());
    }
    let mut globals = a.global.clone();
    globals.sort_unstable();
    globals.dedup();
    let cfg = PatternConfig::new(a.n, a.window / 2, a.dilation, a.mode.into()).with_globals(&globals);
    cfg.validate()?;
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut out = match ext {
        "pgm" | "csv" => create(&a.out)?,
        _ => return Err(Error::Config(format!("--out must end in .pgm or .csv, got {}", a.out.display())).into()),
    };
    if ext == "csv" && a.n > RENDER_LIMIT {
        write_pattern_csv(&cfg, &mut out)?;
    } else {
        let m = render_pattern(&cfg)?;
        if ext == "pgm" {
            m.write_pgm(&mut out)?;
        } else {
            m.write_csv(&mut out)?;
        }
    }
    out.flush()?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.window % 2 != 0 || a.window == 0 {
        return Err(Error::Config(format!("window {} must be even and positive", a.window)).into());
    }
    let report = time_scaling(&BenchOptions {
        implementation: a.implementation.into(),
        ns: a.n,
        half_window: a.window / 2,
        dk: a.dk,
        repeats: a.repeats,
        mode: a.mode.into(),
        seed: env_seed()?.unwrap_or(0),
    })?;
    let mut out = create(&a.out)?;
    report.write_csv(&mut out, true)?;
    out.flush()?;
    print_slopes(&report);
    Ok(())
}

fn print_slopes(r: &ScalingReport) {
    println!(
        "{}: time slope {:.3}, score slope {:.3}, peak slope {:.3}",
        r.implementation, r.time_slope, r.score_slope, r.peak_slope
    );
}

/// Metrics sink: CSV file when requested, a progress line every 100 steps.
fn metrics_logger(path: Option<&Path>) -> anyhow::Result<impl FnMut(&StepMetrics) -> longformer::Result<()>> {
    let mut file = match path {
        Some(p) => {
            let mut f = create(p)?;
            writeln!(f, "{}", StepMetrics::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };
    let t0 = Instant::now();
    Ok(move |m: &StepMetrics| {
        if let Some(f) = file.as_mut() {
            m.write_csv_row(&mut *f)?;
            f.flush()?;
        }
        if m.step % 100 == 0 {
            eprintln!(
                "step {:>6}  phase {}  loss {:.4}  bpc {:.4}  lr {:.2e}  {:.0}s",
                m.step,
                m.phase,
                m.loss_nats,
                m.bpc,
                m.lr,
                t0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })
}

fn train_charlm(a: TrainArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(&a.config)?;
    let corpus = load_corpus(&a.corpus)?;
    let seed = env_seed()?.unwrap_or(run.seed);
    let log = metrics_logger(a.metrics.as_deref())?;
    match run.dtype()? {
        DType::Single => save(&run_language_model::<f32>(&run, seed, corpus.train(), log)?, &a.out, run.freeze),
        DType::Double => save(&run_language_model::<f64>(&run, seed, corpus.train(), log)?, &a.out, run.freeze),
    }
}

fn save<T: CheckpointElement>(m: &Model<T>, path: &Path, freeze: FreezePolicy) -> anyhow::Result<()> {
    m.save(path, freeze)?;
    println!("saved {} ({} parameters)", path.display(), m.parameter_count());
    Ok(())
}

fn eval_bpc(a: EvalArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let bytes = match a.split {
        Split::Train => corpus.train(),
        Split::Dev => corpus.dev(),
        Split::Test => corpus.test(),
        Split::All => &corpus.bytes,
    };
    let proto = EvalProtocol {
        eval_len: a.eval_len,
        step: a.step,
    };
    let report = match load_model(&a.ckpt)? {
        AnyModel::F32(m, _) => eval_model(&m, bytes, proto)?,
        AnyModel::F64(m, _) => eval_model(&m, bytes, proto)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval_model<T: Element>(
    m: &Model<T>,
    bytes: &[u8],
    proto: EvalProtocol,
) -> anyhow::Result<longformer::eval::EvalReport> {
    if m.config.architecture != Architecture::CharLm {
        bail!(Error::Config("eval-bpc needs a charlm checkpoint".into()));
    }
    if proto.eval_len > m.config.max_positions {
        bail!(Error::Config(format!(
            "eval length {} exceeds the model's {} positions",
            proto.eval_len, m.config.max_positions
        )));
    }
    Ok(eval_bpc_sliding(m, bytes, proto)?)
}

fn extend_pos(a: ExtendArgs) -> anyhow::Result<()> {
    match load_model(&a.ckpt)? {
        AnyModel::F32(mut m, _) => {
            m.extend_positions(a.target_len)?;
            save(&m, &a.out, a.freeze)
        }
        AnyModel::F64(mut m, _) => {
            m.extend_positions(a.target_len)?;
            save(&m, &a.out, a.freeze)
        }
    }
}

fn train_led(a: TrainLedArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(&a.config)?;
    let seed = env_seed()?.unwrap_or(run.seed);
    let log = metrics_logger(a.metrics.as_deref())?;
    match run.dtype()? {
        DType::Single => finish_led(&run_copy_task::<f32>(&run, seed, log)?, &run, &a, seed),
        DType::Double => finish_led(&run_copy_task::<f64>(&run, seed, log)?, &run, &a, seed),
    }
}

fn finish_led<T: CheckpointElement>(m: &Model<T>, run: &RunConfig, a: &TrainLedArgs, seed: u64) -> anyhow::Result<()> {
    save(m, &a.out, run.freeze)?;
    if a.eval_samples > 0 {
        let task = run.task.ok_or_else(|| anyhow!("missing task"))?;
        // held-out draws come from a different stream than training
        let r = evaluate_copy_task(m, task, a.eval_samples, seed.wrapping_add(1 << 32))?;
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let input = fs::read(&a.input).map_err(|e| Error::Data(format!("cannot read {}: {e}", a.input.display())))?;
    let opts = BeamOptions {
        beam: a.beam,
        max_len: a.max_len,
        length_penalty: a.length_penalty,
        bos: BOS_ID,
        eos: EOS_ID,
    };
    let ids = match load_model(&a.ckpt)? {
        AnyModel::F32(m, _) => decode(&m, &input, opts)?,
        AnyModel::F64(m, _) => decode(&m, &input, opts)?,
    };
    let bytes: Vec<u8> = ids.into_iter().filter(|&t| t < 256).map(|t| t as u8).collect();
    let mut out = io::stdout().lock();
    out.write_all(&bytes)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn decode<T: Element>(m: &Model<T>, input: &[u8], opts: BeamOptions) -> anyhow::Result<Vec<usize>> {
    let bytes: Vec<usize> = input.iter().map(|&b| b as usize).collect();
    match m.config.architecture {
        Architecture::Led => {
            let mut src = vec![BOS_ID];
            src.extend_from_slice(&bytes);
            let mut scorer = m.led_scorer(&src)?;
            Ok(beam_search(&mut scorer, opts)?)
        }
        Architecture::CharLm => {
            let window = m.config.max_positions;
            let mut scorer = |prefix: &[usize]| -> longformer::Result<Vec<f64>> {
                // the prompt stands in for the start token
                let mut ctx: Vec<usize> = std::iter::once(BOS_ID).chain(bytes.iter().copied()).collect();
                ctx.extend_from_slice(&prefix[1..]);
                let ctx = &ctx[ctx.len().saturating_sub(window)..];
                let mut g = longformer::autodiff::Graph::new();
                let logits = m.charlm_logits(&mut g, ctx, None)?;
                let last = g.value(logits).row(ctx.len() - 1).to_vec();
                let max = last.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z = max + last.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
                Ok(last.iter().map(|v| v.as_f64() - z).collect())
            };
            Ok(beam_search(&mut scorer, opts)?)
        }
        Architecture::Mlm => bail!(Error::Config("generate needs a charlm or led checkpoint".into())),
    }
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", a.config.display())))?;
    let mut cfg: GradCheckConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("grad-check config: {e}")))?;
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    let r = check_model_gradients(&cfg)?;
    let worst = r.worst.as_ref().map_or(String::from("-"), |(n, i)| format!("{n}[{i}]"));
    println!(
        "checked {} coordinates, max relative error {:.3e} at {worst}",
        r.checked, r.max_rel_error
    );
    if !(r.max_rel_error < a.tolerance) {
        bail!(Error::NonFinite(format!(
            "relative error {:.3e} exceeds tolerance {:.1e}",
            r.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    pin_threads()?;
    match cli.command {
        Command::Pattern(PatternCommand::Render(a)) => render(a),
        Command::Bench(a) => bench(a),
        Command::TrainCharlm(a) => train_charlm(a),
        Command::EvalBpc(a) => eval_bpc(a),
        Command::ExtendPos(a) => extend_pos(a),
        Command::TrainLed(a) => train_led(a),
        Command::Generate(a) => generate(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return err.exit_code() as u8;
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

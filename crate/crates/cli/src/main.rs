//! `taat`: generate synthetic RGB+TIR sequences, track them, evaluate the
//! results, train the fusion module and run the built-in verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use taat::bench::{
    generate_sequence, preset_model, vot_eval, EvalReport, GenSpec, Protocol, ReplayTracker, Scheme, Sequence, SequenceEval,
    SequenceTracker, VotResult, DEFAULT_PRECISION_THRESHOLD, DEFAULT_SKIP, DEFAULT_SUCCESS_THRESHOLD,
};
use taat::config::RunConfig;
use taat::dfm::{train_dfm, DfmParams};
use taat::model::{init_model, Model};
use taat::oracle;
use taat::pipeline::{collect_fusion_samples, read_results, track_sequence, write_results, Modality};
use taat::weights::{load_weights, save_weights};
use taat::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_EVAL: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "taat", version, about = "RGB+thermal Siamese tracker with temporal aggregation and learned decision-level fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic two-modality sequences with manifests.
    Gen(GenArgs),
    /// Write an initial weight file (calibrated matching preset by default).
    InitWeights(InitArgs),
    /// Track one sequence and write per-frame boxes.
    Track(TrackArgs),
    /// Score a result file against a sequence's groundtruth.
    Eval(EvalArgs),
    /// Train the fusion module on responses collected from sequences.
    TrainDfm(TrainArgs),
    /// Compare fusion gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run every primitive against its brute-force reference.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Failure> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// `clean`, or degradations joined by `+`, e.g.
    /// `rgb_blackout(1,39)+tir_crossover(40,79)`.
    #[arg(long, default_value = "clean")]
    scheme: String,
    /// Sequences rendered in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
    /// Plain seeded random weights instead of the calibrated preset.
    #[arg(long)]
    random: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Sequence manifest.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `track.modality`.
    #[arg(long)]
    modality: Option<Modality>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value = "ope")]
    protocol: Protocol,
    #[arg(long)]
    report: PathBuf,
    /// Frames skipped before re-initialization (reset protocol).
    #[arg(long, default_value_t = DEFAULT_SKIP)]
    skip: usize,
    #[arg(long, default_value_t = DEFAULT_PRECISION_THRESHOLD)]
    precision_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SUCCESS_THRESHOLD)]
    success_threshold: f64,
    /// With the reset protocol, re-run this tracker after each failure
    /// instead of replaying the result file.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of sequence manifests (`*.toml`).
    #[arg(long)]
    data: PathBuf,
    /// Base weights; any fusion weights in the file are replaced.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Overrides `train.schedule.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss table; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Parameters probed per trial.
    #[arg(long, default_value_t = 20)]
    probes: usize,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io { .. } | Error::Format { .. } | Error::Weights(_) => EXIT_IO,
            Error::Eval(_) => EXIT_EVAL,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let cap = match std::env::var("TAAT_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("TAAT_THREADS={v:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    let n = match (jobs, cap) {
        (Some(0), _) => return Err(Failure::new(EXIT_CONFIG, "--jobs must be positive")),
        (Some(j), Some(c)) => j.min(c),
        (Some(j), None) => j,
        (None, Some(c)) => c,
        (None, None) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Failure::new(1, format!("cannot start worker threads: {e}")))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model, Failure> {
    let weights = load_weights(path)?;
    Ok(Model::from_weights(&weights, &cfg.model, cfg.track.tiam_flags)?)
}

fn cmd_gen(a: &GenArgs) -> Result<(), Failure> {
    let scheme: Scheme = a.scheme.parse()?;
    scheme.validate(a.frames)?;
    if a.frames < 10 {
        return Err(Failure::new(EXIT_CONFIG, format!("--frames {} is below the minimum of 10", a.frames)));
    }
    // an unwritable destination is a usage problem, not a data one
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot create {}: {e}", a.out.display())))?;
    let width = a.sequences.saturating_sub(1).to_string().len().max(3);
    pool(a.jobs)?.install(|| {
        (0..a.sequences).into_par_iter().try_for_each(|k| {
            let spec = GenSpec {
                seed: a.seed,
                index: k as u64,
                frames: a.frames,
                ..GenSpec::default()
            };
            generate_sequence(&spec, &scheme, &format!("seq{k:0width$}"), &a.out).map(|_| ())
        })
    })?;
    println!("wrote {} sequences to {}", a.sequences, a.out.display());
    Ok(())
}

fn cmd_init(a: &InitArgs) -> Result<(), Failure> {
    let cfg = a.config.load()?;
    let model = if a.random {
        init_model(&cfg.model, a.seed)?
    } else {
        preset_model(&cfg.model, &cfg.preset, &cfg.track, a.seed)?
    };
    save_weights(&a.out, &model.to_weights()?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> Result<(), Failure> {
    let mut cfg = a.config.load()?;
    if let Some(m) = a.modality {
        cfg.track.modality = m;
    }
    let model = load_model(&a.weights, &cfg)?;
    let seq = Sequence::load(&a.seq)?;
    let gt = seq.groundtruth();
    let start = Instant::now();
    let results = track_sequence(&model, &cfg.track, seq.frames(), &gt[0])?;
    let secs = start.elapsed().as_secs_f64();
    write_results(&a.out, &results)?;
    println!("tracked {} frames in {secs:.2} s ({:.1} fps)", results.len(), results.len() as f64 / secs.max(1e-9));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    let seq = Sequence::load(&a.seq)?;
    let gt = seq.groundtruth();
    let boxes: Vec<_> = read_results(&a.results)?.into_iter().map(|(b, _)| b).collect();
    if boxes.len() != gt.len() {
        return Err(Failure::new(
            EXIT_EVAL,
            format!("{} has {} boxes but {} has {} frames", a.results.display(), boxes.len(), a.seq.display(), gt.len()),
        ));
    }
    let vot: Option<VotResult> = match a.protocol {
        Protocol::Ope => None,
        Protocol::Reset => Some(match &a.weights {
            Some(w) => {
                let cfg = a.config.load()?;
                let model = load_model(w, &cfg)?;
                vot_eval(&mut SequenceTracker::new(&model, &cfg.track, &seq), &gt, a.skip)?
            }
            None => vot_eval(&mut ReplayTracker { boxes: boxes.clone() }, &gt, a.skip)?,
        }),
    };
    let report = EvalReport::build(
        a.protocol,
        a.precision_threshold,
        a.success_threshold,
        vot.as_ref().map(|_| a.skip),
        &[SequenceEval {
            name: &seq.manifest.name,
            results: &boxes,
            gt: &gt,
            vot: vot.as_ref(),
        }],
    )?;
    report.save(&a.report)?;
    let m = &report.aggregate;
    print!("precision {:.4}  success {:.4}  auc {:.4}", m.precision, m.success_rate, m.success_auc);
    if let (Some(acc), Some(rob), Some(eao)) = (m.accuracy, m.robustness, m.eao) {
        print!("  A {acc:.4}  R {rob:.4}  EAO {eao:.4}");
    }
    println!();
    Ok(())
}

fn manifests_in(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "toml") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, format!("no *.toml manifests in {}", dir.display())));
    }
    Ok(paths)
}

fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.config.load()?;
    if let Some(e) = a.epochs {
        cfg.train.schedule.epochs = e;
    }
    cfg.train.schedule.seed = a.seed;
    cfg.validate()?;
    let mut model = load_model(&a.weights, &cfg)?;
    let paths = manifests_in(&a.data)?;
    let samples: Vec<_> = pool(None)?.install(|| {
        paths
            .par_iter()
            .enumerate()
            .map(|(k, p)| -> Result<_, Error> {
                let seq = Sequence::load(p)?;
                let frames = seq.frames().collect::<Result<Vec<_>, _>>()?;
                // one stream per sequence keeps sampling independent of thread count
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                rng.set_stream(k as u64);
                collect_fusion_samples(
                    &model,
                    &cfg.track,
                    &frames,
                    &seq.groundtruth(),
                    cfg.train.samples_per_sequence,
                    cfg.train.max_shift,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let samples: Vec<_> = samples.into_iter().flatten().collect();
    let mut init_rng = ChaCha8Rng::seed_from_u64(a.seed);
    let d = &cfg.model.dfm;
    let init = DfmParams::init(d.widths, d.orientation, d.slope, &mut init_rng)?;
    let (params, logs) = pool(None)?.install(|| train_dfm(&samples, &cfg.train.schedule, init))?;
    model.dfm = Some(params);
    save_weights(&a.out, &model.to_weights()?)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", csv_path.display())))?;
    for l in &logs {
        w.serialize(l).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", csv_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let last = logs.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "trained on {} samples from {} sequences, {} epochs, final loss {last:.5}; wrote {} and {}",
        samples.len(),
        paths.len(),
        logs.len(),
        a.out.display(),
        csv_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let g = oracle::gradcheck(a.seed, a.trials, a.probes)?;
    println!(
        "gradcheck: {} trials, {} parameters, max relative error {:.3e} (limit {:.0e})",
        g.trials,
        g.parameters,
        g.max_relative_error,
        oracle::GRAD_TOLERANCE
    );
    if !g.passed() {
        return Err(Failure::new(EXIT_VERIFY, "gradient check failed"));
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> Result<(), Failure> {
    let checks = oracle::selftest(a.seed, a.instances)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {:<52} {} cases, max error {:.3e} (limit {:.0e})",
            if c.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.instances,
            c.max_error,
            c.tolerance
        );
        failed += usize::from(!c.passed());
    }
    let g = oracle::gradcheck(a.seed, a.instances, 20)?;
    println!(
        "{} {:<52} {} trials, max error {:.3e} (limit {:.0e})",
        if g.passed() { "ok  " } else { "FAIL" },
        "fusion gradients",
        g.trials,
        g.max_relative_error,
        oracle::GRAD_TOLERANCE
    );
    failed += usize::from(!g.passed());
    if failed > 0 {
        return Err(Failure::new(EXIT_VERIFY, format!("{failed} checks failed")));
    }
    println!("all {} checks passed", checks.len() + 1);
    Ok(())
}

fn main() -> ExitCode {
    let defaults = RunConfig::default()
        .to_toml()
        .unwrap_or_else(|e| format!("(cannot render defaults: {e})\n"));
    let help = format!("Default configuration (every key may be set in a --config file):\n\n{defaults}");
    let matches = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|c| c.after_long_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::InitWeights(a) => cmd_init(a),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainDfm(a) => cmd_train(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("taat: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

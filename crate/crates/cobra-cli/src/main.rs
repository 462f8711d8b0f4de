//! Command-line surface for the pipeline.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 verification failure, 2 missing input file, 3 malformed input file,
//! 4 invalid configuration, 5 benchmark timing error.
//!
//! Configuration precedence: flags > environment (COBRA_SSM_HOME for the
//! default checkpoint directory) > config file (--config, key=value lines)
//! > built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cobra_core::bench::{
    measure_throughput, measure_throughput_concurrent, report_csv, report_table, scaling_sweep,
    AttentionRef, ScalingConfig,
};
use cobra_core::error::BenchError;
use cobra_core::lm::{BackboneConfig, BackboneWeights, GenerationConfig, Sampling};
use cobra_core::pipeline::{TemplateKind, VlmPipeline};
use cobra_core::prompt::OcrOrdering;
use cobra_core::train::{
    run_variant, synthetic_dataset, train_toy, TrainConfig, TrainVariant,
};
use cobra_core::verify::{run_all, VerifyOptions};
use cobra_core::vision::{ingest_external_features, ImageInput, VisualFeatures};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_MISSING_FILE: u8 = 2;
const EXIT_MALFORMED_FILE: u8 = 3;
const EXIT_BAD_CONFIG: u8 = 4;
const EXIT_BENCH_ERROR: u8 = 5;

#[derive(Parser)]
#[command(
    name = "cobra",
    about = "Recurrent vision-language pipeline: answer questions about images, \
             benchmark decode scaling, run toy training, verify invariants",
    long_about = None,
    after_help = "Configuration precedence: flags > COBRA_SSM_HOME environment \
                  variable > --config file (key=value lines: model, template, \
                  ocr_order, projector, max_new, seed) > defaults. When no \
                  checkpoint is named anywhere, a deterministic seeded toy \
                  model is used.\n\nExit codes: 0 success, 1 verification \
                  failure, 2 missing input file, 3 malformed input file, \
                  4 invalid configuration, 5 benchmark timing error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer a question about an image (or run text-only).
    Generate(GenerateArgs),
    /// Throughput table and the decode-latency scaling sweep.
    Bench(BenchArgs),
    /// Toy supervised fine-tuning on synthetic data.
    Train(TrainArgs),
    /// Run every invariant suite and report pass/fail per suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Model checkpoint (.cssm). Falls back to $COBRA_SSM_HOME/model.cssm,
    /// then the config file, then a seeded toy model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Input image, .ppm (P6) or .raw (dims + f64 pixels).
    #[arg(long, conflicts_with = "features")]
    image: Option<PathBuf>,
    /// Pre-computed visual features (.cssm with a `features` entry).
    #[arg(long)]
    features: Option<PathBuf>,
    /// The question to ask.
    #[arg(long)]
    question: String,
    /// OCR reference string to include in the instruction.
    #[arg(long)]
    ocr: Option<String>,
    /// Where the OCR reference goes: first | last | none.
    #[arg(long, default_value = "first")]
    ocr_order: String,
    /// Prompt template: chat | base.
    #[arg(long)]
    template: Option<String>,
    /// Projector for the fallback seeded model: mlp | ldp.
    #[arg(long)]
    projector: Option<String>,
    /// Maximum tokens to generate.
    #[arg(long)]
    max_new: Option<usize>,
    /// Sampling temperature; omit for greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    /// Seed for the fallback model and for sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Write a per-step trace (prompt header plus step,token,micros lines).
    #[arg(long, alias = "report")]
    trace: Option<PathBuf>,
    /// Config file with key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Write the throughput rows and scaling sweep as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Output tokens per throughput run.
    #[arg(long, default_value_t = 256)]
    n_out: usize,
    /// Contexts for the scaling sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024, 2048, 4096])]
    contexts: Vec<usize>,
    /// Decode steps amortized per timing measurement.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Trim repetitions for a faster, noisier run.
    #[arg(long)]
    quick: bool,
    /// Also run N concurrent decoding sessions over shared weights
    /// (throughput under load; excluded from verification).
    #[arg(long)]
    load: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Where to write the trained checkpoint.
    #[arg(long, default_value = "model.cssm")]
    out: PathBuf,
    /// Write the loss curve as CSV (step,lr,loss).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Synthetic dataset size.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Training variant: ft2ep | ft1ep | prealign_ft.
    #[arg(long, default_value = "ft2ep")]
    variant: String,
    /// Run all three variants and print a comparison.
    #[arg(long)]
    compare: bool,
    /// Projector variant to train: mlp | ldp.
    #[arg(long, default_value = "mlp")]
    projector: String,
    /// Hyperparameter file (key=value lines: lr, weight_decay,
    /// warmup_ratio, epochs, batch_size, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller trial counts for interactive use.
    #[arg(long)]
    quick: bool,
    /// Write a machine-readable summary (CSV: suite,passed,millis,detail).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::Bench(args) => bench(args),
        Command::Train(args) => train(args),
        Command::Verify(args) => verify(args),
    }
}

fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, ExitCode> {
    if !path.exists() {
        eprintln!("config file not found: {}", path.display());
        return Err(ExitCode::from(EXIT_MISSING_FILE));
    }
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read config file {}: {e}", path.display());
            return Err(ExitCode::from(EXIT_MALFORMED_FILE));
        }
    };
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => {
                eprintln!("malformed config line (want key=value): {line:?}");
                return Err(ExitCode::from(EXIT_BAD_CONFIG));
            }
        }
    }
    Ok(map)
}

/// Resolve the checkpoint path: flag > $COBRA_SSM_HOME/model.cssm > config
/// file. None means "use the seeded toy model".
fn resolve_model_path(
    flag: &Option<PathBuf>,
    cfg: &BTreeMap<String, String>,
) -> Option<PathBuf> {
    if let Some(p) = flag {
        return Some(p.clone());
    }
    if let Ok(home) = std::env::var("COBRA_SSM_HOME") {
        return Some(PathBuf::from(home).join("model.cssm"));
    }
    cfg.get("model").map(PathBuf::from)
}

fn load_pipeline(
    path: Option<PathBuf>,
    projector: &str,
    seed: u64,
) -> Result<VlmPipeline, ExitCode> {
    match path {
        Some(p) => {
            if !p.exists() {
                eprintln!("checkpoint not found: {}", p.display());
                return Err(ExitCode::from(EXIT_MISSING_FILE));
            }
            VlmPipeline::load(&p).map_err(|e| {
                eprintln!("malformed checkpoint {}: {e}", p.display());
                ExitCode::from(EXIT_MALFORMED_FILE)
            })
        }
        None => {
            eprintln!("no checkpoint named; using a seeded toy model (seed {seed})");
            VlmPipeline::toy(projector, seed).map_err(|e| {
                eprintln!("cannot build toy model: {e}");
                ExitCode::from(EXIT_BAD_CONFIG)
            })
        }
    }
}

fn load_image(path: &Path) -> Result<ImageInput, ExitCode> {
    if !path.exists() {
        eprintln!("image not found: {}", path.display());
        return Err(ExitCode::from(EXIT_MISSING_FILE));
    }
    let result = if path.extension().is_some_and(|e| e == "raw") {
        ImageInput::from_raw(path)
    } else {
        ImageInput::from_ppm(path)
    };
    result.map_err(|e| {
        eprintln!("malformed image {}: {e}", path.display());
        ExitCode::from(EXIT_MALFORMED_FILE)
    })
}

fn load_features(path: &Path) -> Result<VisualFeatures, ExitCode> {
    if !path.exists() {
        eprintln!("feature file not found: {}", path.display());
        return Err(ExitCode::from(EXIT_MISSING_FILE));
    }
    ingest_external_features(path).map_err(|e| {
        eprintln!("malformed feature file {}: {e}", path.display());
        ExitCode::from(EXIT_MALFORMED_FILE)
    })
}

fn generate(args: GenerateArgs) -> ExitCode {
    let file_cfg = match &args.config {
        Some(p) => match read_config_file(p) {
            Ok(c) => c,
            Err(code) => return code,
        },
        None => BTreeMap::new(),
    };
    let pick = |flag: &Option<String>, key: &str, default: &str| -> String {
        flag.clone()
            .or_else(|| file_cfg.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    };
    let template_name = pick(&args.template, "template", "chat");
    let template: TemplateKind = match template_name.parse() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let ordering: OcrOrdering = match pick(&Some(args.ocr_order.clone()), "ocr_order", "first").parse() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let projector = pick(&args.projector, "projector", "mlp");
    let seed = args
        .seed
        .or_else(|| file_cfg.get("seed").and_then(|s| s.parse().ok()))
        .unwrap_or(0);
    let max_new = args
        .max_new
        .or_else(|| file_cfg.get("max_new").and_then(|s| s.parse().ok()))
        .unwrap_or(64);

    let model_path = resolve_model_path(&args.model, &file_cfg);
    let pipe = match load_pipeline(model_path, &projector, seed) {
        Ok(p) => p,
        Err(code) => return code,
    };

    let image = match &args.image {
        Some(p) => match load_image(p) {
            Ok(i) => Some(i),
            Err(code) => return code,
        },
        None => None,
    };
    let features = match &args.features {
        Some(p) => match load_features(p) {
            Ok(f) => Some(f),
            Err(code) => return code,
        },
        None => None,
    };

    let gen_cfg = GenerationConfig {
        max_new,
        sampling: match args.temperature {
            Some(t) => Sampling::Temperature(t),
            None => Sampling::Greedy,
        },
        seed,
        ..Default::default()
    };
    let out = match pipe.answer(
        image.as_ref(),
        features.as_ref(),
        &args.question,
        args.ocr.as_deref(),
        ordering,
        template,
        gen_cfg,
    ) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("generation failed: {e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };

    if let Some(trace_path) = &args.trace {
        let mut text = format!("# prompt: {}\n", out.prompt.escape_default());
        text.push_str(&format!("# visual_tokens: {}\n", out.visual_tokens));
        text.push_str("step,token,micros\n");
        for t in &out.trace {
            text.push_str(&format!("{},{},{}\n", t.step, t.token, t.micros));
        }
        if let Err(e) = std::fs::write(trace_path, text) {
            eprintln!("cannot write trace {}: {e}", trace_path.display());
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    }
    println!("{}", out.text);
    ExitCode::SUCCESS
}

fn bench(args: BenchArgs) -> ExitCode {
    let reps = if args.quick { 2 } else { 5 };
    eprintln!("throughput: desk pipelines, {} output tokens, median of {reps}", args.n_out);
    let img = ImageInput::filled(378, [0.35, 0.55, 0.25]);
    let mut rows = Vec::new();
    for kind in ["mlp", "ldp"] {
        let pipe = match VlmPipeline::desk(kind, args.seed) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("cannot build pipeline: {e}");
                return ExitCode::from(EXIT_BAD_CONFIG);
            }
        };
        match measure_throughput(&pipe, &img, "Describe the image specifically", args.n_out, reps)
        {
            Ok(mut r) => {
                r.model_tag = format!("cobra-desk-{kind}");
                rows.push(r);
            }
            Err(e) => return bench_error(e),
        }
    }
    print!("{}", report_table(&rows));

    if let Some(sessions) = args.load {
        eprintln!("throughput under load: {sessions} concurrent sessions");
        let pipe = VlmPipeline::desk("mlp", args.seed).expect("desk config is valid");
        match measure_throughput_concurrent(&pipe, &img, "Describe the image specifically", args.n_out, sessions)
        {
            Ok(loaded) => print!("{}", report_table(&loaded)),
            Err(e) => return bench_error(e),
        }
    }

    eprintln!("scaling sweep: contexts {:?}, {} steps per measurement", args.contexts, args.steps);
    let model = BackboneWeights::seeded(
        BackboneConfig {
            vocab: 300,
            model_dim: 64,
            layers: 4,
            state_dim: 16,
            expand: 2,
            conv_width: 4,
            tie_embeddings: true,
        },
        args.seed ^ 0xBE9C,
    )
    .expect("bench config is valid");
    let attn = AttentionRef::from_seed(64, args.seed ^ 0xA77);
    let cfg = ScalingConfig {
        contexts: args.contexts.clone(),
        steps_per_measurement: args.steps,
        reps,
        seed: args.seed,
    };
    let sweep = match scaling_sweep(&model, &attn, &cfg) {
        Ok(s) => s,
        Err(e) => return bench_error(e),
    };
    println!();
    println!(
        "{:<10} {:>18} {:>18} {:>16} {:>14}",
        "Context", "SSM us/token", "Attn us/token", "SSM state (B)", "Cache entries"
    );
    for r in &sweep.rows {
        println!(
            "{:<10} {:>18.2} {:>18.2} {:>16} {:>14}",
            r.context, r.ssm_us_per_token, r.attn_us_per_token, r.ssm_state_bytes, r.attn_cache_entries
        );
    }
    println!();
    println!(
        "slopes (us per token per context token): ssm {:+.3e}, attention {:+.3e}",
        sweep.ssm_slope, sweep.attn_slope
    );

    if let Some(path) = &args.report {
        let mut csv = report_csv(&rows);
        csv.push('\n');
        csv.push_str(&sweep.csv());
        if let Err(e) = std::fs::write(path, csv) {
            eprintln!("cannot write report {}: {e}", path.display());
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    }
    ExitCode::SUCCESS
}

fn bench_error(e: BenchError) -> ExitCode {
    eprintln!("benchmark error: {e}");
    ExitCode::from(EXIT_BENCH_ERROR)
}

fn train(args: TrainArgs) -> ExitCode {
    let pipe = match VlmPipeline::toy(&args.projector, args.seed) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot build pipeline: {e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let data = synthetic_dataset(args.samples, 28, args.seed.wrapping_add(1));
    let mut cfg = TrainConfig {
        seed: args.seed,
        ..TrainConfig::toy()
    };
    if let Some(path) = &args.config {
        if !path.exists() {
            eprintln!("train config not found: {}", path.display());
            return ExitCode::from(EXIT_MISSING_FILE);
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return ExitCode::from(EXIT_MALFORMED_FILE);
            }
        };
        cfg = match TrainConfig::from_kv(&text, cfg) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("bad train config: {e}");
                return ExitCode::from(EXIT_BAD_CONFIG);
            }
        };
    }

    if args.compare {
        println!("{:<12} {:>10} {:>10} {:>7}", "variant", "initial", "final", "steps");
        for v in TrainVariant::all() {
            match run_variant(v, &pipe, &data, &cfg) {
                Ok((outcome, _)) => {
                    println!(
                        "{:<12} {:>10.4} {:>10.4} {:>7}",
                        outcome.variant_id,
                        outcome.report.initial_loss,
                        outcome.report.final_loss,
                        outcome.report.curve.len()
                    );
                }
                Err(e) => {
                    eprintln!("variant {} failed: {e}", v.id());
                    return ExitCode::from(EXIT_BAD_CONFIG);
                }
            }
        }
        return ExitCode::SUCCESS;
    }

    let variant: TrainVariant = match args.variant.parse() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let (outcome, trained) = match variant {
        TrainVariant::Ft2Ep => {
            let mut model = pipe.clone();
            match train_toy(&mut model, &data, &cfg) {
                Ok(report) => (
                    cobra_core::train::VariantOutcome {
                        variant_id: variant.id(),
                        report,
                        backbone_frozen_in_phase1: None,
                    },
                    model,
                ),
                Err(e) => {
                    eprintln!("training failed: {e}");
                    return ExitCode::from(EXIT_BAD_CONFIG);
                }
            }
        }
        other => match run_variant(other, &pipe, &data, &cfg) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("training failed: {e}");
                return ExitCode::from(EXIT_BAD_CONFIG);
            }
        },
    };

    println!(
        "{}: loss {:.4} -> {:.4} over {} steps",
        outcome.variant_id,
        outcome.report.initial_loss,
        outcome.report.final_loss,
        outcome.report.curve.len()
    );
    if let Some(curve_path) = &args.curve {
        if let Err(e) = std::fs::write(curve_path, outcome.report.curve_csv()) {
            eprintln!("cannot write curve {}: {e}", curve_path.display());
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    }
    if let Err(e) = trained.save(&args.out) {
        eprintln!("cannot write checkpoint {}: {e}", args.out.display());
        return ExitCode::from(EXIT_BAD_CONFIG);
    }
    eprintln!("checkpoint written to {}", args.out.display());
    ExitCode::SUCCESS
}

fn verify(args: VerifyArgs) -> ExitCode {
    let results = run_all(&VerifyOptions { quick: args.quick });
    let mut failures = 0usize;
    for r in &results {
        println!(
            "{} {:<32} {:>7} ms  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.millis,
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    println!(
        "{}/{} suites passed",
        results.len() - failures,
        results.len()
    );
    if let Some(path) = &args.report {
        let mut csv = String::from("suite,passed,millis,detail\n");
        for r in &results {
            csv.push_str(&format!(
                "{},{},{},{:?}\n",
                r.name, r.passed, r.millis, r.detail
            ));
        }
        if let Err(e) = std::fs::write(path, csv) {
            eprintln!("cannot write report {}: {e}", path.display());
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    }
    if failures > 0 {
        ExitCode::from(EXIT_VERIFY_FAILED)
    } else {
        ExitCode::SUCCESS
    }
}

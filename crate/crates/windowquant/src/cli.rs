//! Command-line surface: calibration, width search, end-to-end runs with
//! ablation flags, and frame/batch sweeps. Configuration and all output
//! documents are JSON; every document carries a schema version, the
//! resolved configuration, and the seed, enough to reproduce the run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::pipeline::{
    calibrate, generate_scene, run_batch, run_pipeline, Mode, PipelineOptions, PipelineReport,
    SyntheticScene, ToyModel, ToyModelSpec,
};
use crate::search::{search_config_with, thresholds_for, BitWidthConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes: stable contract.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RESOURCE_CAP: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
}

fn default_vocab() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    #[serde(default = "default_text_tokens")]
    pub text_tokens: usize,
    #[serde(default)]
    pub relevant_windows: Vec<usize>,
}

fn default_text_tokens() -> usize {
    4
}

/// The run configuration document, read from the positional config path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_token_cap")]
    pub token_cap: usize,
    #[serde(default)]
    pub no_fusion: bool,
    #[serde(default)]
    pub no_reorder: bool,
    #[serde(default)]
    pub no_first_pin: bool,
    #[serde(default)]
    pub no_search: bool,
}

fn default_alpha() -> f64 {
    2.0
}
fn default_window_size() -> usize {
    32
}
fn default_steps() -> usize {
    8
}
fn default_mode() -> Mode {
    Mode::Windowquant
}
fn default_batch() -> usize {
    1
}
fn default_token_cap() -> usize {
    16384
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.model.layers == 0
            || self.model.heads == 0
            || self.model.head_dim == 0
            || self.model.vocab == 0
        {
            return Err("model counts must all be positive".to_string());
        }
        if self.scene.num_frames == 0 || self.scene.tokens_per_frame == 0 {
            return Err("scene frame counts must be positive".to_string());
        }
        if self.window_size == 0 || self.steps == 0 || self.batch == 0 {
            return Err("window_size, steps, and batch must be positive".to_string());
        }
        if self.alpha <= 0.0 {
            return Err("alpha must be positive".to_string());
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ToyModelSpec {
        ToyModelSpec {
            layers: self.model.layers,
            heads: self.model.heads,
            head_dim: self.model.head_dim,
            vocab: self.model.vocab,
            seed: self.seed,
        }
    }

    /// Scene for batch request `r`; request seeds derive from the master
    /// seed so a whole batch reproduces from one number.
    pub fn scene_spec(&self, request: usize) -> SyntheticScene {
        SyntheticScene {
            num_frames: self.scene.num_frames,
            tokens_per_frame: self.scene.tokens_per_frame,
            window_size: self.window_size,
            text_tokens: self.scene.text_tokens,
            relevant_window_ids: self.scene.relevant_windows.clone(),
            seed: self.seed.wrapping_add(1 + request as u64),
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            mode: self.mode,
            alpha: self.alpha,
            window_size: self.window_size,
            steps: self.steps,
            fusion: !self.no_fusion,
            reorder: !self.no_reorder,
            pin_first: !self.no_first_pin,
            search: !self.no_search,
            token_cap: self.token_cap,
            forced_config: None,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "windowquant",
    about = "Window-level mixed-precision KV-cache quantization harness",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Path to the JSON run configuration.
    pub config: PathBuf,
    /// Write the output document here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Override the configured mode.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Override the configured batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Override the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Use the unfused dequantize-then-multiply path (timing only;
    /// numerics are unchanged).
    #[arg(long)]
    pub no_fusion: bool,
    /// Leave windows in original order (hardware-inefficient layout).
    #[arg(long)]
    pub no_reorder: bool,
    /// Do not force the first window to fp16.
    #[arg(long)]
    pub no_first_pin: bool,
    /// Assign window widths at random (seeded) instead of searching.
    #[arg(long)]
    pub no_search: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Frame counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub frames: Vec<usize>,
    /// Batch sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub batches: Vec<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Calibrate layer sensitivities and write the threshold document.
    Calibrate(CommonArgs),
    /// Run the window-level width search and write the config document.
    Search(CommonArgs),
    /// Execute the full pipeline and write the run report.
    Run(RunArgs),
    /// Sweep frame counts and batch sizes, reporting memory and throughput.
    Bench(BenchArgs),
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "windowquant" => Ok(Mode::Windowquant),
        "fp16-oracle" => Ok(Mode::Fp16Oracle),
        "rtn-int4" => Ok(Mode::RtnInt4),
        "rtn-int2" => Ok(Mode::RtnInt2),
        other => Err(format!(
            "unknown mode {other:?} (expected windowquant, fp16-oracle, rtn-int4, rtn-int2)"
        )),
    }
}

#[derive(Debug, Serialize)]
struct CalibrationDocument {
    schema_version: u32,
    seed: u64,
    config: RunConfig,
    layers: Vec<CalibrationEntry>,
}

#[derive(Debug, Serialize)]
struct CalibrationEntry {
    layer: usize,
    sensitivity: f64,
    t_low: f64,
    t_high: f64,
}

#[derive(Debug, Serialize)]
struct SearchDocument {
    schema_version: u32,
    seed: u64,
    config: RunConfig,
    bit_widths: BitWidthConfig,
}

#[derive(Debug, Serialize)]
struct BatchDocument {
    schema_version: u32,
    seed: u64,
    config: RunConfig,
    shared_config: BitWidthConfig,
    reports: Vec<PipelineReport>,
}

/// One row of the bench sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub frames: usize,
    pub batch: usize,
    pub bytes_total: u64,
    pub bytes_saved: u64,
    pub decode_tokens_per_sec: f64,
}

#[derive(Debug, Serialize)]
struct BenchDocument {
    schema_version: u32,
    seed: u64,
    config: RunConfig,
    rows: Vec<BenchRow>,
}

fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| format!("config parse failure: {e}"))?;
    config.validate()?;
    Ok(config)
}

fn emit(document: &impl Serialize, output: Option<&Path>) -> Result<(), String> {
    let text = serde_json::to_string_pretty(document).map_err(|e| e.to_string())?;
    match output {
        Some(path) => std::fs::write(path, text.as_bytes())
            .map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => {
            use std::io::Write;
            match writeln!(std::io::stdout(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.to_string()),
                _ => Ok(()),
            }
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::TokenCapExceeded { .. } => EXIT_RESOURCE_CAP,
        _ => EXIT_CONFIG,
    }
}

fn cmd_calibrate(args: &CommonArgs) -> Result<(), (i32, String)> {
    let mut config = load_config(&args.config).map_err(|m| (EXIT_CONFIG, m))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model = ToyModel::new(config.model_spec())
        .map_err(|e| (exit_code_for(&e), e.to_string()))?;
    let scene = config.scene_spec(0);
    let run = || -> crate::error::Result<CalibrationDocument> {
        let (visual, text) = generate_scene(&scene, config.model_spec().embed_dim())?;
        let sens = calibrate(&model, &visual.vstack(&text)?)?;
        let thresholds = thresholds_for(&sens, config.alpha)?;
        let layers = sens
            .0
            .iter()
            .enumerate()
            .map(|(layer, &sensitivity)| CalibrationEntry {
                layer,
                sensitivity,
                t_low: thresholds.low[layer],
                t_high: thresholds.high[layer],
            })
            .collect();
        Ok(CalibrationDocument {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            config: config.clone(),
            layers,
        })
    };
    let document = run().map_err(|e| (exit_code_for(&e), e.to_string()))?;
    eprintln!(
        "calibrated {} layers (alpha = {})",
        document.layers.len(),
        config.alpha
    );
    emit(&document, args.output.as_deref()).map_err(|m| (EXIT_CONFIG, m))
}

fn cmd_search(args: &CommonArgs) -> Result<(), (i32, String)> {
    let mut config = load_config(&args.config).map_err(|m| (EXIT_CONFIG, m))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let run = || -> crate::error::Result<SearchDocument> {
        let model = ToyModel::new(config.model_spec())?;
        let scene = config.scene_spec(0);
        let (visual, text) = generate_scene(&scene, config.model_spec().embed_dim())?;
        let sens = calibrate(&model, &visual.vstack(&text)?)?;
        let bit_widths = search_config_with(
            &visual,
            &text,
            &sens,
            config.window_size,
            config.alpha,
            !config.no_first_pin,
        )?;
        Ok(SearchDocument {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            config: config.clone(),
            bit_widths,
        })
    };
    let document = run().map_err(|e| (exit_code_for(&e), e.to_string()))?;
    eprintln!(
        "searched {} layers x {} windows",
        document.bit_widths.layers(),
        document.bit_widths.num_windows()
    );
    emit(&document, args.output.as_deref()).map_err(|m| (EXIT_CONFIG, m))
}

fn cmd_run(args: &RunArgs) -> Result<(), (i32, String)> {
    let mut config = load_config(&args.common.config).map_err(|m| (EXIT_CONFIG, m))?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(batch) = args.batch {
        config.batch = batch;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    config.no_fusion |= args.no_fusion;
    config.no_reorder |= args.no_reorder;
    config.no_first_pin |= args.no_first_pin;
    config.no_search |= args.no_search;
    config.validate().map_err(|m| (EXIT_CONFIG, m))?;

    let opts = config.pipeline_options();
    if config.batch == 1 {
        let run = run_pipeline(config.model_spec(), &config.scene_spec(0), &opts)
            .map_err(|e| (exit_code_for(&e), e.to_string()))?;
        summarize(&run.report);
        emit(&run.report, args.common.output.as_deref()).map_err(|m| (EXIT_CONFIG, m))
    } else {
        let scenes: Vec<SyntheticScene> =
            (0..config.batch).map(|r| config.scene_spec(r)).collect();
        let batch = run_batch(config.model_spec(), &scenes, &opts)
            .map_err(|e| (exit_code_for(&e), e.to_string()))?;
        for run in &batch.runs {
            summarize(&run.report);
        }
        let document = BatchDocument {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            config: config.clone(),
            shared_config: batch.shared_config.clone(),
            reports: batch.runs.iter().map(|r| r.report.clone()).collect(),
        };
        emit(&document, args.common.output.as_deref()).map_err(|m| (EXIT_CONFIG, m))
    }
}

fn summarize(report: &PipelineReport) {
    eprintln!(
        "mode {:?}: {} tokens, avg {:.2} bits, {} bytes saved, mean rel err {:.3e}, token match {:.0}%",
        report.mode,
        report.tokens.len(),
        report.memory.report.average_bit_width,
        report.memory.report.bytes_saved,
        report.oracle_error.mean_rel_error,
        report.oracle_error.token_match_fraction * 100.0
    );
    if let Some(warning) = &report.layout_warning {
        eprintln!("warning: {warning}");
    }
}

/// Sweep `frames x batches` for a config; pure so tests can call it.
pub fn bench_rows(
    config: &RunConfig,
    frames: &[usize],
    batches: &[usize],
) -> crate::error::Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(frames.len() * batches.len());
    for &f in frames {
        for &b in batches {
            let mut cfg = config.clone();
            cfg.scene.num_frames = f;
            cfg.batch = b;
            let opts = cfg.pipeline_options();
            let mut bytes_total = 0u64;
            let mut bytes_saved = 0u64;
            let mut decode_ms = 0.0f64;
            let mut decode_tokens = 0usize;
            if b == 1 {
                let run = run_pipeline(cfg.model_spec(), &cfg.scene_spec(0), &opts)?;
                bytes_total += run.report.memory.report.bytes_total;
                bytes_saved += run.report.memory.report.bytes_saved;
                decode_ms += run.report.timings.decode_ms;
                decode_tokens += run.report.tokens.len().saturating_sub(1);
            } else {
                let scenes: Vec<SyntheticScene> =
                    (0..b).map(|r| cfg.scene_spec(r)).collect();
                let batch = run_batch(cfg.model_spec(), &scenes, &opts)?;
                for run in &batch.runs {
                    bytes_total += run.report.memory.report.bytes_total;
                    bytes_saved += run.report.memory.report.bytes_saved;
                    decode_ms += run.report.timings.decode_ms;
                    decode_tokens += run.report.tokens.len().saturating_sub(1);
                }
            }
            rows.push(BenchRow {
                frames: f,
                batch: b,
                bytes_total,
                bytes_saved,
                decode_tokens_per_sec: if decode_ms > 0.0 {
                    decode_tokens as f64 / (decode_ms / 1e3)
                } else {
                    0.0
                },
            });
        }
    }
    Ok(rows)
}

fn cmd_bench(args: &BenchArgs) -> Result<(), (i32, String)> {
    let mut config = load_config(&args.common.config).map_err(|m| (EXIT_CONFIG, m))?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if args.frames.is_empty() || args.batches.is_empty() {
        return Err((EXIT_CONFIG, "frames and batches must be non-empty".to_string()));
    }
    let rows = bench_rows(&config, &args.frames, &args.batches)
        .map_err(|e| (exit_code_for(&e), e.to_string()))?;
    for row in &rows {
        eprintln!(
            "frames {:4} batch {:3}: {:>10} bytes total, {:>10} bytes saved, {:8.1} tok/s",
            row.frames, row.batch, row.bytes_total, row.bytes_saved, row.decode_tokens_per_sec
        );
    }
    let document = BenchDocument {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        config: config.clone(),
        rows,
    };
    emit(&document, args.common.output.as_deref()).map_err(|m| (EXIT_CONFIG, m))
}

/// Execute a parsed command line, returning the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Search(args) => cmd_search(args),
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err((code, message)) => {
            eprintln!("error: {message}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config_json() -> &'static str {
        r#"{
            "model": {"layers": 2, "heads": 2, "head_dim": 4},
            "scene": {"num_frames": 4, "tokens_per_frame": 4},
            "window_size": 4,
            "steps": 4,
            "seed": 7
        }"#
    }

    #[test]
    fn config_defaults_and_validation() {
        let config: RunConfig = serde_json::from_str(minimal_config_json()).unwrap();
        assert_eq!(config.alpha, 2.0);
        assert_eq!(config.mode, Mode::Windowquant);
        assert_eq!(config.batch, 1);
        assert_eq!(config.token_cap, 16384);
        assert!(config.validate().is_ok());

        let bad: RunConfig = serde_json::from_str(
            &minimal_config_json().replace("\"layers\": 2", "\"layers\": 0"),
        )
        .unwrap();
        assert!(bad.validate().is_err());

        assert!(serde_json::from_str::<RunConfig>("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for (s, m) in [
            ("windowquant", Mode::Windowquant),
            ("fp16-oracle", Mode::Fp16Oracle),
            ("rtn-int4", Mode::RtnInt4),
            ("rtn-int2", Mode::RtnInt2),
        ] {
            assert_eq!(parse_mode(s).unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{s}\""));
        }
        assert!(parse_mode("int8").is_err());
    }

    #[test]
    fn bench_rows_shape_and_monotone_savings() {
        let config: RunConfig = serde_json::from_str(minimal_config_json()).unwrap();
        let rows = bench_rows(&config, &[4, 8, 16], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 6);
        // Savings never decrease as frames grow, per batch size.
        for b_idx in 0..2 {
            let saved: Vec<u64> = rows
                .iter()
                .filter(|r| r.batch == [1, 2][b_idx])
                .map(|r| r.bytes_saved)
                .collect();
            assert!(saved.windows(2).all(|w| w[0] <= w[1]), "saved {saved:?}");
        }
    }
}

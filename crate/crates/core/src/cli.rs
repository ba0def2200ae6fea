//! Command-line front end. Each subcommand maps onto one library module.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{layer_sweep, layer_table, token_budget, LayerEntry, TokenBudgetReport};
use crate::cost_model::{estimate, UPPER_BOUND_NOTE};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::pruning::{keep_count, PruneConfig, Ratio, SignificanceMode, Strategy, SWEEP_RATIOS};
use crate::tensor_io::{load_attention, save_vector, AttentionMaps, ClsToken, ROW_SUM_TOLERANCE};
use crate::viz::{heatmap, selection_mask};

#[derive(Debug, Parser)]
#[command(
    name = "vtprune",
    version,
    about = "Attention-guided visual token pruning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select the visual tokens to keep and write the selection as JSON.
    Prune(PruneCmd),
    /// Attention concentration per layer file, plus an optional token budget.
    Analyze(AnalyzeCmd),
    /// Render the significance heatmap and selection mask as PGM images.
    Viz(VizCmd),
    /// Analytical prefill/decode speedup for a pruned prompt.
    Estimate(EstimateCmd),
    /// Prune at the nine standard retention ratios.
    Sweep(SweepCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Rank,
    Row,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Rank => Strategy::Rank,
            StrategyArg::Row => Strategy::Row,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Variance,
    AntiVariance,
    Pool4,
}

impl From<ModeArg> for SignificanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Variance => SignificanceMode::Variance,
            ModeArg::AntiVariance => SignificanceMode::AntiVariance,
            ModeArg::Pool4 => SignificanceMode::Pool4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClsArg {
    None,
    First,
}

impl From<ClsArg> for ClsToken {
    fn from(c: ClsArg) -> Self {
        match c {
            ClsArg::None => ClsToken::None,
            ClsArg::First => ClsToken::First,
        }
    }
}

fn parse_ratio(s: &str) -> std::result::Result<Ratio, String> {
    s.parse::<Ratio>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Attention tensor (.npy, float32, shape heads x tokens x tokens).
    #[arg(long, value_name = "PATH")]
    pub attn: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub cls_token: ClsArg,
    /// Warn on stderr if attention rows do not sum to 1.
    #[arg(long)]
    pub check_rows: bool,
}

impl InputArgs {
    fn load(&self) -> Result<AttentionMaps> {
        let maps = load_attention(&self.attn, self.cls_token.into())?;
        if self.check_rows {
            if let Some(v) = maps.row_stochastic_violation(ROW_SUM_TOLERANCE) {
                eprintln!("warning: {}: {v}", self.attn.display());
            }
        }
        Ok(maps)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[arg(long, value_enum, default_value = "rank")]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "variance")]
    pub mode: ModeArg,
    /// Keep selection order instead of sorting indices by position.
    #[arg(long)]
    pub no_reorder: bool,
}

impl SelectArgs {
    fn config(&self, ratio: Ratio) -> PruneConfig {
        PruneConfig::new(ratio, self.strategy.into())
            .with_mode(self.mode.into())
            .with_reorder(!self.no_reorder)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PruneCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Retention ratio in (0, 1], e.g. 0.25 or 25%.
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Ratio,
    /// Selection JSON; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write the significance vector as a rank-1 .npy.
    #[arg(long, value_name = "PATH")]
    pub scores_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    /// Directory for one selection JSON per ratio.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Text tokens in the prompt, for the speedup columns.
    #[arg(long, default_value_t = 0)]
    pub textual_tokens: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeCmd {
    /// One or more attention files (e.g. one per encoder layer).
    #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
    pub attn: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub cls_token: ClsArg,
    #[arg(long, default_value_t = 0.8)]
    pub mass_threshold: f64,
    #[arg(long, requires = "textual_tokens")]
    pub visual_tokens: Option<usize>,
    #[arg(long, requires = "visual_tokens")]
    pub textual_tokens: Option<usize>,
    /// JSON report path.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VizCmd {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    #[arg(long, value_parser = parse_ratio, default_value = "0.25")]
    pub ratio: Ratio,
    /// Grid side; defaults to sqrt(tokens).
    #[arg(long)]
    pub side: Option<usize>,
    /// Nearest-neighbour upscaling factor.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    /// Output directory for heatmap.pgm and mask.pgm.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateCmd {
    #[arg(long)]
    pub visual_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub textual_tokens: usize,
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Ratio,
    /// JSON report path; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn print_stdout(s: &str) -> Result<()> {
    std::io::stdout()
        .write_all(s.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prune(c) => cmd_prune(&c),
        Command::Analyze(c) => cmd_analyze(&c),
        Command::Viz(c) => cmd_viz(&c),
        Command::Estimate(c) => cmd_estimate(&c),
        Command::Sweep(c) => cmd_sweep(&c),
    }
}

pub fn cmd_prune(cmd: &PruneCmd) -> Result<()> {
    let maps = cmd.input.load()?;
    let out = pipeline::run(&maps, &cmd.select.config(cmd.ratio))?;
    if let (Some(path), Some(sig)) = (&cmd.scores_out, &out.significance) {
        let scores: Vec<f32> = sig.scores.iter().map(|&v| v as f32).collect();
        save_vector(&scores, path)?;
    }
    let json = out.report().to_json();
    match &cmd.out {
        Some(path) => write_file(path, json),
        None => print_stdout(&json),
    }
}

/// File name used by the sweep for one ratio.
pub fn sweep_file_name(ratio: Ratio) -> String {
    format!("selection_r{ratio}.json")
}

pub fn cmd_sweep(cmd: &SweepCmd) -> Result<()> {
    let maps = cmd.input.load()?;
    let n = maps.tokens();
    let mut rows = Vec::with_capacity(SWEEP_RATIOS.len());
    for &r in &SWEEP_RATIOS {
        let ratio = Ratio::new(r)?;
        let out = pipeline::run(&maps, &cmd.select.config(ratio))?;
        let cost = estimate(n, cmd.textual_tokens, ratio)?;
        rows.push((ratio, out, cost));
    }
    // all runs succeed before anything is written
    if let Some(dir) = &cmd.out {
        create_dir(dir)?;
        for (ratio, out, _) in &rows {
            write_file(&dir.join(sweep_file_name(*ratio)), out.report().to_json())?;
        }
    }
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>8}  {:>6}  {:>6}  {:>8}  {:>8}",
        "ratio", "kept", "rows", "prefill", "decode"
    );
    for (ratio, out, cost) in &rows {
        let grid_rows = out
            .selection
            .rows_kept
            .as_ref()
            .map_or_else(|| "-".to_string(), |r| r.len().to_string());
        let _ = writeln!(
            table,
            "{:>8}  {:>6}  {:>6}  {:>7.3}x  {:>7.3}x",
            ratio.to_string(),
            out.selection.len(),
            grid_rows,
            cost.prefill_speedup,
            cost.decode_speedup
        );
    }
    let _ = writeln!(table, "note: {UPPER_BOUND_NOTE}");
    print_stdout(&table)
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<TokenBudgetReport>,
    layers: &'a [LayerEntry],
}

pub fn cmd_analyze(cmd: &AnalyzeCmd) -> Result<()> {
    let layers = layer_sweep(&cmd.attn, cmd.mass_threshold, cmd.cls_token.into())?;
    let budget = match (cmd.visual_tokens, cmd.textual_tokens) {
        (Some(v), Some(t)) => Some(token_budget(v, t)?),
        _ => None,
    };
    let mut text = layer_table(&layers);
    if let Some(b) = &budget {
        let _ = writeln!(
            text,
            "visual tokens {}  textual tokens {}  visual fraction {:.4}",
            b.visual_tokens, b.textual_tokens, b.visual_fraction
        );
    }
    let _ = writeln!(text, "gini: companion statistic of the significance vector");
    if let Some(path) = &cmd.out {
        write_file(
            path,
            to_json(&AnalyzeReport {
                budget,
                layers: &layers,
            }),
        )?;
    }
    print_stdout(&text)?;
    // every file failing is a data error; partial failures are reported in the table
    if !layers.is_empty() && layers.iter().all(|l| l.report().is_none()) {
        return Err(Error::Validation(
            "no attention file could be analyzed".into(),
        ));
    }
    Ok(())
}

pub fn cmd_viz(cmd: &VizCmd) -> Result<()> {
    let maps = cmd.input.load()?;
    let config = cmd.select.config(cmd.ratio);
    let out = pipeline::run(&maps, &config)?;
    let n = maps.tokens();
    let side = cmd
        .side
        .unwrap_or_else(|| (n as f64).sqrt().round() as usize);
    let sig = match &out.significance {
        Some(s) => s.clone(),
        // pooling has no significance; render the plain variance-based map instead
        None => {
            pipeline::significance_for(&maps, SignificanceMode::Variance).expect("variance mode")
        }
    };
    let heat = heatmap(&sig, side)?.scaled(cmd.scale)?;
    let mask = selection_mask(&out.selection, side)?.scaled(cmd.scale)?;
    create_dir(&cmd.out)?;
    heat.write_pgm(cmd.out.join("heatmap.pgm"))?;
    mask.write_pgm(cmd.out.join("mask.pgm"))
}

pub fn cmd_estimate(cmd: &EstimateCmd) -> Result<()> {
    let est = estimate(cmd.visual_tokens, cmd.textual_tokens, cmd.ratio)?;
    let json = to_json(&est.report());
    match &cmd.out {
        Some(path) => {
            write_file(path, json)?;
            print_stdout(&est.summary())
        }
        None => print_stdout(&json),
    }
}

/// Sanity helper for callers that want the sweep counts without running it.
pub fn sweep_counts(n_tokens: usize) -> Vec<usize> {
    SWEEP_RATIOS
        .iter()
        .map(|&r| keep_count(n_tokens, Ratio::new(r).expect("sweep ratios are valid")))
        .collect()
}

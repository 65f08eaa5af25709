//! `hdrflow` command-line front end.
//!
//! Every run prints `key=value` summary lines on stdout. Exit codes: 0 on
//! success, 1 for usage errors, 2 for unreadable or malformed data, 3 for
//! numeric faults (non-finite values, divergence, failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "hdrflow", version, about = "Flow-aligned HDR video reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reconstruct one HDR frame per complete window of a manifest.
    Fuse(FuseArgs),
    /// Simulate an alternating-exposure capture from a directory of PFMs.
    Synth(SynthArgs),
    /// Tonemapped PSNR/SSIM of predictions against ground truth.
    Eval(EvalArgs),
    /// Finite-difference checks of the training gradients.
    Gradcheck(GradcheckArgs),
    /// Overfit reduced-width networks to one manifest window.
    TrainTiny(TrainTinyArgs),
    /// Render a .flo file as a color-wheel image.
    Flowviz(FlowvizArgs),
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Frame manifest.
    #[arg(long)]
    pub input: PathBuf,
    /// HDRW weight file holding both networks.
    #[arg(long)]
    pub weights: PathBuf,
    /// Exposures per cycle: 2 or 3.
    #[arg(long)]
    pub exposures: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Written PFMs hold radiance divided by this value; defaults to the
    /// inverse of the shortest exposure in each window.
    #[arg(long)]
    pub white_point: Option<f64>,
    /// Worker threads; windows are processed in parallel.
    #[arg(long, env = "HDRFLOW_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 2.2)]
    pub gamma: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory of radiance PFMs, taken in file-name order.
    #[arg(long)]
    pub hdr_dir: PathBuf,
    /// Comma-separated exposure cycle, e.g. "1,8".
    #[arg(long)]
    pub schedule: String,
    /// Manifest to write; LDR frames go to `ldr/` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Bits per LDR sample: 8 or 16.
    #[arg(long, default_value_t = 8)]
    pub bit_depth: u8,
    #[arg(long, default_value_t = 2.2)]
    pub gamma: f64,
    /// Position in the cycle of the first frame.
    #[arg(long, default_value_t = 0)]
    pub phase: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Must hold a PFM of the same name for every prediction.
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, default_value_t = 5000.0)]
    pub mu: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// all, losses or networks.
    #[arg(long, default_value = "all")]
    pub module: String,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainTinyArgs {
    /// Manifest with ground-truth radiance for the chosen window.
    #[arg(long)]
    pub sample: PathBuf,
    /// Convergence CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Record position of the reference frame; defaults to the middle.
    #[arg(long)]
    pub center: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network width divisor.
    #[arg(long, default_value_t = 4)]
    pub divisor: usize,
    #[arg(long, default_value_t = 2.2)]
    pub gamma: f64,
    /// Also write the trained weights as HDRW.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlowvizArgs {
    #[arg(long)]
    pub flo: PathBuf,
    /// Output PPM.
    #[arg(long)]
    pub out: PathBuf,
}

/// Why a command failed, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(hdrflow::Error),
    /// Computation finished but produced an unacceptable result.
    Numeric(String),
}

/// A failure plus whatever summary the command had gathered so far.
#[derive(Debug)]
pub struct CmdError {
    pub partial: Option<Summary>,
    pub failure: Failure,
}

impl From<Failure> for CmdError {
    fn from(failure: Failure) -> Self {
        CmdError { partial: None, failure }
    }
}

impl From<hdrflow::Error> for CmdError {
    fn from(e: hdrflow::Error) -> Self {
        Failure::Core(e).into()
    }
}

pub type CmdResult = Result<Summary, CmdError>;

impl Failure {
    fn code(&self) -> u8 {
        use hdrflow::Error as E;
        match self {
            Failure::Usage(_) => 1,
            Failure::Numeric(_) => 3,
            Failure::Core(E::Numeric(_) | E::Diverged { .. } | E::Tape(_)) => 3,
            Failure::Core(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

/// Ordered `key=value` lines.
#[derive(Debug, Default)]
pub struct Summary {
    lines: Vec<String>,
}

impl Summary {
    pub fn new(command: &str) -> Self {
        let mut s = Summary::default();
        s.put("command", command);
        s
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key}={value}"));
    }

    pub fn path(&mut self, key: &str, p: &Path) {
        self.put(key, p.display());
    }

    /// Several pairs on one line.
    pub fn row(&mut self, pairs: &[(&str, String)]) {
        let parts: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        self.lines.push(parts.join(" "));
    }

    pub fn print(&self) {
        for l in &self.lines {
            println!("{l}");
        }
    }
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
    let start = Instant::now();
    let (name, result) = match &cli.command {
        Command::Fuse(a) => ("fuse", commands::fuse(a)),
        Command::Synth(a) => ("synth", commands::synth(a)),
        Command::Eval(a) => ("eval", commands::eval(a)),
        Command::Gradcheck(a) => ("gradcheck", commands::gradcheck(a)),
        Command::TrainTiny(a) => ("train-tiny", commands::train_tiny(a)),
        Command::Flowviz(a) => ("flowviz", commands::flowviz(a)),
    };
    match result {
        Ok(mut s) => {
            s.put("elapsed_s", format!("{:.3}", start.elapsed().as_secs_f64()));
            s.put("status", "ok");
            s.print();
            ExitCode::SUCCESS
        }
        Err(CmdError { partial, failure: f }) => {
            let mut s = partial.unwrap_or_else(|| Summary::new(name));
            s.put("status", "error");
            s.put("exit_code", f.code());
            s.print();
            eprintln!("hdrflow {name}: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

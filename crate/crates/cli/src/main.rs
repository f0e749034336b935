use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sqdm_core::esc::validate_esc;
use sqdm_core::grid::Grid;
use sqdm_core::imaging::{compute_phi_star, score};
use sqdm_core::kv::KvDoc;
use sqdm_core::run::{self, RunConfig, SampleSource, Throughput};
use sqdm_core::samplegen::{gen_potential, potential_to_dipmaps};
use sqdm_core::sim::{derive_seed, ControllerKind};
use sqdm_core::spectrum::DipSelector;

/// Exit status when a scan lost the dip.
const EXIT_DIP_LOSS: u8 = 2;

#[derive(Parser)]
#[command(name = "sqdm", version, about = "Closed-loop scanning quantum dot microscopy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic potential and its dip maps.
    GenSample(RunArgs),
    /// Scan one or both dips and write the run artifacts.
    Scan(RunArgs),
    /// Build a potential image from two dip maps.
    Image(ImageArgs),
    /// Compare an image against a reference.
    Score(ScoreArgs),
    /// Run every variant of the `sweep.*` axes.
    Sweep(RunArgs),
    /// Check a config and print the resolved values.
    Validate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key-value config file with dotted sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    controller: Option<Controller>,
    #[arg(long, value_enum)]
    dip: Option<Dip>,
    #[arg(long, value_enum)]
    ff: Option<OnOff>,
}

#[derive(Args)]
struct ImageArgs {
    /// Negative-dip map; defaults to `<dir>/map_neg.txt`.
    #[arg(long)]
    neg: Option<PathBuf>,
    /// Positive-dip map; defaults to `<dir>/map_pos.txt`.
    #[arg(long)]
    pos: Option<PathBuf>,
    /// Directory holding the maps.
    #[arg(long, default_value = "out")]
    dir: PathBuf,
    #[arg(long, default_value_t = -1.3, allow_hyphen_values = true)]
    v_neg0: f64,
    #[arg(long, default_value_t = 5.6)]
    delta_v0: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Also write the metrics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Esc,
    Stc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dip {
    Neg,
    Pos,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl RunArgs {
    fn doc(&self) -> Result<KvDoc> {
        let mut doc = match &self.config {
            Some(p) => KvDoc::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => KvDoc::new(),
        };
        if let Some(c) = self.controller {
            doc.set("controller", match c {
                Controller::Esc => "esc",
                Controller::Stc => "stc",
            });
        }
        if let Some(d) = self.dip {
            doc.set("dip", match d {
                Dip::Neg => "neg",
                Dip::Pos => "pos",
                Dip::Both => "both",
            });
        }
        if let Some(f) = self.ff {
            doc.set("ff.enabled", match f {
                OnOff::On => "on",
                OnOff::Off => "off",
            });
        }
        Ok(doc)
    }

    fn config(&self) -> Result<RunConfig> {
        Ok(RunConfig::from_kv(&self.doc()?, self.seed)?)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenSample(a) => gen_sample(&a),
        Command::Scan(a) => scan(&a),
        Command::Image(a) => image(&a),
        Command::Score(a) => score_cmd(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Validate(a) => validate(&a),
    }
}

fn gen_sample(a: &RunArgs) -> Result<ExitCode> {
    let cfg = a.config()?;
    let SampleSource::Synthetic(spec) = &cfg.sample else {
        bail!("gen-sample needs a synthetic sample, not `sample.maps`");
    };
    let phi = gen_potential(spec, derive_seed(cfg.seed, 0))?;
    let maps = potential_to_dipmaps(&phi, spec)?;
    std::fs::create_dir_all(&a.out)?;
    phi.save(&a.out.join("phi_true.txt"))?;
    phi.save_pgm(&a.out.join("phi_true.pgm"))?;
    maps.save(&a.out.join("maps"))?;
    spec.to_kv().save(&a.out.join("sample.txt"))?;
    println!(
        "{}x{} sample, Phi* range {:.2} mV, written to {}",
        phi.width(),
        phi.height(),
        phi.peak_to_peak() * 1e3,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn scan(a: &RunArgs) -> Result<ExitCode> {
    let cfg = a.config()?;
    let t0 = Instant::now();
    let result = run::run_image(&cfg)?;
    let files = run::write_image_run(&cfg, &result, &a.out, t0.elapsed())?;
    for d in &result.dips {
        println!(
            "{} {}: map RMSE {:.3} mV, {} dip-loss fault(s)",
            result.controller.name(),
            d.dip.short_name(),
            d.map_score.rmse_mv,
            d.outcome.faults.len()
        );
    }
    if let Some(s) = &result.phi_score {
        println!("Phi*: MSE {:.4e} V^2, RMSE {:.3} mV, PSNR {:.2} dB", s.mse, s.rmse_mv, s.psnr_db);
    }
    println!("wrote {} files to {}", files.len(), a.out.display());
    if result.fault_count() > 0 {
        eprintln!("dip lost during the scan");
        return Ok(ExitCode::from(EXIT_DIP_LOSS));
    }
    Ok(ExitCode::SUCCESS)
}

fn image(a: &ImageArgs) -> Result<ExitCode> {
    let neg = a.neg.clone().unwrap_or_else(|| a.dir.join(run::map_file(DipSelector::Negative)));
    let pos = a.pos.clone().unwrap_or_else(|| a.dir.join(run::map_file(DipSelector::Positive)));
    let phi = compute_phi_star(&load_grid(&neg)?, &load_grid(&pos)?, a.v_neg0, a.delta_v0)?;
    let out = a.out.clone().unwrap_or_else(|| a.dir.clone());
    std::fs::create_dir_all(&out)?;
    phi.save(&out.join(run::PHI_STAR_TXT))?;
    phi.save_pgm(&out.join(run::PHI_STAR_PGM))?;
    println!("Phi* range {:.3} mV, written to {}", phi.peak_to_peak() * 1e3, out.display());
    Ok(ExitCode::SUCCESS)
}

fn score_cmd(a: &ScoreArgs) -> Result<ExitCode> {
    let s = score(&load_grid(&a.image)?, &load_grid(&a.reference)?)?;
    let doc = s.to_kv();
    print!("{doc}");
    if let Some(p) = &a.out {
        doc.save(p)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: &RunArgs) -> Result<ExitCode> {
    let cfg = a.config()?;
    let rows = run::run_sweep(&cfg)?;
    run::write_sweep(&cfg, &rows, &a.out)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} variant(s), {failed} failed, throughput {:.1}x; see {}",
        rows.len(),
        Throughput::of(&cfg.scan).factor(),
        a.out.join("sweep.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn validate(a: &RunArgs) -> Result<ExitCode> {
    let cfg = a.config()?;
    cfg.validate()?;
    let mut problems = 0;
    if cfg.controller == ControllerKind::Esc {
        for &dip in &cfg.dips {
            let p = &cfg.esc[run::dip_index(dip)];
            for v in validate_esc(p, &cfg.spectrum, cfg.pll.omega) {
                println!("warning: esc.{}: {v}", dip.short_name());
                problems += 1;
            }
        }
    }
    print!("{}", cfg.to_kv());
    let tp = Throughput::of(&cfg.scan);
    println!("# {} steps per dip, throughput {:.2}x", cfg.scan.steps(), tp.factor());
    Ok(if problems > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn load_grid(p: &Path) -> Result<Grid> {
    Grid::load(p).with_context(|| format!("reading {}", p.display()))
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use defa_cli::config::{RunConfig, Switch};
use defa_cli::experiment::{run_experiment, Preset};
use defa_cli::report;
use defa_cli::workload::{generate_workload, query_from, WorkloadSpec};
use defa_core::pruning::{read_mask, write_mask, MaskFile};
use defa_core::sim::simulate_block;
use defa_core::{BlockInputs, Parallelism};

#[derive(Parser)]
#[command(name = "defa", version, about = "Deformable attention accelerator model and experiment harness")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Workload seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sampling parallelism.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    fusion: Option<Switch>,
    #[arg(long, global = true)]
    reuse: Option<Switch>,
    /// Point-pruning threshold on attention probabilities.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Fmap-pruning threshold as a multiple of the mean sampling frequency.
    #[arg(long, global = true)]
    k: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "defa-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Intra,
    Inter,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment preset.
    Run {
        preset: Preset,
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate one configuration with its own mode flags.
    Simulate { config: PathBuf },
    #[command(subcommand)]
    Mask(MaskCommand),
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Write the point mask and next-block fmap mask of block 0.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a mask file.
    Dump {
        file: PathBuf,
        /// Also print the keep bits of every fmap level.
        #[arg(long)]
        bits: bool,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Compare two report files; exits with status 1 when they differ.
    Diff { a: PathBuf, b: PathBuf },
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.parallelism = match m {
                Mode::Intra => Parallelism::Intra,
                Mode::Inter => Parallelism::Inter,
            };
        }
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(r) = self.reuse {
            cfg.reuse = r;
        }
        if let Some(e) = self.epsilon {
            cfg.pap_epsilon = e;
        }
        if let Some(k) = self.k {
            cfg.fwp_k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self, path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(cfg)
    }
}

fn run_preset(preset: Preset, cfg: &RunConfig, dir: &Path, out: &mut impl Write) -> Result<()> {
    let bundle = run_experiment(preset, cfg)?;
    let files = report::emit(&bundle, dir)?;
    write!(out, "{}", report::summary(&bundle))?;
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(())
}

fn mask_gen(cfg: &RunConfig, out: &Path, log: &mut impl Write) -> Result<()> {
    let model = cfg.model()?;
    let work = generate_workload(&WorkloadSpec::from_config(cfg)?)?;
    let query = query_from(&work.fmap);
    let inputs = BlockInputs {
        query: &query,
        fmap: &work.fmap,
        refs: &work.refs,
        weights: &work.weights[0],
        fmap_mask: None,
        block: 0,
    };
    let flags = defa_core::ModeFlags {
        pruning: true,
        ..cfg.flags()
    };
    let r = simulate_block(&inputs, &model, flags, &cfg.hardware())?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let files = [
        ("fmap-mask-block0.dfam", MaskFile::Fmap(r.next_fmap_mask)),
        (
            "point-mask-block0.dfam",
            MaskFile::Point {
                shapes: model.level_shapes.clone(),
                mask: r.point_mask,
            },
        ),
    ];
    for (name, mask) in files {
        let path = out.join(name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("cannot write {}", path.display()))?);
        write_mask(&mut w, &mask)?;
        w.flush()?;
        writeln!(log, "wrote {}", path.display())?;
    }
    Ok(())
}

fn mask_dump(path: &Path, bits: bool, out: &mut impl Write) -> Result<()> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
    match read_mask(&mut r).with_context(|| format!("reading {}", path.display()))? {
        MaskFile::Fmap(m) => {
            writeln!(out, "kind: fmap")?;
            writeln!(out, "block: {}", m.block())?;
            writeln!(out, "pixels: {} kept: {} ({:.4})", m.len(), m.kept(), m.keep_ratio())?;
            let mut start = 0;
            for (l, (s, ratio)) in m.shapes().iter().zip(m.level_keep_ratios()).enumerate() {
                writeln!(out, "level {l}: {}x{} keep {ratio:.4}", s.height, s.width)?;
                if bits {
                    for y in 0..s.height {
                        let row: String = (0..s.width)
                            .map(|x| if m.keep(start + y * s.width + x) { '1' } else { '.' })
                            .collect();
                        writeln!(out, "  {row}")?;
                    }
                }
                start += s.area();
            }
        }
        MaskFile::Point { shapes, mask } => {
            let (nq, nh, nl, np) = mask.dims();
            writeln!(out, "kind: point")?;
            writeln!(out, "block: {}", mask.block())?;
            writeln!(out, "levels: {}", shapes.iter().map(|s| format!("{}x{}", s.height, s.width)).collect::<Vec<_>>().join(","))?;
            writeln!(out, "queries: {nq} heads: {nh} levels: {nl} points: {np}")?;
            writeln!(out, "entries: {} kept: {} ({:.4})", mask.bits().len(), mask.kept(), mask.keep_ratio())?;
        }
    }
    Ok(())
}

fn diff(a: &Path, b: &Path, out: &mut impl Write) -> Result<bool> {
    let d = report::diff_files(a, b)?;
    if d.is_empty() {
        writeln!(out, "identical")?;
        return Ok(true);
    }
    for line in &d {
        writeln!(out, "{line}")?;
    }
    writeln!(out, "{} difference(s)", d.len())?;
    Ok(false)
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let o = &cli.overrides;
    let stdout = &mut std::io::stdout().lock();
    let result = match &cli.command {
        Command::Run { preset, config } => o.load(config.as_deref()).and_then(|cfg| run_preset(*preset, &cfg, &o.out, stdout)),
        Command::Simulate { config } => o.load(Some(config)).and_then(|cfg| run_preset(Preset::Simulate, &cfg, &o.out, stdout)),
        Command::Mask(MaskCommand::Gen { config }) => o.load(config.as_deref()).and_then(|cfg| mask_gen(&cfg, &o.out, stdout)),
        Command::Mask(MaskCommand::Dump { file, bits }) => mask_dump(file, *bits, stdout),
        Command::Report(ReportCommand::Diff { a, b }) => match diff(a, b, stdout) {
            Ok(false) => return ExitCode::from(1),
            other => other.map(|_| ()),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

pub mod compare;
pub mod enhance;
pub mod manifest;
pub mod models;
pub mod rank;
pub mod serve;
pub mod simulate;
pub mod train;

pub use compare::CompareRun;
pub use enhance::{EnhanceRun, Mode};
pub use manifest::{RunManifest, MANIFEST_FILE};
pub use models::EnhancerSpec;
pub use rank::{RankRun, Ranking};
pub use serve::ServeRun;
pub use simulate::SimulateRun;
pub use train::TrainRun;

/// What a command read and wrote. Outputs are relative to the run directory.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: String,
    /// Set when artifacts were written but the run did not succeed.
    pub failure: Option<String>,
}

/// The configuration file could not be read or parsed.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("cannot read directory {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!(dlmap_core::Error::Config(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

/// Defaults overlaid by a TOML file; missing keys keep their defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())).into())
}

fn absolute(p: &Path, base: &Path) -> PathBuf {
    if p.as_os_str().is_empty() || p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn absolute_scorer(id: &str, base: &Path) -> String {
    match id.split_once(':') {
        Some((kind, path)) => format!("{kind}:{}", absolute(Path::new(path), base).display()),
        None => id.to_string(),
    }
}

fn absolute_model(m: &EnhancerSpec, base: &Path) -> EnhancerSpec {
    match m {
        EnhancerSpec::Map(s) => EnhancerSpec::Map(absolute_scorer(s, base)),
        EnhancerSpec::Latent(s) => EnhancerSpec::Latent(absolute_scorer(s, base)),
        EnhancerSpec::Pixel(s) => EnhancerSpec::Pixel(absolute_scorer(s, base)),
        other => other.clone(),
    }
}

fn config_dir(config: Option<&Path>, cwd: &Path) -> PathBuf {
    config
        .and_then(|c| absolute(c, cwd).parent().map(Path::to_path_buf))
        .unwrap_or_else(|| cwd.to_path_buf())
}

#[derive(Parser, Debug)]
#[command(name = "dlmap", version, about = "Quality-prior image enhancement and model comparison")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the latent denoiser.
    TrainDenoiser(TrainArgs),
    /// Enhance one image under a quality prior.
    Enhance(EnhanceArgs),
    /// Pick the most discriminative images for every pair of models.
    Compare(CompareArgs),
    /// Simulate Thurstone Case V observers on a pair list.
    SimulateStudy(SimulateArgs),
    /// Scale a choice log into a ranking with significance groups.
    Rank(RankArgs),
    /// Serve pairwise-comparison studies over HTTP.
    ServeStudy(ServeArgs),
    /// Re-run a recorded command and compare output hashes.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with the command's settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory receiving all artifacts and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of training PNGs; procedural toy images otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Optimiser steps; 0 writes the untrained network.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Diffusion steps T.
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
}

/// Solver settings shared by the commands that enhance images.
#[derive(Args, Debug, Clone, Default)]
pub struct SolverArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Downscaling factor of the fidelity operator.
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Diffusion steps T; must match the denoiser's training.
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    /// EDICT coupling weight.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub pixel_lr: Option<f64>,
    #[arg(long)]
    pub pixel_steps: Option<usize>,
}

impl SolverArgs {
    fn apply(&self, solver: &mut dlmap_core::solver::EnhanceConfig, pixel: &mut dlmap_core::solver::PixelConfig) {
        if let Some(v) = self.lambda {
            solver.lambda = v;
            pixel.lambda = v;
        }
        set(&mut solver.lr, self.lr);
        set(&mut solver.momentum, self.momentum);
        set(&mut solver.max_iter, self.max_iter);
        set(&mut solver.downsample, self.downsample);
        set(&mut solver.steps, self.diffusion_steps);
        if self.p.is_some() {
            solver.p = self.p;
        }
        if self.normalize {
            solver.normalize = true;
            pixel.normalize = true;
        }
        set(&mut pixel.lr, self.pixel_lr);
        set(&mut pixel.steps, self.pixel_steps);
    }
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// sharpness, neg-tv, cnn:<checkpoint> or msliqe:<checkpoint>.
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    /// CSV of image,mos rows for the scorer's logistic.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Comma-separated: identity, blur:<sigma>, unsharp:<amount>,
    /// map:<scorer>, latent:<scorer>, pixel:<scorer>.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<EnhancerSpec>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// CNN checkpoint for the semantic embedding.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    #[arg(long)]
    pub embedder_seed: Option<u64>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// pairs.csv or a compare run directory.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub observers: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scorer giving each stimulus its true quality.
    #[arg(long)]
    pub quality: Option<String>,
    /// Comma-separated model=quality list replacing the scorer.
    #[arg(long, value_delimiter = ',', value_parser = parse_planted)]
    pub planted: Vec<(String, f64)>,
}

fn parse_planted(s: &str) -> std::result::Result<(String, f64), String> {
    let (m, q) = s.split_once('=').ok_or_else(|| format!("expected model=quality, got {s:?}"))?;
    let q: f64 = q.parse().map_err(|_| format!("{q:?} is not a number"))?;
    Ok((m.to_string(), q))
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: Common,
    /// choices.csv or a directory holding one.
    #[arg(long)]
    pub choices: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding study state; restored on start.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Study spec (JSON or TOML) to register; repeatable.
    #[arg(long = "study")]
    pub studies: Vec<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    /// 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    /// A manifest.json or the run directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh run directory for the re-execution.
    #[arg(long)]
    pub out: PathBuf,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut PathBuf, v: &Option<PathBuf>, cwd: &Path) {
    if let Some(p) = v {
        *slot = absolute(p, cwd);
    }
}

fn set_opt_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>, cwd: &Path) {
    if let Some(p) = v {
        *slot = Some(absolute(p, cwd));
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        bail!(ConfigError(format!("no {what} given (flag or config file)")));
    }
    Ok(())
}

impl TrainArgs {
    pub fn resolve(&self, cwd: &Path) -> Result<TrainRun> {
        let mut run: TrainRun = load_config(self.common.config.as_deref())?;
        let base = config_dir(self.common.config.as_deref(), cwd);
        run.data.dir = run.data.dir.map(|d| absolute(&d, &base));
        set_opt_path(&mut run.data.dir, &self.data, cwd);
        set(&mut run.data.images, self.images);
        set(&mut run.data.size, self.size);
        set(&mut run.data.seed, self.data_seed);
        set(&mut run.train.steps, self.steps);
        set(&mut run.train.batch_size, self.batch_size);
        set(&mut run.train.lr, self.lr);
        set(&mut run.train.seed, self.seed);
        set(&mut run.schedule.steps, self.diffusion_steps);
        set(&mut run.denoiser.channels, self.channels);
        set(&mut run.denoiser.hidden, self.hidden);
        set(&mut run.init_seed, self.init_seed);
        Ok(run)
    }
}

impl EnhanceArgs {
    pub fn resolve(&self, cwd: &Path) -> Result<EnhanceRun> {
        let mut run: EnhanceRun = load_config(self.common.config.as_deref())?;
        let base = config_dir(self.common.config.as_deref(), cwd);
        run.image = absolute(&run.image, &base);
        run.denoiser = run.denoiser.map(|p| absolute(&p, &base));
        run.calibration = run.calibration.map(|p| absolute(&p, &base));
        run.scorer = absolute_scorer(&run.scorer, &base);
        set_path(&mut run.image, &self.image, cwd);
        set_opt_path(&mut run.denoiser, &self.denoiser, cwd);
        set_opt_path(&mut run.calibration, &self.calibration, cwd);
        if let Some(s) = &self.scorer {
            run.scorer = absolute_scorer(s, cwd);
        }
        set(&mut run.mode, self.mode);
        self.solver.apply(&mut run.solver, &mut run.pixel);
        require(&run.image, "--image")?;
        Ok(run)
    }
}

impl CompareArgs {
    pub fn resolve(&self, cwd: &Path) -> Result<CompareRun> {
        let mut run: CompareRun = load_config(self.common.config.as_deref())?;
        let base = config_dir(self.common.config.as_deref(), cwd);
        run.pool = absolute(&run.pool, &base);
        run.embedder = run.embedder.map(|p| absolute(&p, &base));
        run.denoiser = run.denoiser.map(|p| absolute(&p, &base));
        run.models = run.models.iter().map(|m| absolute_model(m, &base)).collect();
        set_path(&mut run.pool, &self.pool, cwd);
        set_opt_path(&mut run.embedder, &self.embedder, cwd);
        set_opt_path(&mut run.denoiser, &self.denoiser, cwd);
        if !self.models.is_empty() {
            run.models = self.models.iter().map(|m| absolute_model(m, cwd)).collect();
        }
        set(&mut run.k, self.k);
        set(&mut run.gamma, self.gamma);
        set(&mut run.embedder_seed, self.embedder_seed);
        self.solver.apply(&mut run.solver, &mut run.pixel);
        require(&run.pool, "--pool")?;
        Ok(run)
    }
}

impl SimulateArgs {
    pub fn resolve(&self, cwd: &Path) -> Result<SimulateRun> {
        let mut run: SimulateRun = load_config(self.common.config.as_deref())?;
        let base = config_dir(self.common.config.as_deref(), cwd);
        run.pairs = absolute(&run.pairs, &base);
        run.quality = absolute_scorer(&run.quality, &base);
        set_path(&mut run.pairs, &self.pairs, cwd);
        if let Some(q) = &self.quality {
            run.quality = absolute_scorer(q, cwd);
        }
        set(&mut run.observers, self.observers);
        set(&mut run.sigma, self.sigma);
        set(&mut run.seed, self.seed);
        if !self.planted.is_empty() {
            run.planted = Some(self.planted.iter().cloned().collect::<BTreeMap<_, _>>());
        }
        require(&run.pairs, "--pairs")?;
        Ok(run)
    }
}

impl RankArgs {
    pub fn resolve(&self, cwd: &Path) -> Result<RankRun> {
        let mut run: RankRun = load_config(self.common.config.as_deref())?;
        let base = config_dir(self.common.config.as_deref(), cwd);
        run.choices = absolute(&run.choices, &base);
        set_path(&mut run.choices, &self.choices, cwd);
        set(&mut run.sigma, self.sigma);
        set(&mut run.bootstrap, self.bootstrap);
        set(&mut run.seed, self.seed);
        set(&mut run.level, self.level);
        require(&run.choices, "--choices")?;
        Ok(run)
    }
}

impl ServeArgs {
    pub fn resolve(&self, cwd: &Path) -> Result<ServeRun> {
        let mut run: ServeRun = load_config(self.config.as_deref())?;
        let base = config_dir(self.config.as_deref(), cwd);
        run.data = absolute(&run.data, &base);
        run.studies = run.studies.iter().map(|p| absolute(p, &base)).collect();
        set_path(&mut run.data, &self.data, cwd);
        run.studies.extend(self.studies.iter().map(|p| absolute(p, cwd)));
        if let Some(b) = &self.bind {
            run.bind = b.clone();
        }
        set(&mut run.port, self.port);
        require(&run.data, "--data")?;
        Ok(run)
    }
}

/// A command with its fully resolved configuration.
pub trait Run: serde::Serialize {
    const NAME: &'static str;
    fn seed(&self) -> u64;
    fn execute(&self, out: &Path) -> Result<Outcome>;
}

macro_rules! impl_run {
    ($t:ty, $name:literal, |$s:ident| $seed:expr) => {
        impl Run for $t {
            const NAME: &'static str = $name;
            fn seed(&self) -> u64 {
                let $s = self;
                $seed
            }
            fn execute(&self, out: &Path) -> Result<Outcome> {
                <$t>::execute(self, out)
            }
        }
    };
}

impl_run!(TrainRun, "train-denoiser", |r| r.train.seed);
impl_run!(EnhanceRun, "enhance", |_r| 0);
impl_run!(CompareRun, "compare", |r| r.embedder_seed);
impl_run!(SimulateRun, "simulate-study", |r| r.seed);
impl_run!(RankRun, "rank", |r| r.seed);

/// Execute into `out` and record the manifest. Artifacts of a failed run
/// are still recorded before the failure is reported.
pub fn finish<R: Run>(run: &R, out: &Path) -> Result<(RunManifest, Outcome)> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create run directory {}", out.display()))?;
    let outcome = run.execute(out)?;
    let manifest = RunManifest::new(R::NAME, run.seed(), run, &outcome.inputs, &outcome.outputs, out)?;
    manifest.write(out)?;
    if !outcome.summary.is_empty() {
        println!("{}", outcome.summary);
    }
    if let Some(why) = &outcome.failure {
        bail!("{why}");
    }
    Ok((manifest, outcome))
}

fn rerun<R: Run + DeserializeOwned>(recorded: &RunManifest, out: &Path) -> Result<RunManifest> {
    let run: R = recorded.config_as()?;
    Ok(finish(&run, out)?.0)
}

/// Re-execute a recorded run into `out`; fails unless every output hash
/// matches the record.
pub fn reproduce(manifest: &Path, out: &Path) -> Result<RunManifest> {
    let recorded = RunManifest::load(manifest)?;
    recorded.check_inputs()?;
    let fresh = match recorded.command.as_str() {
        "train-denoiser" => rerun::<TrainRun>(&recorded, out)?,
        "enhance" => rerun::<EnhanceRun>(&recorded, out)?,
        "compare" => rerun::<CompareRun>(&recorded, out)?,
        "simulate-study" => rerun::<SimulateRun>(&recorded, out)?,
        "rank" => rerun::<RankRun>(&recorded, out)?,
        other => bail!(ConfigError(format!("command {other:?} has no reproducible outputs"))),
    };
    let bad = recorded.output_mismatches(&fresh);
    if !bad.is_empty() {
        bail!("outputs differ from the recorded run: {}", bad.join(", "));
    }
    println!("reproduced {} outputs of {}", fresh.outputs.len(), recorded.command);
    Ok(fresh)
}

pub fn run(cli: Cli) -> Result<()> {
    let cwd = std::env::current_dir().context("cannot determine the working directory")?;
    let out = |c: &Common| absolute(&c.out, &cwd);
    match &cli.command {
        Command::TrainDenoiser(a) => finish(&a.resolve(&cwd)?, &out(&a.common)).map(drop),
        Command::Enhance(a) => finish(&a.resolve(&cwd)?, &out(&a.common)).map(drop),
        Command::Compare(a) => finish(&a.resolve(&cwd)?, &out(&a.common)).map(drop),
        Command::SimulateStudy(a) => finish(&a.resolve(&cwd)?, &out(&a.common)).map(drop),
        Command::Rank(a) => finish(&a.resolve(&cwd)?, &out(&a.common)).map(drop),
        Command::ServeStudy(a) => a.resolve(&cwd)?.execute(),
        Command::Reproduce(a) => reproduce(&absolute(&a.manifest, &cwd), &absolute(&a.out, &cwd)).map(drop),
    }
}

/// Machine-parsable error kind and exit code: 2 for bad usage or
/// configuration, 1 for everything else.
pub fn classify(err: &anyhow::Error) -> (&'static str, i32) {
    use dlmap_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return ("config", 2);
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => ("config", 2),
                E::Contract(_) => ("contract", 1),
                E::DegenerateFit(_) => ("degenerate_fit", 1),
                E::Disconnected(_) => ("disconnected", 1),
                E::NotFound(_) => ("not_found", 1),
                E::Io { .. } => ("io", 1),
                _ => ("runtime", 1),
            };
        }
        if let Some(e) = cause.downcast_ref::<dlmap_study::ServiceError>() {
            return (e.kind(), 1);
        }
        if cause.is::<std::io::Error>() {
            return ("io", 1);
        }
    }
    ("runtime", 1)
}

/// `error[kind]: message` on one line.
pub fn error_line(err: &anyhow::Error) -> String {
    let (kind, _) = classify(err);
    // errors that already embed their source would repeat it
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error[{kind}]: {msg}")
}

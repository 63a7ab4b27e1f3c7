//! The `mfr` command line. Each subcommand is a pipeline stage that reads
//! and writes the on-disk formats of the library, records a run manifest,
//! and reports statistics as JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::brdf::{BrdfConfig, Direction, Rgb};
use crate::error::Error;
use crate::fit::{
    self, Coefficients, FinetuneConfig, FitResult, FitSettings, FitTarget, GeometryBuffers, LossWeights,
};
use crate::lighting::{self, LightingPcaModel};
use crate::manifest::{read_json, write_json, RunManifest};
use crate::maps::ReflectanceMaps;
use crate::model::{self, MorphableReflectanceModel};
use crate::olat::{self, make_rig, render_all, synthetic_maps, OlatSet, ProxyGeometry, Solver, TexelStatus};
use crate::raster::{Image, Mask};
use crate::sh::{project_envmap, EnvMap, ShVector};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const INPUT_FORMAT: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const INVARIANT: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("invariant check failed: {}", .0.join("; "))]
    Invariant(Vec<String>),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invariant(_) => exit::INVARIANT,
            Failure::Lib(e) if e.is_numerical() => exit::NUMERICAL,
            Failure::Lib(_) => exit::INPUT_FORMAT,
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

#[derive(Clone, Debug, Parser, Serialize, Deserialize)]
#[command(name = "mfr", version, about = "Morphable face reflectance pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct Globals {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// SH order for lighting.
    #[arg(long, global = true, default_value_t = crate::sh::DEFAULT_ORDER)]
    pub order: usize,
    /// Blinn-Phong exponents, comma separated.
    #[arg(long, global = true, default_value = "1,8,64")]
    pub exponents: String,
    /// Reflectance model components (default min(80, samples - 1)).
    #[arg(long, global = true)]
    pub nr: Option<usize>,
    /// Lighting model components (default min(80, samples - 1)).
    #[arg(long, global = true)]
    pub nl: Option<usize>,
    /// Nonnegativity penalty weight for OLAT estimation.
    #[arg(long, global = true, default_value_t = 100.0)]
    pub wreg: f64,
    #[arg(long, global = true, default_value = "adam")]
    pub solver: Solver,
    /// Write the stats JSON here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl Globals {
    fn brdf(&self) -> CmdResult<BrdfConfig> {
        Ok(BrdfConfig::new(parse_list(&self.exponents, "exponents")?)?)
    }
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a synthetic OLAT set with known reflectance.
    SynthOlat(SynthOlatArgs),
    /// Estimate reflectance maps from an OLAT set.
    Estimate(EstimateArgs),
    /// Write synthetic reflectance maps usable as model training samples.
    SynthMaps(SynthMapsArgs),
    /// Build a morphable reflectance model from map directories.
    BuildModel(BuildModelArgs),
    /// Write synthetic equirectangular environments.
    SynthEnvs(SynthEnvsArgs),
    /// Build the lighting PCA model from a directory of PFM panoramas.
    BuildLight(BuildLightArgs),
    /// Render reflectance under one light into a fit-target directory.
    Render(RenderArgs),
    /// Render a sequence of frames for a point light circling the view axis.
    Relight(RelightArgs),
    /// Fit model coefficients to a target image.
    Fit(FitArgs),
    /// Update a reflectance model by reconstructing a set of targets.
    Finetune(FinetuneArgs),
    /// Draw random reflectance maps from a model.
    Sample(SampleArgs),
    /// Print headers and invariant checks of a model file or data directory.
    Inspect(InspectArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SynthOlatArgs {
    pub output: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub views: usize,
    #[arg(long, default_value_t = 11)]
    pub lights: usize,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long, default_value = "hemisphere")]
    pub geometry: ProxyGeometry,
    /// Ground truth without left-right symmetry.
    #[arg(long)]
    pub asymmetric: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    pub olat: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0.5)]
    pub flip: f64,
    #[arg(long, default_value_t = 6)]
    pub min_observations: usize,
    #[arg(long, default_value_t = 1e6)]
    pub max_condition: f64,
    /// Also run the other solver and report the agreement.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SynthMapsArgs {
    pub output: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub asymmetric: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct BuildModelArgs {
    /// Output model file.
    pub output: PathBuf,
    /// Reflectance map directories.
    #[arg(required = true)]
    pub samples: Vec<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SynthEnvsArgs {
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct BuildLightArgs {
    pub panoramas: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = lighting::DEFAULT_ROTATIONS)]
    pub rotations: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReflectanceSource {
    /// Reflectance model file.
    #[arg(long, conflicts_with = "maps")]
    pub model: Option<PathBuf>,
    /// Reflectance map directory.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Model coefficients, comma separated (default zeros).
    #[arg(long, conflicts_with = "fit_result")]
    pub beta: Option<String>,
    /// Fit result JSON supplying beta, gamma and z.
    #[arg(long)]
    pub fit_result: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GeometrySource {
    /// Geometry or target directory.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    /// Proxy surface used when no geometry directory is given.
    #[arg(long, default_value = "hemisphere")]
    pub proxy: ProxyGeometry,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RenderArgs {
    pub output: PathBuf,
    #[command(flatten)]
    pub source: ReflectanceSource,
    #[command(flatten)]
    pub geometry: GeometrySource,
    /// Point light direction x,y,z in the surface frame.
    #[arg(long)]
    pub point: Option<String>,
    #[arg(long, default_value = "1,1,1")]
    pub irradiance: String,
    /// SH lighting file.
    #[arg(long)]
    pub sh: Option<PathBuf>,
    /// Equirectangular PFM environment, projected at --order.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Lighting model; gamma and z come from --gamma/--z or the fit result.
    #[arg(long)]
    pub light_model: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub z: Option<String>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RelightArgs {
    pub output: PathBuf,
    #[command(flatten)]
    pub source: ReflectanceSource,
    #[command(flatten)]
    pub geometry: GeometrySource,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    /// Angle between the light and the view axis.
    #[arg(long, default_value_t = 40.0)]
    pub polar_deg: f64,
    #[arg(long, default_value = "1,1,1")]
    pub irradiance: String,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 2.0)]
    pub w_l1: f64,
    #[arg(long, default_value_t = 0.001)]
    pub w_coef: f64,
    #[arg(long, default_value_t = 10.0)]
    pub w_light: f64,
    #[arg(long, default_value_t = 10.0)]
    pub w_upd: f64,
}

impl WeightArgs {
    fn weights(&self) -> LossWeights {
        LossWeights {
            l1: self.w_l1,
            coef: self.w_coef,
            light: self.w_light,
            upd: self.w_upd,
            ..LossWeights::default()
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct FitArgs {
    pub target: PathBuf,
    /// Fit result JSON.
    pub output: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub light_model: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub iterations: usize,
    #[arg(long, default_value_t = 2e-2)]
    pub step_size: f64,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Output model file.
    pub output: PathBuf,
    #[arg(required = true)]
    pub targets: Vec<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub light_model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 400)]
    pub fit_iterations: usize,
    #[arg(long, default_value_t = 100)]
    pub refit_iterations: usize,
    #[arg(long, default_value_t = 2e-2)]
    pub coef_step: f64,
    #[arg(long, default_value_t = 50)]
    pub model_steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub model_step: f64,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    pub output: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn parse_list(s: &str, what: &str) -> CmdResult<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Failure::Lib(Error::Config(format!("{what}: cannot parse {t:?}: {e}"))))
        })
        .collect()
}

fn parse_rgb(s: &str, what: &str) -> CmdResult<Rgb> {
    let v = parse_list(s, what)?;
    match v.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        [a] => Ok([*a; 3]),
        _ => Err(Error::Config(format!("{what} needs 1 or 3 values, got {}", v.len())).into()),
    }
}

fn manifest_path(output: &Path) -> PathBuf {
    if output.extension().is_some() && !output.is_dir() {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    } else {
        output.join("manifest.json")
    }
}

/// What a command produced, before the manifest is attached.
struct Report {
    stats: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Where the manifest goes; `None` keeps it in the stats only.
    manifest_at: Option<PathBuf>,
}

impl Report {
    fn new(stats: Value) -> Self {
        Report {
            stats,
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest_at: None,
        }
    }

    fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        self.manifest_at.get_or_insert_with(|| manifest_path(p));
        self
    }
}

/// Runs a parsed command line and returns its stats. The stats include the
/// run manifest under `"manifest"`.
pub fn run(cli: &Cli) -> CmdResult<Value> {
    let start = Instant::now();
    if let Command::Replay(a) = &cli.command {
        let m: RunManifest = read_json(&a.manifest)?;
        let mut replayed: Cli = serde_json::from_value(m.config.clone())
            .map_err(|e| Error::Format(format!("{}: not a replayable manifest: {e}", a.manifest.display())))?;
        if cli.globals.threads.is_some() {
            replayed.globals.threads = cli.globals.threads;
        }
        if matches!(replayed.command, Command::Replay(_)) {
            return Err(Error::Config("refusing to replay a replay".into()).into());
        }
        return run(&replayed);
    }
    let threads = cli.globals.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let report = pool.install(|| dispatch(cli))?;

    // the replay-relevant config never records the thread count
    let mut config_cli = cli.clone();
    config_cli.globals.threads = None;
    config_cli.globals.out = None;
    let mut manifest = RunManifest::new(
        command_name(&cli.command),
        serde_json::to_value(&config_cli).expect("arguments serialize"),
        cli.globals.seed,
    );
    manifest.inputs = report.inputs.iter().map(|p| p.display().to_string()).collect();
    manifest.outputs = report.outputs.iter().map(|p| p.display().to_string()).collect();
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Some(path) = &report.manifest_at {
        write_json(path, &manifest)?;
    }
    let mut stats = report.stats;
    stats["manifest"] = serde_json::to_value(&manifest).expect("manifest serializes");
    Ok(stats)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SynthOlat(_) => "synth-olat",
        Command::Estimate(_) => "estimate",
        Command::SynthMaps(_) => "synth-maps",
        Command::BuildModel(_) => "build-model",
        Command::SynthEnvs(_) => "synth-envs",
        Command::BuildLight(_) => "build-light",
        Command::Render(_) => "render",
        Command::Relight(_) => "relight",
        Command::Fit(_) => "fit",
        Command::Finetune(_) => "finetune",
        Command::Sample(_) => "sample",
        Command::Inspect(_) => "inspect",
        Command::Replay(_) => "replay",
    }
}

fn dispatch(cli: &Cli) -> CmdResult<Report> {
    let g = &cli.globals;
    match &cli.command {
        Command::SynthOlat(a) => synth_olat(g, a),
        Command::Estimate(a) => estimate(g, a),
        Command::SynthMaps(a) => synth_maps(g, a),
        Command::BuildModel(a) => build_model(g, a),
        Command::SynthEnvs(a) => synth_envs(g, a),
        Command::BuildLight(a) => build_light(g, a),
        Command::Render(a) => render(g, a),
        Command::Relight(a) => relight(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Finetune(a) => finetune(a),
        Command::Sample(a) => sample(g, a),
        Command::Inspect(a) => inspect(a),
        Command::Replay(_) => unreachable!("handled by run"),
    }
}

fn synth_olat(g: &Globals, a: &SynthOlatArgs) -> CmdResult<Report> {
    let cfg = g.brdf()?;
    let rig = make_rig(a.views, a.lights, a.resolution, a.geometry, g.seed)?;
    let truth = synthetic_maps(&cfg, a.resolution, a.resolution, g.seed, !a.asymmetric);
    let frames = render_all(&truth, &rig)?;
    let set = OlatSet {
        config: cfg,
        rig,
        frames,
        truth: Some(truth),
    };
    set.save_dir(&a.output)?;
    let stats = json!({
        "frames": set.frames.len(),
        "views": a.views,
        "lights": a.lights,
        "resolution": a.resolution,
        "valid_texels": set.rig.valid.count(),
    });
    Ok(Report::new(stats).output(&a.output))
}

fn status_counts(diags: &[olat::TexelDiagnostic]) -> Value {
    let count = |s: TexelStatus| diags.iter().filter(|d| d.status == s).count();
    json!({
        "estimated": count(TexelStatus::Estimated),
        "outside": count(TexelStatus::Outside),
        "insufficient_observations": count(TexelStatus::InsufficientObservations),
        "ill_conditioned": count(TexelStatus::IllConditioned),
    })
}

fn error_summary(errors: &[f64]) -> Value {
    let max = errors.iter().copied().fold(0.0, f64::max);
    json!({ "median": olat::median(errors), "max": max, "texels": errors.len() })
}

fn estimated_mask(diags: &[olat::TexelDiagnostic], w: usize, h: usize) -> CmdResult<Mask> {
    Ok(Mask::from_bits(w, h, diags.iter().map(|d| d.status == TexelStatus::Estimated).collect())?)
}

fn estimate(g: &Globals, a: &EstimateArgs) -> CmdResult<Report> {
    let set = OlatSet::load_dir(&a.olat)?;
    let settings = olat::EstimationSettings {
        w_reg: g.wreg,
        iterations: a.iterations,
        step_size: a.step_size,
        flip_probability: a.flip,
        seed: g.seed,
        min_observations: a.min_observations,
        max_condition: a.max_condition,
        solver: g.solver,
        ..olat::EstimationSettings::default()
    };
    let est = olat::estimate_maps(&set.frames, &set.rig, &set.config, &settings)?;
    est.maps.save_dir(&a.output)?;
    let diag_path = a.output.join("diagnostics.json");
    write_json(&diag_path, &est.diagnostics)?;
    let (w, h) = (est.maps.width(), est.maps.height());
    let mask = estimated_mask(&est.diagnostics, w, h)?;
    let mut stats = json!({
        "solver": settings.solver,
        "status": status_counts(&est.diagnostics),
    });
    if let Some(truth) = &set.truth {
        stats["relative_error"] = error_summary(&olat::relative_errors(&est.maps, truth, &mask));
    }
    if a.compare {
        let other = match settings.solver {
            Solver::Adam => Solver::Nnls,
            Solver::Nnls => Solver::Adam,
        };
        let alt = olat::estimate_maps(&set.frames, &set.rig, &set.config, &olat::EstimationSettings { solver: other, ..settings })?;
        let both = Mask::from_fn(w, h, |x, y| {
            let i = y * w + x;
            mask.at(i) && alt.diagnostics[i].status == TexelStatus::Estimated
        });
        let mut cmp = json!({
            "solver": other,
            "relative_difference": error_summary(&olat::relative_errors(&est.maps, &alt.maps, &both)),
        });
        if let Some(truth) = &set.truth {
            cmp["relative_error"] = error_summary(&olat::relative_errors(&alt.maps, truth, &both));
        }
        stats["comparison"] = cmp;
    }
    Ok(Report::new(stats).input(&a.olat).output(&a.output))
}

fn synth_maps(g: &Globals, a: &SynthMapsArgs) -> CmdResult<Report> {
    let cfg = g.brdf()?;
    let mut report = Report::new(json!({ "count": a.count, "resolution": a.resolution }));
    report.manifest_at = Some(a.output.join("manifest.json"));
    for i in 0..a.count {
        let dir = a.output.join(format!("sample_{i:03}"));
        synthetic_maps(&cfg, a.resolution, a.resolution, g.seed.wrapping_add(i as u64), !a.asymmetric).save_dir(&dir)?;
        report = report.output(&dir);
    }
    Ok(report)
}

fn model_stats(m: &MorphableReflectanceModel) -> Value {
    json!({
        "height": m.height(),
        "width": m.width(),
        "exponents": m.config().exponents(),
        "components": m.component_count(),
        "sigmas": m.sigmas(),
        "orthonormality_error": m.orthonormality_error(),
    })
}

fn check_invariants(violations: Vec<String>) -> CmdResult<()> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(violations))
    }
}

fn build_model(g: &Globals, a: &BuildModelArgs) -> CmdResult<Report> {
    let samples: Vec<ReflectanceMaps> = a.samples.iter().map(ReflectanceMaps::load_dir).collect::<Result<_, _>>()?;
    let n = g.nr.unwrap_or_else(|| model::default_components(samples.len()));
    let m = model::build_model(&samples, n)?;
    check_invariants(m.invariant_violations())?;
    m.save(&a.output)?;
    let mut report = Report::new(model_stats(&m)).output(&a.output);
    for s in &a.samples {
        report = report.input(s);
    }
    Ok(report)
}

fn synth_envs(g: &Globals, a: &SynthEnvsArgs) -> CmdResult<Report> {
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut report = Report::new(json!({ "count": a.count, "height": a.height }));
    report.manifest_at = Some(a.output.join("manifest.json"));
    for i in 0..a.count {
        let p = a.output.join(format!("env_{i:03}.pfm"));
        lighting::synthetic_environment(a.height, g.seed.wrapping_add(i as u64)).write_pfm(&p)?;
        report = report.output(&p);
    }
    Ok(report)
}

fn pfm_files(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no .pfm panoramas found", dir.display())).into());
    }
    Ok(files)
}

fn light_stats(m: &LightingPcaModel) -> Value {
    json!({
        "order": m.order(),
        "components": m.component_count(),
        "sigmas": m.sigmas(),
        "orthonormality_error": m.orthonormality_error(),
    })
}

fn build_light(g: &Globals, a: &BuildLightArgs) -> CmdResult<Report> {
    let files = pfm_files(&a.panoramas)?;
    let envs: Vec<EnvMap> = files.iter().map(EnvMap::read_pfm).collect::<Result<_, _>>()?;
    let n = g.nl.unwrap_or_else(|| lighting::default_components(envs.len() * a.rotations));
    let m = lighting::build_lighting_pca(&envs, a.rotations, n, g.order)?;
    check_invariants(m.invariant_violations())?;
    m.save(&a.output)?;
    let mut stats = light_stats(&m);
    stats["environments"] = json!(envs.len());
    Ok(Report::new(stats).input(&a.panoramas).output(&a.output))
}

enum Reflectance {
    Model(MorphableReflectanceModel, Coefficients),
    Maps(ReflectanceMaps),
}

impl Reflectance {
    fn load(src: &ReflectanceSource) -> CmdResult<Self> {
        let fit_result: Option<FitResult> = src.fit_result.as_ref().map(read_json).transpose()?;
        match (&src.model, &src.maps) {
            (Some(path), None) => {
                let m = MorphableReflectanceModel::load(path)?;
                let mut c = match fit_result {
                    Some(r) => r.coefficients(),
                    None => Coefficients::neutral(m.component_count(), 0),
                };
                if let Some(b) = &src.beta {
                    c.beta = parse_list(b, "beta")?;
                }
                Ok(Reflectance::Model(m, c))
            }
            (None, Some(path)) => Ok(Reflectance::Maps(ReflectanceMaps::load_dir(path)?)),
            _ => Err(Error::Config("give exactly one of --model or --maps".into()).into()),
        }
    }

    fn maps(&self) -> CmdResult<ReflectanceMaps> {
        match self {
            Reflectance::Model(m, c) => Ok(m.reconstruct(&c.beta)?),
            Reflectance::Maps(m) => Ok(m.clone()),
        }
    }

    fn inputs(src: &ReflectanceSource) -> Vec<PathBuf> {
        [&src.model, &src.maps, &src.fit_result].into_iter().flatten().cloned().collect()
    }
}

fn load_geometry(src: &GeometrySource, seed: u64) -> CmdResult<GeometryBuffers> {
    match &src.geometry {
        Some(dir) => Ok(GeometryBuffers::load_dir(dir)?),
        None => {
            let rig = make_rig(1, 1, src.resolution, src.proxy, seed)?;
            Ok(GeometryBuffers::from_rig(&rig, 0)?)
        }
    }
}

fn parse_direction(s: &str) -> CmdResult<Direction> {
    let v = parse_list(s, "point light")?;
    match v.as_slice() {
        [x, y, z] => Ok(Direction::from_xyz(*x, *y, *z)?),
        _ => Err(Error::Config(format!("point light needs x,y,z, got {s:?}")).into()),
    }
}

/// Writes a render as a fit-target directory with a display preview.
fn write_render(dir: &Path, image: Image, geometry: GeometryBuffers) -> CmdResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    image.write_png_preview(dir.join("image.png"))?;
    let skin = geometry.coverage.clone();
    FitTarget { image, skin, geometry }.save_dir(dir)?;
    Ok(())
}

fn render(g: &Globals, a: &RenderArgs) -> CmdResult<Report> {
    let refl = Reflectance::load(&a.source)?;
    let geometry = load_geometry(&a.geometry, g.seed)?;
    let irradiance = parse_rgb(&a.irradiance, "irradiance")?;
    let mut inputs = Reflectance::inputs(&a.source);
    let chosen = [a.point.is_some(), a.sh.is_some(), a.env.is_some(), a.light_model.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if chosen > 1 {
        return Err(Error::Config("give at most one of --point, --sh, --env, --light-model".into()).into());
    }
    let (image, path) = if let Some(lm_path) = &a.light_model {
        let Reflectance::Model(m, mut c) = refl else {
            return Err(Error::Config("--light-model needs --model".into()).into());
        };
        let lm = LightingPcaModel::load(lm_path)?;
        inputs.push(lm_path.clone());
        if let Some(gm) = &a.gamma {
            c.gamma = parse_list(gm, "gamma")?;
        } else if c.gamma.is_empty() {
            c.gamma = vec![0.0; lm.component_count()];
        }
        if let Some(z) = &a.z {
            c.z = parse_rgb(z, "z")?;
        }
        (fit::render_image(&m, &lm, &c, &geometry)?, "lighting-model")
    } else if let Some(sh_path) = &a.sh {
        inputs.push(sh_path.clone());
        (fit::render_maps_env(&refl.maps()?, &ShVector::read(sh_path)?, &geometry)?, "sh")
    } else if let Some(env_path) = &a.env {
        inputs.push(env_path.clone());
        let sh = project_envmap(&EnvMap::read_pfm(env_path)?, g.order);
        (fit::render_maps_env(&refl.maps()?, &sh, &geometry)?, "environment")
    } else {
        let dir = match &a.point {
            Some(p) => parse_direction(p)?,
            None => Direction::z(),
        };
        (fit::render_maps_point(&refl.maps()?, &dir, &irradiance, &geometry)?, "point")
    };
    let mean = image.data().iter().map(|v| *v as f64).sum::<f64>() / image.data().len().max(1) as f64;
    write_render(&a.output, image, geometry)?;
    if let Some(gd) = &a.geometry.geometry {
        inputs.push(gd.clone());
    }
    let mut report = Report::new(json!({ "light": path, "mean_value": mean })).output(&a.output);
    for p in &inputs {
        report = report.input(p);
    }
    Ok(report)
}

fn relight(a: &RelightArgs) -> CmdResult<Report> {
    if a.frames == 0 {
        return Err(Error::Config("relight needs at least one frame".into()).into());
    }
    let maps = Reflectance::load(&a.source)?.maps()?;
    let geometry = load_geometry(&a.geometry, 0)?;
    let irradiance = parse_rgb(&a.irradiance, "irradiance")?;
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let polar = a.polar_deg.to_radians();
    let mut report = Report::new(json!({ "frames": a.frames, "polar_deg": a.polar_deg }));
    report.manifest_at = Some(a.output.join("manifest.json"));
    for f in 0..a.frames {
        let phi = 2.0 * std::f64::consts::PI * f as f64 / a.frames as f64;
        let dir = Direction::from_spherical(polar, phi);
        let img = fit::render_maps_point(&maps, &dir, &irradiance, &geometry)?;
        let p = a.output.join(format!("frame_{f:03}.pfm"));
        img.write_pfm(&p)?;
        img.write_png_preview(a.output.join(format!("frame_{f:03}.png")))?;
        report = report.output(&p);
    }
    for p in Reflectance::inputs(&a.source) {
        report = report.input(&p);
    }
    Ok(report)
}

fn fit_cmd(a: &FitArgs) -> CmdResult<Report> {
    let target = FitTarget::load_dir(&a.target)?;
    let m = MorphableReflectanceModel::load(&a.model)?;
    let lm = LightingPcaModel::load(&a.light_model)?;
    let settings = FitSettings {
        weights: a.weights.weights(),
        iterations: a.iterations,
        step_size: a.step_size,
        ..FitSettings::default()
    };
    let result = fit::fit_image(&target, &m, &lm, &settings)?;
    write_json(&a.output, &result)?;
    let stats = json!({ "losses": result.losses, "iterations": result.iterations, "z": result.z });
    Ok(Report::new(stats)
        .input(&a.target)
        .input(&a.model)
        .input(&a.light_model)
        .output(&a.output))
}

fn finetune(a: &FinetuneArgs) -> CmdResult<Report> {
    let targets: Vec<FitTarget> = a.targets.iter().map(FitTarget::load_dir).collect::<Result<_, _>>()?;
    let m0 = MorphableReflectanceModel::load(&a.model)?;
    let lm = LightingPcaModel::load(&a.light_model)?;
    let cfg = FinetuneConfig {
        weights: a.weights.weights(),
        epochs: a.epochs,
        fit_iterations: a.fit_iterations,
        refit_iterations: a.refit_iterations,
        coef_step: a.coef_step,
        model_steps: a.model_steps,
        model_step: a.model_step,
    };
    let out = fit::finetune_model(&targets, &m0, &lm, &cfg)?;
    out.model.save(&a.output)?;
    let stats = json!({
        "history": out.history,
        "upd": fit::loss_upd(&out.model, &m0)?,
    });
    let mut report = Report::new(stats).input(&a.model).input(&a.light_model).output(&a.output);
    for t in &a.targets {
        report = report.input(t);
    }
    Ok(report)
}

fn sample(g: &Globals, a: &SampleArgs) -> CmdResult<Report> {
    let m = MorphableReflectanceModel::load(&a.model)?;
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let (w, h) = (m.width(), m.height());
    let mut grid = Image::new(w * a.count.max(1), h, 3);
    let mut report = Report::new(json!({ "count": a.count, "scale": a.scale }));
    report.manifest_at = Some(a.output.join("manifest.json"));
    let mut coefficients = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = g.seed.wrapping_add(i as u64);
        let beta = m.sample_coeffs(seed, a.scale)?;
        let maps = m.reconstruct(&beta)?;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    grid.set(i * w + x, y, c, maps.diffuse.get(x, y, c));
                }
            }
        }
        let dir = a.output.join(format!("sample_{i:03}"));
        maps.save_dir(&dir)?;
        report = report.output(&dir);
        coefficients.push(beta);
    }
    let grid_path = a.output.join("grid.png");
    grid.write_png_preview(&grid_path)?;
    report.stats["coefficients"] = json!(coefficients);
    Ok(report.input(&a.model).output(&grid_path))
}

fn inspect(a: &InspectArgs) -> CmdResult<Report> {
    let p = &a.path;
    let (stats, violations) = if p.is_dir() {
        if p.join(OlatSet::MANIFEST).exists() {
            let set = OlatSet::load_dir(p)?;
            let s = json!({
                "kind": "olat-set",
                "width": set.rig.width(),
                "height": set.rig.height(),
                "views": set.rig.views.len(),
                "lights": set.rig.lights.len(),
                "frames": set.frames.len(),
                "exponents": set.config.exponents(),
                "has_truth": set.truth.is_some(),
            });
            (s, Vec::new())
        } else if p.join(FitTarget::MANIFEST).exists() {
            let t = FitTarget::load_dir(p)?;
            let s = json!({
                "kind": "fit-target",
                "width": t.image.width(),
                "height": t.image.height(),
                "skin_pixels": t.skin.count(),
                "covered_pixels": t.geometry.coverage.count(),
            });
            (s, Vec::new())
        } else {
            let maps = ReflectanceMaps::load_dir(p)?;
            let negative = maps.to_vector().iter().filter(|v| **v < 0.0).count();
            let s = json!({
                "kind": "reflectance-maps",
                "width": maps.width(),
                "height": maps.height(),
                "exponents": maps.config.exponents(),
                "valid_texels": maps.valid.count(),
                "negative_parameters": negative,
            });
            (s, Vec::new())
        }
    } else {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        match bytes.get(..4) {
            Some(m) if m == model::MODEL_MAGIC => {
                let model = MorphableReflectanceModel::from_bytes(&bytes)?;
                let mut s = model_stats(&model);
                s["kind"] = json!("reflectance-model");
                (s, model.invariant_violations())
            }
            Some(m) if m == lighting::LIGHT_MAGIC => {
                let lm = LightingPcaModel::from_bytes(&bytes)?;
                let mut s = light_stats(&lm);
                s["kind"] = json!("lighting-model");
                (s, lm.invariant_violations())
            }
            _ => return Err(Error::Format(format!("{}: unrecognized file (no MFRM or MFLM magic)", p.display())).into()),
        }
    };
    check_invariants(violations)?;
    Ok(Report::new(stats).input(p))
}

/// Entry point shared by the binary: parses arguments, runs, prints stats,
/// and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::INPUT_FORMAT } else { exit::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(stats) => {
            let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
            match &cli.globals.out {
                Some(path) => {
                    if let Err(e) = fs::write(path, text + "\n") {
                        eprintln!("error: {}: {e}", path.display());
                        return exit::INPUT_FORMAT;
                    }
                }
                None => println!("{text}"),
            }
            exit::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `regloc` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 data (I/O, format, invalid input,
//! empty dataset), 4 numeric (degenerate geometry, failed gradient check).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regloc_core::features::{CloudInputs, DescriptorConfig};
use regloc_core::geometry::{Environment, RigidTransform};
use regloc_core::icp::{icp_register, IcpConfig};
use regloc_core::io::{self, DescriptorMeta};
use regloc_core::regnet::{lam, quadratic_attention_reference, register, LamParams, RegNetConfig, DEFAULT_TAU};
use regloc_core::retrieval::{
    build_index, query_top_n, recall_at, registration_metrics, DescriptorIndex, RecallQuery, RecallVariant,
    SearchBackend,
};
use regloc_core::synthgen::{build_scene, generate_traverse, EnvironmentPreset, SceneSpec, TraverseConfig};
use regloc_core::train::{describe_all, train, Dataset, Generator, TrainConfig, TrainState};
use regloc_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "regloc", version, about = "Registration-aided LiDAR place recognition toolkit")]
struct Cli {
    /// Worker threads (falls back to REGLOC_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a multi-environment synthetic traverse.
    Synthgen(SynthgenArgs),
    /// Compute global descriptors for a cloud or a manifest.
    Features(FeaturesArgs),
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Point-to-point ICP baseline.
    Icp(IcpArgs),
    /// Adversarial training over virtual and real manifests.
    Train(TrainArgs),
    /// Build a descriptor index.
    Index(IndexArgs),
    /// Nearest database frames for one descriptor.
    Query(QueryArgs),
    /// Place-recognition recall of a query set.
    EvalPr(EvalPrArgs),
    /// Rotation and translation errors of estimated poses.
    EvalReg(EvalRegArgs),
    /// Time the attention module against a quadratic reference.
    BenchLam(BenchLamArgs),
}

#[derive(Debug, Args)]
struct SynthgenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated environments.
    #[arg(long, default_value = "Sunny,Cloudy,Overcast,Dusk,Night,Rain,Snow")]
    envs: String,
    #[arg(long, default_value_t = 1000.0)]
    route_length: f64,
    #[arg(long, default_value_t = 20.0)]
    spacing: f64,
    #[arg(long, default_value_t = 4096)]
    points: usize,
    /// Multiplies each preset's jitter, dropout and speckle.
    #[arg(long, default_value_t = 1.0)]
    severity: f64,
    /// Scene layout seed (defaults to --seed).
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Added to every frame id.
    #[arg(long, default_value_t = 0)]
    id_offset: u64,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Training checkpoint; without it a seeded untrained network is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    knn: usize,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    /// Single cloud; writes a raw f64 descriptor to --out.
    #[arg(long, conflicts_with = "manifest")]
    cloud: Option<PathBuf>,
    /// Manifest; writes `<out>.vdsc` descriptors and `<out>.csv` metadata.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    k_frac: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Disable outlier removal.
    #[arg(long)]
    no_epcor: bool,
    /// Pose output (3×4 row-major); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV `i,x,y,z,c` of kept source rows, soft matches and confidences.
    #[arg(long)]
    dump_correspondences: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct IcpArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Initial pose; identity when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long = "virtual")]
    virtual_manifest: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// `key = value` file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    check_grads: bool,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    descs: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Raw little-endian f64 descriptor.
    #[arg(long)]
    desc: PathBuf,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value = "exhaustive")]
    backend: String,
}

#[derive(Debug, Args)]
struct EvalPrArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query metadata CSV; descriptors are read from the `.vdsc` with the same stem.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "top1")]
    variant: String,
    /// Success radius, meters.
    #[arg(long, default_value_t = 0.0)]
    r_pos: f64,
    /// Skip a query's own frame id when it is also in the index.
    #[arg(long)]
    exclude_self: bool,
    #[arg(long, default_value = "exhaustive")]
    backend: String,
}

#[derive(Debug, Args)]
struct EvalRegArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Debug, Args)]
struct BenchLamArgs {
    /// Cloud sizes (repeatable).
    #[arg(long = "n", required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Also time the quadratic attention reference.
    #[arg(long)]
    reference: bool,
}

/// Anything a subcommand can fail with, mapped onto an exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn exit_code(f: &Failure) -> i32 {
    match f {
        Failure::Usage(_) => EXIT_USAGE,
        Failure::Core(Error::DegenerateGeometry(_) | Error::GradientCheck(_)) => EXIT_NUMERIC,
        Failure::Core(_) => EXIT_DATA,
    }
}

/// Runs `regloc` with `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let threads = match resolve_threads(cli.threads) {
        Ok(t) => t,
        Err(f) => return report(f),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return report(Failure::Usage(e.to_string())),
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => 0,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> i32 {
    match &f {
        Failure::Usage(m) => eprintln!("error: {m}"),
        Failure::Core(e) => eprintln!("error: {e}"),
    }
    exit_code(&f)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn resolve_threads(flag: Option<usize>) -> std::result::Result<usize, Failure> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("REGLOC_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("REGLOC_THREADS='{v}' is not a count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Failure::Usage("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Synthgen(a) => synthgen(a, cli.seed),
        Command::Features(a) => features(a, cli.seed),
        Command::Register(a) => register_cmd(a, cli.seed),
        Command::Icp(a) => icp_cmd(a),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Index(a) => index_cmd(a),
        Command::Query(a) => query_cmd(a),
        Command::EvalPr(a) => eval_pr(a),
        Command::EvalReg(a) => eval_reg(a),
        Command::BenchLam(a) => bench_lam(a, cli.seed),
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn synthgen(a: &SynthgenArgs, seed: u64) -> Outcome {
    let presets = a
        .envs
        .split(',')
        .map(|s| s.trim().parse::<Environment>().map(|e| EnvironmentPreset::default_for(e).with_severity(a.severity)))
        .collect::<regloc_core::Result<Vec<_>>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if !(a.route_length > 0.0) {
        return usage("route length must be positive");
    }
    let scene = build_scene(&SceneSpec::with_route_length(a.scene_seed.unwrap_or(seed), a.route_length))?;
    let cfg = TraverseConfig {
        frame_spacing: a.spacing,
        n_points: a.points,
        seed,
        ..TraverseConfig::default()
    };
    if a.id_offset == 0 {
        let m = generate_traverse(&scene, &presets, &cfg, &a.out)?;
        log::info!("wrote {} frames to {}", m.rows.len(), a.out.display());
    } else {
        let mut frames = regloc_core::synthgen::generate_frames(&scene, &presets, &cfg)?;
        for f in &mut frames {
            f.frame_id += a.id_offset;
        }
        regloc_core::synthgen::write_traverse(&frames, &a.out)?;
    }
    Ok(())
}

/// Generator from a checkpoint, or a seeded untrained one whose input
/// standardisation is fitted to `calibration`.
fn load_generator(m: &ModelArgs, seed: u64, calibration: &[&CloudInputs]) -> std::result::Result<Generator, Failure> {
    match &m.checkpoint {
        Some(p) => Ok(TrainState::load(p)?.generator),
        None => {
            let mut g = Generator::new(&mut ChaCha8Rng::seed_from_u64(seed));
            let samples: Vec<Array2<f64>> = calibration.iter().map(|c| c.raw.clone()).collect();
            g.features.calibrate_inputs(&samples);
            Ok(g)
        }
    }
}

fn train_like(knn: usize) -> TrainConfig {
    TrainConfig {
        knn,
        gem_p: DescriptorConfig::default().gem_p,
        ..TrainConfig::default()
    }
}

fn features(a: &FeaturesArgs, seed: u64) -> Outcome {
    let cfg = train_like(a.model.knn);
    match (&a.cloud, &a.manifest) {
        (Some(path), None) => {
            let cloud = io::read_cloud(path)?;
            let inputs = CloudInputs::prepare(&cloud, a.model.knn)?;
            let g = load_generator(&a.model, seed, &[&inputs])?;
            let d = describe_all(&g, &[&inputs], &cfg)?;
            io::write_f64_vec(&a.out, &d[0])?;
        }
        (None, Some(path)) => {
            let manifest = io::read_manifest(path)?;
            let data = Dataset::from_manifest(&manifest, a.model.knn)?;
            if data.is_empty() {
                return Err(Error::EmptyDataset("manifest has no frames".into()).into());
            }
            let inputs: Vec<&CloudInputs> = data.frames.iter().map(|f| &f.inputs).collect();
            let g = load_generator(&a.model, seed, &inputs)?;
            let d = describe_all(&g, &inputs, &cfg)?;
            let meta: Vec<DescriptorMeta> = manifest.rows.iter().map(DescriptorMeta::from).collect();
            io::write_vdsc(&a.out.with_extension("vdsc"), &d)?;
            io::write_descriptor_meta(&a.out.with_extension("csv"), &meta)?;
        }
        _ => return usage("give exactly one of --cloud or --manifest"),
    }
    Ok(())
}

fn register_cmd(a: &RegisterArgs, seed: u64) -> Outcome {
    let p = io::read_cloud(&a.source)?;
    let q = io::read_cloud(&a.target)?;
    let ip = CloudInputs::prepare(&p, a.model.knn)?;
    let iq = CloudInputs::prepare(&q, a.model.knn)?;
    let g = load_generator(&a.model, seed, &[&ip, &iq])?;
    let cfg = RegNetConfig {
        k_frac: a.k_frac,
        tau: a.tau,
        masking: !a.no_epcor,
        knn: a.model.knn,
    };
    let out = register(&p, &q, &g.features, &g.lam, &cfg)?;
    if let Some(path) = &a.dump_correspondences {
        let mut s = String::from("i,x,y,z,c\n");
        let c = &out.correspondences;
        for (k, &i) in c.indices.iter().enumerate() {
            let m = c.matched[k];
            let _ = writeln!(s, "{i},{},{},{},{}", m.x, m.y, m.z, c.weights[k]);
        }
        fs::write(path, s)?;
    }
    write_or_print(a.out.as_deref(), &io::format_pose(&out.transform))
}

fn icp_cmd(a: &IcpArgs) -> Outcome {
    let p = io::read_cloud(&a.source)?;
    let q = io::read_cloud(&a.target)?;
    let init = match &a.init {
        Some(path) => io::read_pose(path)?,
        None => RigidTransform::identity(),
    };
    let cfg = IcpConfig {
        max_iterations: a.max_iterations,
        ..IcpConfig::default()
    };
    let r = icp_register(&p, &q, &init, &cfg)?;
    log::info!("icp: {} iterations, rmse {}", r.iterations, r.rmse);
    write_or_print(a.out.as_deref(), &io::format_pose(&r.transform))
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    // an explicit --seed wins over the file
    if seed != 0 || a.config.is_none() {
        cfg.seed = seed;
    }
    cfg.check_grads |= a.check_grads;
    let virt = Dataset::from_manifest(&io::read_manifest(&a.virtual_manifest)?, cfg.knn)?;
    let real = Dataset::from_manifest(&io::read_manifest(&a.real)?, cfg.knn)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("config.txt"), cfg.to_text())?;
    let (state, _) = train(&virt, &real, &cfg, Some(&a.out_dir))?;
    state.save(&a.out_dir.join("final.vprm"))?;
    Ok(())
}

fn index_cmd(a: &IndexArgs) -> Outcome {
    let d = io::read_vdsc(&a.descs)?;
    let m = io::read_descriptor_meta(&a.meta)?;
    build_index(&d, &m, SearchBackend::Exhaustive)?.save(&a.out)?;
    Ok(())
}

fn parse_backend(s: &str) -> std::result::Result<SearchBackend, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn query_cmd(a: &QueryArgs) -> Outcome {
    let idx = DescriptorIndex::load(&a.index, parse_backend(&a.backend)?)?;
    let q = io::read_f64_vec(&a.desc)?;
    let hits = query_top_n(&idx, &q, a.n)?;
    let mut s = String::from("rank,frame_id,distance\n");
    for (r, h) in hits.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", r + 1, h.frame_id, h.distance);
    }
    write_or_print(None, &s)
}

fn eval_pr(a: &EvalPrArgs) -> Outcome {
    let variant: RecallVariant = a.variant.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let idx = DescriptorIndex::load(&a.index, parse_backend(&a.backend)?)?;
    let meta = io::read_descriptor_meta(&a.queries)?;
    let descs = io::read_vdsc(&a.queries.with_extension("vdsc"))?;
    if meta.len() != descs.len() {
        return Err(Error::Format(format!("{} query rows but {} descriptors", meta.len(), descs.len())).into());
    }
    let queries: Vec<RecallQuery> = meta
        .iter()
        .zip(descs)
        .map(|(m, d)| RecallQuery {
            frame_id: m.frame_id,
            descriptor: d,
            position: m.position(),
        })
        .collect();
    let recall = recall_at(&idx, &queries, variant, a.r_pos, a.exclude_self)?;
    let s = format!(
        "variant,n,queries,recall\n{variant},{},{},{recall}\n",
        variant.depth(idx.len()),
        queries.len()
    );
    write_or_print(None, &s)
}

fn eval_reg(a: &EvalRegArgs) -> Outcome {
    let est = io::read_poses(&a.est)?;
    let gt = io::read_poses(&a.gt)?;
    let m = registration_metrics(&est, &gt)?;
    write_or_print(
        None,
        &format!("mse_r,mae_r,mse_t,mae_t\n{},{},{},{}\n", m.mse_r, m.mae_r, m.mse_t, m.mae_t),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

/// Median wall time of `repeats` runs of `f`, seconds.
pub fn median_seconds(repeats: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

fn bench_lam(a: &BenchLamArgs, seed: u64) -> Outcome {
    if a.dim == 0 || a.sizes.contains(&0) {
        return usage("sizes and dimension must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LamParams::new(a.dim, &mut rng);
    let mut s = String::from("method,n,dim,median_seconds\n");
    for &n in &a.sizes {
        let p = random_matrix(&mut rng, n, a.dim);
        let q = random_matrix(&mut rng, n, a.dim);
        let mut err = None;
        let t = median_seconds(a.repeats, || {
            if let Err(e) = lam(&p, &q, &params) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        let _ = writeln!(s, "lam,{n},{},{t}", a.dim);
        if a.reference {
            let t = median_seconds(a.repeats, || {
                let _ = quadratic_attention_reference(&p, &q);
            });
            let _ = writeln!(s, "quadratic,{n},{},{t}", a.dim);
        }
    }
    write_or_print(None, &s)
}

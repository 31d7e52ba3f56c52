use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cskf::bench::verify::verify_suite;
use cskf::bench::{
    backsolve_benchmark, corridor_map, loglog_slope, map_update_benchmark, memory_report, revisit_map, run_experiment,
    write_report, ExperimentConfig, ModeSpec, SeedWorld,
};
use cskf::mapper::{export_bundle, import_bundle, partition_submaps, MapBundle};
use cskf::sim::{write_session_csv, NoiseConfig};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "cskf-bench", version, about = "Simulation, mapping and localization benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulated world and sensor sessions.
    Sim {
        #[command(subcommand)]
        action: SimAction,
    },
    /// Offline maps.
    Map {
        #[command(subcommand)]
        action: MapAction,
    },
    /// Localization runs over one or more seeds.
    Run(RunArgs),
    /// Storage and timing scaling.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Property battery; exits nonzero if any property fails.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Scenario {
    /// TOML experiment config; built-in desk preset if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl Scenario {
    fn load(&self) -> Result<ExperimentConfig> {
        load_config(self.config.as_deref())
    }
}

#[derive(Subcommand)]
enum SimAction {
    /// Writes the world and both sessions as CSV.
    Generate {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MapAction {
    /// Builds a map from the mapping session and writes the bundle file.
    Build {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value_t = 1)]
        submaps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the keyframe split and shared landmarks for `submaps` segments.
    Partition {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, default_value_t = 2)]
        submaps: usize,
    },
    /// Writes poses, features and factor statistics of a bundle as CSV.
    Export {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints a summary of a bundle file.
    Inspect { bundle: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cskf,
    Scskf,
    Inflated,
    Nomap,
    Oracle,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Sub-map count for scskf.
    #[arg(long, default_value_t = 2)]
    submaps: usize,
    /// Single seed; the config's seed list if omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Map bundle to localize against instead of building one.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    /// Room circled once per 420 dims; the map densifies.
    Revisit,
    /// Corridor walked three times; the map extends.
    Corridor,
}

#[derive(Subcommand)]
enum BenchAction {
    /// Single-feature back-solve time and per-update map-phase time.
    Backsolve {
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = Family::Revisit)]
        family: Family,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sparse factor bytes against a dense covariance.
    Memory {
        #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
        dims: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Family::Corridor)]
        family: Family,
        #[arg(long, default_value_t = 9)]
        seed: u64,
        /// Map file to report on instead of generated maps.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let config = match path {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn family_map(family: Family, dim: usize, submaps: usize, seed: u64) -> Result<MapBundle> {
    Ok(match family {
        Family::Revisit => revisit_map(dim, submaps, seed)?,
        Family::Corridor => corridor_map(dim, submaps, seed)?,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn sim_generate(scenario: &Scenario, out: &Path) -> Result<()> {
    let config = scenario.load()?;
    let world = config.world_features(scenario.seed)?;
    fs::create_dir_all(out)?;
    let mut f = create(&out.join("world.csv"))?;
    writeln!(f, "id,x,y,z,visibility_radius,kind")?;
    for p in &world.points {
        writeln!(f, "{},{:.9},{:.9},{:.9},{:.6},{:?}", p.id, p.position.x, p.position.y, p.position.z, p.visibility_radius, p.kind)?;
    }
    f.flush()?;
    write_session_csv(&out.join("mapping"), &config.mapping_session(&world, scenario.seed)?)?;
    write_session_csv(&out.join("localization"), &config.localization_session(&world, scenario.seed)?)?;
    println!("wrote {} world points and two sessions to {}", world.points.len(), out.display());
    Ok(())
}

fn map_build(scenario: &Scenario, submaps: usize, out: &Path) -> Result<()> {
    let config = scenario.load()?;
    let world = config.world_features(scenario.seed)?;
    let data = config.mapping_data(&world, scenario.seed)?;
    let bundle = config.build_map(&data, submaps)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    export_bundle(out, &bundle)?;
    println!("wrote {} sub-map(s), dim {} to {}", bundle.submaps.len(), bundle.total_dim(), out.display());
    Ok(())
}

fn map_partition(scenario: &Scenario, submaps: usize) -> Result<()> {
    let config = scenario.load()?;
    let world = config.world_features(scenario.seed)?;
    let data = config.mapping_data(&world, scenario.seed)?;
    let part = partition_submaps(&data, submaps)?;
    println!("segment,first_keyframe,end_keyframe,features");
    for (i, r) in part.ranges.iter().enumerate() {
        println!("{i},{},{},{}", r.start, r.end, part.features[i].len());
    }
    for a in 0..submaps {
        for b in a + 1..submaps {
            println!("shared {a}-{b}: {}", part.common(a, b).len());
        }
    }
    Ok(())
}

fn map_export(bundle: &Path, out: &Path) -> Result<()> {
    let b = import_bundle(bundle)?;
    fs::create_dir_all(out)?;
    for (i, sm) in b.submaps.iter().enumerate() {
        let mut f = create(&out.join(format!("submap{i}_poses.csv")))?;
        writeln!(f, "index,qx,qy,qz,qw,px,py,pz")?;
        for (k, p) in sm.poses.iter().enumerate() {
            let q = p.q.quaternion();
            writeln!(f, "{k},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", q.i, q.j, q.k, q.w, p.p.x, p.p.y, p.p.z)?;
        }
        f.flush()?;
        let mut f = create(&out.join(format!("submap{i}_features.csv")))?;
        writeln!(f, "id,anchor,x,y,z")?;
        for (j, feat) in sm.features.iter().enumerate() {
            let x = sm.feature_in_map(j);
            writeln!(f, "{},{},{:.9},{:.9},{:.9}", feat.id, feat.anchor, x.x, x.y, x.z)?;
        }
        f.flush()?;
    }
    write_memory_csv(&out.join("factors.csv"), &[b])?;
    println!("exported to {}", out.display());
    Ok(())
}

fn map_inspect(bundle: &Path) -> Result<()> {
    let b = import_bundle(bundle)?;
    println!("camera {:?}", b.camera);
    println!("pixel sigma {}", b.pixel_sigma);
    println!("sub-maps {}, total dim {}", b.submaps.len(), b.total_dim());
    for (r, sm) in memory_report(&b).iter().zip(&b.submaps) {
        println!(
            "  [{}] poses {} features {} dim {} nnz {} factor {} B dense {} B ratio {:.4}",
            r.submap,
            sm.poses.len(),
            sm.features.len(),
            r.dim,
            r.nnz,
            r.factor_bytes,
            r.dense_bytes,
            r.ratio
        );
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(mode) = args.mode {
        config.modes = vec![match mode {
            Mode::Cskf => ModeSpec::Cskf,
            Mode::Scskf => ModeSpec::Scskf { submaps: args.submaps },
            Mode::Inflated => ModeSpec::Inflated { sigma: NoiseConfig::INFLATED_PIXEL_SIGMA },
            Mode::Nomap => ModeSpec::Nomap,
            Mode::Oracle => ModeSpec::Oracle,
        }];
    }
    config.validate()?;
    let progress = |r: &cskf::bench::RunReport| {
        eprintln!("{:>10} seed {:>4}: rmse {:.4} m, mean NEES {:.2}", r.mode, r.seed, r.rmse_position, r.mean_nees_position)
    };
    let report = match &args.map {
        None => run_experiment(&config, progress)?,
        Some(path) => {
            let bundle = import_bundle(path)?;
            if let Some(m) = config.modes.iter().find(|m| m.submaps() != 0 && m.submaps() != bundle.submaps.len()) {
                return Err(format!("mode {} needs {} sub-map(s), bundle has {}", m.label(), m.submaps(), bundle.submaps.len()).into());
            }
            let mut runs = Vec::new();
            for &seed in &config.seeds {
                let world = SeedWorld::with_map(&config, seed, bundle.clone())?;
                for mode in &config.modes {
                    let r = cskf::bench::run_mode(&config, &world, mode)?;
                    progress(&r);
                    runs.push(r);
                }
            }
            cskf::bench::assemble_report(&config, runs)?
        }
    };
    write_report(&args.out, &report)?;
    fs::write(args.out.join("config.toml"), toml::to_string(&config)?)?;
    for s in &report.summaries {
        println!(
            "{}: {} runs, median RMSE {:.4} m, ANEES {:.2} [{:.2}, {:.2}]",
            s.mode, s.runs, s.median_rmse, s.average_nees, s.nees_lower, s.nees_upper
        );
    }
    Ok(())
}

fn write_memory_csv(path: &Path, bundles: &[MapBundle]) -> Result<()> {
    let mut f = create(path)?;
    writeln!(f, "map,submap,dim,nnz,factor_bytes,dense_bytes,ratio")?;
    for (m, b) in bundles.iter().enumerate() {
        for r in memory_report(b) {
            writeln!(f, "{m},{},{},{},{},{},{:.6}", r.submap, r.dim, r.nnz, r.factor_bytes, r.dense_bytes, r.ratio)?;
        }
    }
    f.flush()?;
    Ok(())
}

fn bench_backsolve(dims: &[usize], reps: usize, family: Family, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for (k, &dim) in dims.iter().enumerate() {
        let s = seed + k as u64;
        let whole = family_map(family, dim, 1, s)?;
        let split = family_map(family, dim, 2, s)?;
        let p = backsolve_benchmark(&whole.submaps[0], reps, s);
        let l1 = map_update_benchmark(&whole, 30, reps.min(100), s);
        let l2 = map_update_benchmark(&split, 30, reps.min(100), s);
        println!("dim {:>6} nnz {:>8} backsolve {:.4} ms  map update L1 {:.3} ms L2 {:.3} ms", p.dim, p.nnz, 1e3 * p.median_s, 1e3 * l1, 1e3 * l2);
        rows.push((p, l1, l2));
    }
    let d: Vec<f64> = rows.iter().map(|r| r.0.dim as f64).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.0.median_s).collect();
    if rows.len() > 1 {
        println!("log-log slope of back-solve time vs dim: {:.2}", loglog_slope(&d, &t));
    }
    if let Some(path) = out {
        let mut f = create(path)?;
        writeln!(f, "dim,nnz,reps,backsolve_s,map_update_l1_s,map_update_l2_s")?;
        for (p, l1, l2) in &rows {
            writeln!(f, "{},{},{},{:.9},{:.9},{:.9}", p.dim, p.nnz, p.reps, p.median_s, l1, l2)?;
        }
        f.flush()?;
    }
    Ok(())
}

fn bench_memory(dims: &[usize], family: Family, seed: u64, bundle: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let bundles = match bundle {
        Some(p) => vec![import_bundle(p)?],
        None => dims.iter().enumerate().map(|(k, &d)| family_map(family, d, 1, seed + k as u64)).collect::<Result<_>>()?,
    };
    let rows: Vec<_> = bundles.iter().flat_map(memory_report).collect();
    for r in &rows {
        println!("dim {:>6} nnz {:>8} factor {:>10} B dense {:>12} B ratio {:.4}", r.dim, r.nnz, r.factor_bytes, r.dense_bytes, r.ratio);
    }
    if rows.len() > 1 {
        let d: Vec<f64> = rows.iter().map(|r| r.dim as f64).collect();
        let n: Vec<f64> = rows.iter().map(|r| r.nnz as f64).collect();
        println!("log-log slope of nnz vs dim: {:.2}", loglog_slope(&d, &n));
    }
    if let Some(path) = out {
        write_memory_csv(path, &bundles)?;
    }
    Ok(())
}

fn verify(seed: u64) -> Result<bool> {
    let results = verify_suite(seed);
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        eprintln!("failed properties: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Sim { action: SimAction::Generate { scenario, out } } => sim_generate(&scenario, &out)?,
        Command::Map { action } => match action {
            MapAction::Build { scenario, submaps, out } => map_build(&scenario, submaps, &out)?,
            MapAction::Partition { scenario, submaps } => map_partition(&scenario, submaps)?,
            MapAction::Export { bundle, out } => map_export(&bundle, &out)?,
            MapAction::Inspect { bundle } => map_inspect(&bundle)?,
        },
        Command::Run(args) => run(&args)?,
        Command::Bench { action } => match action {
            BenchAction::Backsolve { dims, reps, family, seed, out } => bench_backsolve(&dims, reps, family, seed, out.as_deref())?,
            BenchAction::Memory { dims, family, seed, bundle, out } => {
                bench_memory(&dims, family, seed, bundle.as_deref(), out.as_deref())?
            }
        },
        Command::Verify { seed } => return verify(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use deshadow::config::TrainConfig;
use deshadow::data::{load_mask, synth_dataset, Manifest, SynthConfig};
use deshadow::eval::{evaluate, infer_file};
use deshadow::metrics::{reports_csv, reports_table};
use deshadow::sphere::{
    exp_map, geodesic_distance, log_map, tangent_linear, SpherePoint, SphericalConfig,
};
use deshadow::train::{train, Networks};
use deshadow::{selftest, Tensor};

#[derive(Parser)]
#[command(name = "deshadow", version, about = "Weakly supervised shadow removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shadow dataset (images/, masks/, gt/ and manifests).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Crop size every mask must support (default: half the image size).
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Train from a TOML configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override `seed` from the file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `iterations` from the file.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override `out_dir` from the file.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a checkpoint and the identity baseline on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the CSV report (default: eval_report.csv beside the checkpoint).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Remove shadows from one image, writing <name>.deshadow.png beside it.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Optional shadow mask; reports the mean change inside and outside it.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Real infrared companion instead of the luminance proxy.
        #[arg(long)]
        infrared: Option<PathBuf>,
    },
    /// Run the sphere-geometry property suite.
    Selftest {
        /// Sphere radius.
        #[arg(long = "r", default_value_t = 1.0)]
        radius: f64,
        /// Threshold below which the near-pole series are used.
        #[arg(long, default_value_t = SphericalConfig::DEFAULT_POLE_TOLERANCE)]
        pole_tolerance: f64,
        /// Ambient dimension of the sphere.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Map one feature vector through the sphere: project, log map,
    /// tangent-space affine map, exp map. The map comes from a checkpoint or
    /// from --weight/--bias.
    Transform {
        /// Comma-separated coordinates.
        #[arg(long, allow_hyphen_values = true)]
        point: String,
        /// Ignored with --checkpoint, which carries its own radius.
        #[arg(long = "r", default_value_t = 1.0)]
        radius: f64,
        /// Row-major tangent weight, rows separated by `;` (default: identity).
        #[arg(long, allow_hyphen_values = true, conflicts_with = "checkpoint")]
        weight: Option<String>,
        /// Comma-separated tangent bias (default: zero).
        #[arg(long, allow_hyphen_values = true, conflicts_with = "checkpoint")]
        bias: Option<String>,
        /// Read the learned map of one modality from a trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Side::Visible)]
        modality: Side,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Visible,
    Infrared,
}

type CmdResult = Result<ExitCode, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            patch_size,
        } => cmd_synth(out, count, size, seed, patch_size),
        Command::Train {
            config,
            seed,
            iterations,
            out_dir,
        } => cmd_train(config, seed, iterations, out_dir),
        Command::Eval {
            checkpoint,
            manifest,
            csv,
        } => cmd_eval(checkpoint, manifest, csv),
        Command::Infer {
            checkpoint,
            image,
            mask,
            infrared,
        } => cmd_infer(checkpoint, image, mask, infrared),
        Command::Selftest {
            radius,
            pole_tolerance,
            dim,
            seed,
        } => cmd_selftest(radius, pole_tolerance, dim, seed),
        Command::Transform {
            point,
            radius,
            weight,
            bias,
            checkpoint,
            modality,
        } => match checkpoint {
            Some(ck) => cmd_transform_checkpoint(&point, &ck, modality),
            None => cmd_transform(&point, radius, weight.as_deref(), bias.as_deref()),
        },
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(
    out: PathBuf,
    count: usize,
    size: usize,
    seed: u64,
    patch_size: Option<usize>,
) -> CmdResult {
    let mut cfg = SynthConfig::new(count, size, seed);
    if let Some(p) = patch_size {
        cfg.patch_size = p;
    }
    synth_dataset(&out, &cfg).map_err(|e| e.to_string())?;
    println!("{}", out.join("manifest.tsv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    config: PathBuf,
    seed: Option<u64>,
    iterations: Option<usize>,
    out_dir: Option<PathBuf>,
) -> CmdResult {
    let mut cfg = TrainConfig::load(&config).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let start = Instant::now();
    let summary = train(&cfg, &mut |step, r| {
        eprintln!(
            "step {step:>6}  total {:.5}  rec {:.5}  ide {:.5}  adv_g {:.4}  adv_d {:.4}  [{:.1}s]",
            r.total,
            r.rec,
            r.ide,
            r.adv_generator,
            r.adv_discriminator,
            start.elapsed().as_secs_f64()
        );
    })
    .map_err(|e| e.to_string())?;
    println!("loss log: {}", summary.loss_log.display());
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: PathBuf, manifest: PathBuf, csv: Option<PathBuf>) -> CmdResult {
    let nets = Networks::load(&checkpoint).map_err(|e| e.to_string())?;
    let samples = Manifest::load(&manifest)
        .and_then(|m| m.load_samples())
        .map_err(|e| e.to_string())?;
    let ev = evaluate(&nets, &samples).map_err(|e| e.to_string())?;
    let reports = [("model", &ev.model), ("identity", &ev.baseline)];
    print!("{}", reports_table(&reports));
    if ev.model.full.is_none() {
        println!("(no ground truth found: entropy only)");
    }
    let csv = csv.unwrap_or_else(|| checkpoint.with_file_name("eval_report.csv"));
    fs::write(&csv, reports_csv(&reports)).map_err(|e| format!("{}: {e}", csv.display()))?;
    println!("report: {}", csv.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(
    checkpoint: PathBuf,
    image: PathBuf,
    mask: Option<PathBuf>,
    infrared: Option<PathBuf>,
) -> CmdResult {
    let nets = Networks::load(&checkpoint).map_err(|e| e.to_string())?;
    let (out, pred) = infer_file(&nets, &image, infrared.as_deref()).map_err(|e| e.to_string())?;
    println!("{}", out.display());
    if let Some(m) = mask {
        let mask = load_mask(&m).map_err(|e| e.to_string())?;
        let input = deshadow::data::load_rgb(&image).map_err(|e| e.to_string())?;
        if mask.shape()[1..] != input.shape()[1..] {
            return Err("mask and image sizes differ".into());
        }
        let diff = Tensor::from_fn(input.shape().to_vec(), |i| pred.data()[i] - input.data()[i]);
        let (inside, outside) = deshadow::data::region_means(&diff, &mask);
        println!("mean change: shadow {inside:+.4}, non-shadow {outside:+.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(radius: f64, pole_tolerance: f64, dim: usize, seed: u64) -> CmdResult {
    let mut cfg = SphericalConfig::new(radius, dim).map_err(|e| e.to_string())?;
    // Deliberately unchecked so that a bad tolerance shows up as failing properties.
    cfg.pole_tolerance = pole_tolerance;
    let results = selftest::run(&cfg, seed);
    let mut failed = 0;
    for p in &results {
        println!(
            "{} {:<40} {}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.detail
        );
        failed += usize::from(!p.passed);
    }
    println!(
        "{} of {} properties passed (r = {radius}, n = {dim})",
        results.len() - failed,
        results.len()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{v}` is not a number"))
        })
        .collect()
}

fn cmd_transform(point: &str, radius: f64, weight: Option<&str>, bias: Option<&str>) -> CmdResult {
    let coords = parse_list(point)?;
    let n = coords.len();
    let cfg = SphericalConfig::new(radius, n).map_err(|e| e.to_string())?;
    let k = n - 1;
    let w = match weight {
        Some(s) => {
            let rows: Vec<Vec<f64>> = s.split(';').map(parse_list).collect::<Result<_, _>>()?;
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(format!("weight must be {k}x{k}"));
            }
            Tensor::new([k, k], rows.concat()).map_err(|e| e.to_string())?
        }
        None => Tensor::from_fn([k, k], |i| if i / k == i % k { 1.0 } else { 0.0 }),
    };
    let b = match bias {
        Some(s) => Tensor::new([k], parse_list(s)?).map_err(|e| e.to_string())?,
        None => Tensor::zeros([k]),
    };
    print_transform(coords, &cfg, &w, &b)
}

fn cmd_transform_checkpoint(point: &str, checkpoint: &Path, side: Side) -> CmdResult {
    let nets = Networks::load(checkpoint).map_err(|e| e.to_string())?;
    let remover = &nets.remover;
    let lin = match side {
        Side::Visible => remover.visible_sphere,
        Side::Infrared => remover.infrared_sphere,
    };
    let coords = parse_list(point)?;
    let cfg = &remover.sphere;
    if coords.len() != cfg.ambient_dim {
        return Err(format!(
            "this checkpoint's sphere lives in {} dimensions, got {} coordinates",
            cfg.ambient_dim,
            coords.len()
        ));
    }
    let store = &nets.generator;
    print_transform(coords, cfg, store.get(lin.weight), store.get(lin.bias))
}

fn print_transform(coords: Vec<f64>, cfg: &SphericalConfig, w: &Tensor, b: &Tensor) -> CmdResult {
    let run = || -> deshadow::Result<()> {
        let x = SpherePoint::new(coords, cfg)?;
        let m = log_map(&x, cfg)?;
        let moved = tangent_linear(&m, w, b)?;
        let y = exp_map(&moved, cfg)?;
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.9}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        println!("on sphere:   [{}]", fmt(x.coords()));
        println!("log map:     [{}]", fmt(m.components()));
        println!(
            "distance:    {:.9}",
            geodesic_distance(&cfg.north_pole(), &x, cfg)?
        );
        println!("transformed: [{}]", fmt(y.coords()));
        Ok(())
    };
    run().map_err(|e| e.to_string())?;
    Ok(ExitCode::SUCCESS)
}

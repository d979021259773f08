mod config;
mod data;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use tps_partition::fit::{
    evaluate, fit_heights_direct, fit_heights_supervised, grid_dims, predict_partition,
    pretrain_cae_soft, run_grid, train_regressor, volume_control_grid, write_run, write_sweep,
    GridRun, PartitionResult, SweepTable,
};
use tps_partition::neural::{RegressorModel, ShapeModel};
use tps_partition::phantom::{phantom_batch_with, Phantom, PhantomParams};
use tps_partition::tps::{write_obj, ControlGrid, SurfaceDoc};
use tps_partition::util::write_atomic;
use tps_partition::voxel::{read_field, write_pgm_slice, Axis, BinaryMask};

use config::{parse_axis, ExperimentConfig, FitFlags, Layout};
use manifest::Recorder;

#[derive(Parser)]
#[command(
    name = "tps-partition",
    version,
    about = "Partition vertebra masks with thin-plate-spline surfaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Master seed; every stage seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment config (JSON). Flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Obj,
    PgmSlices,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded batch of phantom vertebrae.
    Phantom {
        /// Number of phantoms.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Base phantom parameters (JSON), replacing the config's.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the shape autoencoder on the body masks of a phantom set.
    CaeTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit one surface per vertebra by direct height optimization.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Shape model from `cae-train`.
        #[arg(long)]
        cae: Option<PathBuf>,
        /// Fit against the ground-truth body masks instead of the shape model.
        #[arg(long)]
        supervised: bool,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Train the height regressor through the shape-model loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cae: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Partition a phantom set with a trained regressor and score it.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        regressor: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Direct fitting over several control-point counts with a combined table.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cae: PathBuf,
        /// Control-point counts, comma separated; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        grids: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Export a surface as an OBJ mesh or a mask as PGM slices.
    Export {
        /// Surface JSON (obj) or mask/field JSON (pgm-slices).
        input: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Output file (obj) or directory (pgm-slices).
        #[arg(long)]
        out: PathBuf,
        /// OBJ lattice resolution.
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
        resolution: u64,
        /// Axis the slices are orthogonal to.
        #[arg(long, default_value = "z", value_parser = parse_axis)]
        slice_axis: Axis,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Phantom { n, params, common } => {
            cmd_phantom(n as usize, params.as_deref(), &common)
        }
        Command::CaeTrain {
            data,
            epochs,
            common,
        } => cmd_cae_train(&data, epochs, &common),
        Command::Fit {
            data,
            cae,
            supervised,
            common,
            fit,
        } => cmd_fit(&data, cae.as_deref(), supervised, &common, &fit),
        Command::Train {
            data,
            cae,
            common,
            fit,
        } => cmd_train(&data, &cae, &common, &fit),
        Command::Eval {
            data,
            regressor,
            common,
            fit,
        } => cmd_eval(&data, &regressor, &common, &fit),
        Command::Sweep {
            data,
            cae,
            grids,
            common,
            fit,
        } => cmd_sweep(&data, &cae, grids, &common, &fit),
        Command::Export {
            input,
            format,
            out,
            resolution,
            slice_axis,
        } => cmd_export(&input, format, &out, resolution as usize, slice_axis),
    }
}

fn resolve(common: &Common, fit: &FitFlags) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::resolve(common.config.as_deref(), common.seed, fit)
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Adds the payload files that sit next to mask and model headers.
fn with_payloads(paths: Vec<PathBuf>) -> Vec<PathBuf> {
    let mut out = Vec::with_capacity(paths.len() * 2);
    for p in paths {
        if p.extension().is_some_and(|e| e == "json") {
            for ext in ["raw", "bin"] {
                let sibling = p.with_extension(ext);
                if sibling.exists() && !out.contains(&sibling) {
                    out.push(sibling);
                }
            }
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn load_cae(path: &Path, rec: &mut Recorder) -> anyhow::Result<ShapeModel> {
    if !path.exists() {
        bail!(
            "missing CAE model {} (create it with `tps-partition cae-train`)",
            path.display()
        );
    }
    let mut cae =
        ShapeModel::load(path).with_context(|| format!("loading CAE model {}", path.display()))?;
    cae.freeze();
    rec.input(path)?;
    rec.input(&path.with_extension("bin"))?;
    Ok(cae)
}

fn load_data(dir: &Path) -> anyhow::Result<Vec<Phantom>> {
    data::read_phantoms(dir)
}

fn layout_grid(
    phantoms: &[Phantom],
    layout: Layout,
    axis: Axis,
) -> anyhow::Result<Arc<ControlGrid>> {
    let meta = phantoms[0].vertebra.meta();
    if phantoms.iter().any(|p| p.vertebra.meta() != meta) {
        bail!("all phantoms of a set must share one volume geometry");
    }
    Ok(Arc::new(volume_control_grid(
        meta, axis, layout.nx, layout.nz,
    )?))
}

fn print_report(
    label: &str,
    results: &[PartitionResult],
    phantoms: &[Phantom],
) -> anyhow::Result<()> {
    let r = evaluate(results, phantoms)?;
    println!(
        "{label}: Dice {:.4} ± {:.4}, Hausdorff {:.2} ± {:.2} mm",
        r.dice.mean, r.dice.std, r.hausdorff_mm.mean, r.hausdorff_mm.std
    );
    Ok(())
}

fn cmd_phantom(n: usize, params: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &FitFlags::default())?;
    if let Some(p) = params {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.phantom = serde_json::from_str::<PhantomParams>(&text)
            .with_context(|| format!("parsing {}", p.display()))?;
    }
    let mut rec = Recorder::new("phantom", &cfg);
    let set = rec.time("generate", || {
        phantom_batch_with(n, &cfg.phantom, &cfg.jitter, cfg.seed)
    })?;
    create_out(&common.out)?;
    let mut written = Vec::new();
    rec.time("write", || -> anyhow::Result<()> {
        for (i, p) in set.iter().enumerate() {
            p.check_invariants()?;
            written.extend(data::write_phantom(&data::phantom_dir(&common.out, i), p)?);
        }
        Ok(())
    })?;
    rec.finish(&common.out, &written)?;
    println!("wrote {n} phantoms to {}", common.out.display());
    Ok(())
}

fn cmd_cae_train(data_dir: &Path, epochs: Option<usize>, common: &Common) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &FitFlags::default())?;
    if let Some(e) = epochs {
        cfg.cae.train.epochs = e;
    }
    let phantoms = load_data(data_dir)?;
    // bodies softened with the fitting temperature look like the masks a fit produces
    let bodies = phantoms
        .iter()
        .map(|p| p.soft_body(cfg.fit.tau_mm))
        .collect::<Result<Vec<_>, _>>()?;
    let side = cfg.cae.side.unwrap_or(bodies[0].meta().shape[0] / 2);
    let spec = ShapeModel::default_spec(side, cfg.cae.latent, cfg.cae_init_seed())?;
    let mut rec = Recorder::new("cae-train", &cfg);
    rec.seed("cae/init", cfg.cae_init_seed());
    let cae = rec.time("train", || pretrain_cae_soft(&bodies, spec, &cfg.cae.train))?;
    create_out(&common.out)?;
    let path = common.out.join("cae.json");
    cae.save(&path)?;
    rec.finish(&common.out, &with_payloads(vec![path.clone()]))?;
    println!(
        "validation loss {:.5} (untrained {:.5}); model {}",
        cae.stats.validation_loss.unwrap_or(f64::NAN),
        cae.stats.untrained_validation_loss.unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_fit(
    data_dir: &Path,
    cae: Option<&Path>,
    supervised: bool,
    common: &Common,
    fit: &FitFlags,
) -> anyhow::Result<()> {
    let cfg = resolve(common, fit)?;
    let phantoms = load_data(data_dir)?;
    let mut rec = Recorder::new(
        if supervised {
            "fit --supervised"
        } else {
            "fit"
        },
        &cfg,
    );
    let grid = layout_grid(&phantoms, cfg.grid, cfg.fit.height_axis)?;
    let results = if supervised {
        rec.time("fit", || {
            phantoms
                .iter()
                .map(|p| fit_heights_supervised(&p.vertebra, &p.body, &grid, &cfg.fit))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        let path = cae
            .context("direct fitting needs a CAE model: pass --cae <file> (or use --supervised)")?;
        let model = load_cae(path, &mut rec)?;
        rec.time("fit", || {
            phantoms
                .iter()
                .map(|p| fit_heights_direct(&p.vertebra, &grid, &model, &cfg.fit))
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    let report = evaluate(&results, &phantoms)?.with_config(cfg.fit.for_grid(grid.nx(), grid.nz()));
    create_out(&common.out)?;
    let written = write_run(&common.out, &results, &report)?;
    rec.finish(&common.out, &with_payloads(written))?;
    print_report(&format!("fit {}", cfg.grid), &results, &phantoms)
}

fn cmd_train(data_dir: &Path, cae: &Path, common: &Common, fit: &FitFlags) -> anyhow::Result<()> {
    let cfg = resolve(common, fit)?;
    let mut rec = Recorder::new("train", &cfg);
    let model = load_cae(cae, &mut rec)?;
    let phantoms = load_data(data_dir)?;
    let grid = layout_grid(&phantoms, cfg.grid, cfg.fit.height_axis)?;
    let vertebrae: Vec<BinaryMask> = phantoms.iter().map(|p| p.vertebra.clone()).collect();
    let trained = rec.time("train", || {
        train_regressor(&vertebrae, &grid, &model, &cfg.regressor)
    })?;
    create_out(&common.out)?;
    let path = common.out.join("regressor.json");
    trained.model.save(&path)?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{e},{l:e}\n"));
    }
    let loss_path = common.out.join("regressor_loss.csv");
    write_atomic(&loss_path, losses.as_bytes())?;
    rec.finish(&common.out, &with_payloads(vec![path.clone(), loss_path]))?;
    println!(
        "trained {} epochs, loss {:.5} -> {:.5}; model {}",
        trained.epoch_losses.len(),
        trained.epoch_losses.first().copied().unwrap_or(f64::NAN),
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_eval(
    data_dir: &Path,
    regressor: &Path,
    common: &Common,
    fit: &FitFlags,
) -> anyhow::Result<()> {
    let cfg = resolve(common, fit)?;
    let mut rec = Recorder::new("eval", &cfg);
    if !regressor.exists() {
        bail!(
            "missing regressor model {} (create it with `tps-partition train`)",
            regressor.display()
        );
    }
    let model = RegressorModel::load(regressor)
        .with_context(|| format!("loading {}", regressor.display()))?;
    rec.input(regressor)?;
    let phantoms = load_data(data_dir)?;
    let grid = layout_grid(&phantoms, cfg.grid, cfg.fit.height_axis)?;
    let results = rec.time("predict", || {
        phantoms
            .iter()
            .map(|p| predict_partition(&model, &p.vertebra, &grid, &cfg.fit))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let report = evaluate(&results, &phantoms)?.with_config(cfg.fit.for_grid(grid.nx(), grid.nz()));
    create_out(&common.out)?;
    let written = write_run(&common.out, &results, &report)?;
    rec.finish(&common.out, &with_payloads(written))?;
    print_report("regressor", &results, &phantoms)
}

fn cmd_sweep(
    data_dir: &Path,
    cae: &Path,
    grids: Option<Vec<usize>>,
    common: &Common,
    fit: &FitFlags,
) -> anyhow::Result<()> {
    let mut cfg = resolve(common, fit)?;
    if let Some(g) = grids {
        cfg.fit.grid_sizes = g;
        cfg.fit.validate()?;
    }
    let layouts: Vec<Layout> = match fit.grid {
        Some(l) => vec![l],
        None => cfg
            .fit
            .grid_sizes
            .iter()
            .map(|&n| grid_dims(n).map(|(nx, nz)| Layout { nx, nz }))
            .collect::<Result<_, _>>()?,
    };
    if layouts.is_empty() {
        bail!("no grid sizes to sweep");
    }
    let mut rec = Recorder::new("sweep", &cfg);
    let model = load_cae(cae, &mut rec)?;
    let phantoms = load_data(data_dir)?;
    let mut runs: Vec<GridRun> = Vec::new();
    for l in &layouts {
        let run = rec.time(&format!("grid {l}"), || {
            run_grid(&phantoms, &model, l.nx, l.nz, &cfg.fit)
        })?;
        eprintln!("grid {l}: Dice {:.4}", run.report.dice.mean);
        runs.push(run);
    }
    create_out(&common.out)?;
    let written = write_sweep(&common.out, &runs)?;
    rec.finish(&common.out, &with_payloads(written))?;
    println!("{}", SweepTable::from_runs(&runs).to_csv()?.trim_end());
    Ok(())
}

fn cmd_export(
    input: &Path,
    format: ExportFormat,
    out: &Path,
    resolution: usize,
    slice_axis: Axis,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::default();
    let mut rec = Recorder::new("export", &cfg);
    rec.input(input)?;
    let (dir, written) = match format {
        ExportFormat::Obj => {
            let text = fs::read_to_string(input)
                .with_context(|| format!("reading {}", input.display()))?;
            let doc: SurfaceDoc = serde_json::from_str(&text)
                .with_context(|| format!("parsing surface {}", input.display()))?;
            let surface = doc.to_surface()?;
            let mut bytes = Vec::new();
            write_obj(&surface, resolution, doc.axis(), &mut bytes)?;
            write_atomic(out, &bytes)?;
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            (dir.to_path_buf(), vec![out.to_path_buf()])
        }
        ExportFormat::PgmSlices => {
            let field =
                read_field(input).with_context(|| format!("reading mask {}", input.display()))?;
            create_out(out)?;
            let n = field.meta().shape[slice_axis.index()];
            let mut written = Vec::with_capacity(n);
            for i in 0..n {
                let mut bytes = Vec::new();
                write_pgm_slice(&field, slice_axis, i, &mut bytes)?;
                let path = out.join(format!("slice_{i:03}.pgm"));
                write_atomic(&path, &bytes)?;
                written.push(path);
            }
            (out.to_path_buf(), written)
        }
    };
    let count = written.len();
    rec.finish(&dir, &written)?;
    println!("wrote {count} file(s)");
    Ok(())
}

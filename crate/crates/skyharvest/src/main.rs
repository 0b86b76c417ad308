use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use skyharvest::checkpoint;
use skyharvest::config::Experiment;
use skyharvest::env::Env;
use skyharvest::envlearn::{
    fit_channel, localize, LocalizationResult, PsoConfig, RadioConstants,
};
use skyharvest::error::{Error, Result};
use skyharvest::federation::{run_baseline, BaselineMode, FedRun, IterationMetrics};
use skyharvest::learner::{greedy_rollout, NetDims, Networks};
use skyharvest::metrics::{
    read_localization_csv, read_measurements_csv, read_metrics_csv, read_trajectory_json,
    write_localization_csv, write_measurements_csv, write_metrics_csv, write_trajectory_json,
};
use skyharvest::nnkernel::ParamSet;
use skyharvest::plot::{render_metrics_svg, render_trajectory_svg};
use skyharvest::seed;

#[derive(Parser)]
#[command(
    name = "skyharvest",
    version,
    about = "Multi-UAV IoT data-harvesting simulator and training workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Algo {
    /// Model-aided federated training, one learner per UAV.
    Fedqmix,
    /// Model-aided training with a single learner.
    #[value(name = "ma-qmix")]
    MaQmix,
    /// Train directly in the real environment.
    Qmix,
    /// Independent learners in the real environment, no mixer.
    Iql,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoints, and plots.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy rollout of a checkpoint in the ground-truth environment.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the channel and localize unknown devices from a measurement CSV.
    Localize {
        #[arg(long)]
        config: PathBuf,
        /// Measurement CSV (uav_id,t,ix,iy,altitude_m,device_id,gain_db).
        measurements: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render plots from the files in an output directory.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// Needed to re-render trajectory plots.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 2 } else { 3 });
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, algo, seed, out } => cmd_train(&config, algo, seed, out),
        Command::Eval { config, checkpoint, seed, out } => {
            cmd_eval(&config, &checkpoint, seed, out)
        }
        Command::Localize { config, measurements, seed, out } => {
            cmd_localize(&config, &measurements, seed, out)
        }
        Command::Plot { out, config } => cmd_plot(&out, config.as_deref()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Failures while reading user inputs are validation errors (exit 2)
/// even when the underlying cause is an unreadable file.
fn as_validation(e: Error) -> Error {
    match e {
        Error::Io { path, source } => {
            Error::Config(format!("cannot read {}: {source}", path.display()))
        }
        other => other,
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn cmd_train(config: &Path, algo: Algo, seed_arg: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let exp = Experiment::load(config).map_err(as_validation)?;
    let out_dir = out.unwrap_or_else(|| exp.config.out_dir.clone());
    ensure_dir(&out_dir)?;
    let mut setup = exp.fed_setup(seed_arg);

    let (metrics, title) = match algo {
        Algo::Fedqmix | Algo::MaQmix => {
            if algo == Algo::MaQmix {
                setup.fed_cfg.learners = 1;
                setup.fed_cfg.learner_seeds.truncate(1);
            }
            let ckpt_dir = out_dir.join("checkpoints");
            ensure_dir(&ckpt_dir)?;
            let mut run = FedRun::new(setup)?;
            let fp = checkpoint::fingerprint(
                run.dims(),
                exp.config.learner.mode,
                &run.global_params().layout,
            );
            let iters = exp.config.fed.real_world_episodes;
            for e in 0..iters {
                let row = run.outer_iteration()?;
                println!(
                    "iter {:>3}: real episodes {:>3}, collection ratio {:.4}",
                    row.iteration, row.real_world_episodes, row.collection_ratio
                );
                checkpoint::save(
                    ckpt_dir.join(format!("global_iter_{e:04}.bin")),
                    run.global_params(),
                    fp,
                )?;
            }
            checkpoint::save(out_dir.join("checkpoint_final.bin"), run.global_params(), fp)?;
            write_measurements_csv(
                out_dir.join("measurements.csv"),
                &run.measurements().records,
            )?;
            let map = exp.env_cfg.map.clone();
            let devices = exp.env_cfg.devices.clone();
            write_localization_csv(out_dir.join("localization.csv"), &run.localizations, |id| {
                devices
                    .iter()
                    .find(|d| d.id == id)
                    .map(|d| map.cell_center(d.cell))
            })?;
            let name = if algo == Algo::Fedqmix { "fedqmix" } else { "ma-qmix" };
            (run.metrics.clone(), format!("{name} on {}", config.display()))
        }
        Algo::Qmix | Algo::Iql => {
            let mode = if algo == Algo::Qmix {
                BaselineMode::QmixReal
            } else {
                BaselineMode::IqlReal
            };
            let episodes =
                exp.config.fed.episodes_per_iteration * exp.config.fed.real_world_episodes;
            let (params, metrics) = run_baseline(mode, setup, episodes)?;
            let dims = NetDims::of_env(&Env::new(exp.env_cfg.clone(), 0)?);
            let mut learner_cfg = exp.config.learner;
            learner_cfg.mode = match mode {
                BaselineMode::QmixReal => skyharvest::learner::LearnerMode::Qmix,
                _ => skyharvest::learner::LearnerMode::Iql,
            };
            let fp = checkpoint::fingerprint(&dims, learner_cfg.mode, &params.layout);
            checkpoint::save(out_dir.join("checkpoint_final.bin"), &params, fp)?;
            let name = if algo == Algo::Qmix { "qmix" } else { "iql" };
            (metrics, format!("{name} on {}", config.display()))
        }
    };

    write_metrics_csv(out_dir.join("metrics.csv"), &metrics)?;
    write_text(
        &out_dir.join("collection_ratio.svg"),
        &render_metrics_svg(&metrics, &title),
    )?;
    println!(
        "wrote {} metric rows to {}",
        metrics.len(),
        out_dir.join("metrics.csv").display()
    );
    Ok(())
}

fn load_policy(exp: &Experiment, ckpt: &Path) -> Result<(Networks, NetDims)> {
    let env = Env::new(exp.env_cfg.clone(), 0)?;
    let dims = NetDims::of_env(&env);
    let mut rng = seed::rng(0, "eval-skeleton", 0);
    let mut nets = Networks::init(&exp.config.learner, &dims, &mut rng);
    let layout = nets.flatten().layout;
    let fp = checkpoint::fingerprint(&dims, exp.config.learner.mode, &layout);
    let params = checkpoint::load(ckpt, fp).map_err(as_validation)?;
    nets.load(&params)?;
    Ok((nets, dims))
}

fn cmd_eval(
    config: &Path,
    ckpt: &Path,
    seed_arg: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let exp = Experiment::load(config).map_err(as_validation)?;
    let out_dir = out.unwrap_or_else(|| exp.config.out_dir.join("eval"));
    ensure_dir(&out_dir)?;
    let (nets, _) = load_policy(&exp, ckpt)?;
    let eval_seed = seed_arg.unwrap_or(exp.config.seed);
    let mut env = Env::new(exp.env_cfg.clone(), seed::derive(eval_seed, "eval-env", 0))?;
    let outcome = greedy_rollout(&nets.agent, &mut env);

    write_trajectory_json(out_dir.join("trajectory.json"), &outcome.trajectory)?;
    let estimates = find_localization_report(ckpt)
        .map(read_localization_csv)
        .transpose()?
        .unwrap_or_default();
    let svg = render_trajectory_svg(
        &exp.env_cfg.map,
        &exp.env_cfg.devices,
        &outcome.trajectory,
        &estimates,
    );
    write_text(&out_dir.join("trajectory.svg"), &svg)?;
    println!(
        "collection ratio {:.4} over {} steps ({} data units)",
        outcome.collection_ratio, outcome.steps, outcome.collected
    );
    println!("trajectory written to {}", out_dir.join("trajectory.json").display());
    Ok(())
}

/// The train command leaves `localization.csv` next to (or one level
/// above) its checkpoints; pick it up when present.
fn find_localization_report(ckpt: &Path) -> Option<PathBuf> {
    let mut candidates = Vec::new();
    if let Some(dir) = ckpt.parent() {
        candidates.push(dir.join("localization.csv"));
        if let Some(up) = dir.parent() {
            candidates.push(up.join("localization.csv"));
        }
    }
    candidates.into_iter().find(|p| p.is_file())
}

fn cmd_localize(
    config: &Path,
    measurements: &Path,
    seed_arg: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let exp = Experiment::load(config).map_err(as_validation)?;
    let out_dir = out.unwrap_or_else(|| exp.config.out_dir.clone());
    ensure_dir(&out_dir)?;
    let records = read_measurements_csv(measurements).map_err(as_validation)?;
    if records.is_empty() {
        return Err(Error::EnvLearn(format!(
            "{}: no measurements",
            measurements.display()
        )));
    }
    let mut set = skyharvest::envlearn::MeasurementSet::new();
    set.extend(records);
    let master = seed_arg.unwrap_or(exp.config.seed);
    let learned = fit_channel(
        &set,
        &exp.env_cfg.devices,
        &exp.env_cfg.map,
        RadioConstants::from(&exp.config.channel),
        &exp.config.fit,
    )?;

    let radio = RadioConstants::from(&exp.config.channel);
    let mut results = Vec::new();
    for dev in exp.env_cfg.devices.iter().filter(|d| !d.anchor) {
        let device_records =
            set.for_device_min_snr(dev.id, &radio, exp.config.min_localization_snr);
        let pso = PsoConfig {
            seed: seed::derive(master, "pso", dev.id as u64),
            ..exp.config.pso
        };
        match localize(
            dev.id,
            &device_records,
            &learned,
            &exp.env_cfg.map,
            &pso,
            exp.config.min_device_measurements,
            None,
        ) {
            Ok(r) => results.push(r),
            Err(_) => {
                // Not enough data: keep a flagged uniform guess so the
                // report covers every unknown device.
                use rand::Rng;
                let mut rng = seed::rng(master, "loc-guess", dev.id as u64);
                results.push(LocalizationResult {
                    device_id: dev.id,
                    x_m: rng.gen_range(0.0..exp.env_cfg.map.width_m()),
                    y_m: rng.gen_range(0.0..exp.env_cfg.map.height_m()),
                    nll: f64::NAN,
                    n_measurements: device_records.len(),
                    low_confidence: true,
                });
            }
        }
    }
    let report = out_dir.join("localization_report.csv");
    let map = exp.env_cfg.map.clone();
    let devices = exp.env_cfg.devices.clone();
    write_localization_csv(&report, &results, |id| {
        devices.iter().find(|d| d.id == id).map(|d| map.cell_center(d.cell))
    })?;
    for r in &results {
        println!(
            "device {:>2}: ({:.1}, {:.1}) m, nll {:.3}, {} measurements{}",
            r.device_id,
            r.x_m,
            r.y_m,
            r.nll,
            r.n_measurements,
            if r.low_confidence { " (low confidence)" } else { "" }
        );
    }
    println!("report written to {}", report.display());
    Ok(())
}

fn cmd_plot(out_dir: &Path, config: Option<&Path>) -> Result<()> {
    let mut plotted = false;
    let metrics_path = out_dir.join("metrics.csv");
    if metrics_path.is_file() {
        let rows: Vec<IterationMetrics> = read_metrics_csv(&metrics_path)?;
        write_text(
            &out_dir.join("collection_ratio.svg"),
            &render_metrics_svg(&rows, &format!("metrics in {}", out_dir.display())),
        )?;
        println!("re-rendered {}", out_dir.join("collection_ratio.svg").display());
        plotted = true;
    }
    // Trajectory replots need the map, hence the config.
    let traj_path = ["trajectory.json", "eval/trajectory.json"]
        .iter()
        .map(|p| out_dir.join(p))
        .find(|p| p.is_file());
    if let (Some(traj_path), Some(config)) = (traj_path, config) {
        let exp = Experiment::load(config)?;
        let trajectory = read_trajectory_json(&traj_path)?;
        let estimates = [
            out_dir.join("localization.csv"),
            out_dir.join("localization_report.csv"),
        ]
        .into_iter()
        .find(|p| p.is_file())
        .map(read_localization_csv)
        .transpose()?
        .unwrap_or_default();
        let svg = render_trajectory_svg(
            &exp.env_cfg.map,
            &exp.env_cfg.devices,
            &trajectory,
            &estimates,
        );
        let svg_path = traj_path.with_extension("svg");
        write_text(&svg_path, &svg)?;
        println!("re-rendered {}", svg_path.display());
        plotted = true;
    }
    if !plotted {
        return Err(Error::Runtime(format!(
            "nothing to plot in {}",
            out_dir.display()
        )));
    }
    Ok(())
}

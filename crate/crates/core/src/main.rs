use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use semnav::config::TrainConfig;
use semnav::data::random_walk_episodes;
use semnav::eval::{
    baseline_non_learning, baseline_random_walk, evaluate_learned, evaluate_localization, export_summary, summary_table, NavigationReport, SavedReport,
    SummaryRow,
};
use semnav::mapper::{write_argmax_csv, write_map_snapshot, MapperParams, MapperRunner};
use semnav::nav::{sample_nav_episodes, EpisodeRecord};
use semnav::navpolicy::PolicyParams;
use semnav::trainer::{ablation_matrix, build_pool, dagger_train_policy, localization_data, pretrain_mapper, write_csv};
use worldsim::{build_graph, generate_scene, EnvGraph, Scene, SceneParams};

#[derive(Parser)]
#[command(name = "semnav", version, about = "Semantic mapping and target-driven navigation in generated grid worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test scenes of a config as JSON files.
    GenScenes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a mapper with the localization loss.
    TrainMapper {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/mapper")]
        out: PathBuf,
    },
    /// Train a policy with DAgger on top of a pretrained mapper.
    TrainPolicy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mapper: PathBuf,
        #[arg(long, default_value = "runs/policy")]
        out: PathBuf,
    },
    /// Train and evaluate every modality / fine-tuning / egocentric-input variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Localization APE of a mapper on random walks in a scene directory.
    EvalLoc {
        #[arg(long)]
        mapper: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_parser = ["5", "20"])]
        len: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Camera, noise and `r_env` settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for final map snapshots (binary plus argmax CSV).
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Navigation success rate and path-length ratio of a trained agent.
    EvalNav {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        mapper: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-episode pose sequences.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Navigation metrics of a non-learned baseline.
    Baseline {
        kind: BaselineKind,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize saved evaluation reports into one CSV and a text table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
    Nonlearning,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn scene_params(cfg: &TrainConfig, size: usize) -> SceneParams {
    SceneParams {
        width: size,
        depth: size,
        ..cfg.scene.clone()
    }
}

fn load_scene_dir(dir: &Path, r_env: usize) -> Result<Vec<EnvGraph>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading scene directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no scene files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let scene = Scene::load(p).with_context(|| format!("loading scene {}", p.display()))?;
            Ok(build_graph(&scene, r_env)?)
        })
        .collect()
}

fn save_report(path: &Path, report: &SavedReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn print_nav(report: &NavigationReport) {
    println!(
        "{}: {} episodes, success {:.1}%, path-length ratio {:.3}",
        report.variant,
        report.episodes(),
        report.success_rate(),
        report.mean_path_ratio()
    );
}

fn write_trajectories(dir: &Path, records: &[EpisodeRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, r) in records.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("episode_{:04}.csv", k)))?;
        w.write_record(["t", "x", "z", "orientation"])?;
        for (t, p) in r.trajectory.iter().enumerate() {
            w.write_record([t.to_string(), p.x.to_string(), p.z.to_string(), p.orientation.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenScenes { config, out } => {
            let cfg = load_config(config.as_deref())?;
            for (split, set) in [("train", &cfg.train_scenes), ("test", &cfg.test_scenes)] {
                let dir = out.join(split);
                fs::create_dir_all(&dir)?;
                for &seed in &set.seeds {
                    let scene = generate_scene(seed, &scene_params(&cfg, set.size_for(seed)))?;
                    scene.save(&dir.join(format!("scene_{:06}.json", seed)))?;
                }
                println!("wrote {} {} scenes to {}", set.seeds.len(), split, dir.display());
            }
        }
        Command::TrainMapper { config, out } => {
            let cfg = load_config(Some(&config))?;
            fs::create_dir_all(&out)?;
            let train = cfg.train_scenes.build(&cfg.scene, cfg.r_env)?;
            let test = cfg.test_scenes.build(&cfg.scene, cfg.r_env)?;
            let data = localization_data(&cfg, &cfg.projection, &train, &test)?;
            let result = pretrain_mapper(&cfg, &cfg.projection, &data, cfg.r_env, cfg.scene.cell_mm)?;
            result.params.save(&out.join("mapper.ndgc"))?;
            write_csv(fs::File::create(out.join("mapper_log.csv"))?, &result.log)?;
            for r in &result.reports {
                println!(
                    "held-out APE (length {}): {:.1} mm, uniform baseline {:.1} mm",
                    r.episode_len,
                    r.mean_ape(),
                    r.mean_baseline_ape()
                );
                save_report(&out.join(format!("loc_len{}.json", r.episode_len)), &SavedReport::Localization(r.clone()))?;
            }
        }
        Command::TrainPolicy { config, mapper, out } => {
            let cfg = load_config(Some(&config))?;
            fs::create_dir_all(&out)?;
            let mapper = MapperParams::load(&mapper)?;
            let train = cfg.train_scenes.build(&cfg.scene, cfg.r_env)?;
            let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, cfg.seed)?;
            let result = dagger_train_policy(&cfg, &train, &pool, &mapper)?;
            result.policy.save(&out.join("policy.ndgc"))?;
            result.mapper.save(&out.join("mapper_finetuned.ndgc"))?;
            write_csv(fs::File::create(out.join("policy_log.csv"))?, &result.log)?;
            println!("trained {} iterations; checkpoints in {}", result.log.len(), out.display());
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(Some(&config))?;
            fs::create_dir_all(&out)?;
            let variants = ablation_matrix(&cfg, &out)?;
            let rows: Vec<SummaryRow> = variants
                .iter()
                .map(|v| SummaryRow::from_report(&SavedReport::Navigation(v.report.clone())))
                .collect();
            export_summary(fs::File::create(out.join("ablation.csv"))?, &rows)?;
            print!("{}", summary_table(&rows));
        }
        Command::EvalLoc {
            mapper,
            scenes,
            len,
            episodes,
            seed,
            config,
            out,
            snapshots,
        } => {
            let cfg = load_config(config.as_deref())?;
            let params = MapperParams::load(&mapper)?;
            let graphs = load_scene_dir(&scenes, cfg.r_env)?;
            let len: usize = len.parse()?;
            let eps = random_walk_episodes(&graphs, episodes, len, seed, &params.config, &cfg.camera, &cfg.noise)?;
            let report = evaluate_localization(&params, &eps, cfg.r_env, cfg.scene.cell_mm)?;
            println!(
                "{} length {}: APE {:.1} mm over {} episodes (uniform belief {:.1} mm)",
                report.variant,
                len,
                report.mean_ape(),
                eps.len(),
                report.mean_baseline_ape()
            );
            if let Some(dir) = snapshots {
                fs::create_dir_all(&dir)?;
                for (k, ep) in eps.iter().enumerate() {
                    let mut runner = MapperRunner::new(&params);
                    let mut last = None;
                    for f in &ep.frames {
                        last = Some(runner.observe(f)?);
                    }
                    if let Some(snap) = last {
                        write_map_snapshot(&dir.join(format!("map_{:04}.smap", k)), &snap.features)?;
                        write_argmax_csv(fs::File::create(dir.join(format!("map_{:04}.csv", k)))?, &snap.features)?;
                    }
                }
            }
            if let Some(path) = out {
                save_report(&path, &SavedReport::Localization(report))?;
            }
        }
        Command::EvalNav {
            policy,
            mapper,
            scenes,
            episodes,
            seed,
            config,
            out,
            trajectories,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mapper = MapperParams::load(&mapper)?;
            let policy = PolicyParams::load(&policy)?;
            let graphs = load_scene_dir(&scenes, cfg.r_env)?;
            let (eps, skipped) = sample_nav_episodes(&graphs, &cfg.scene.target_classes, episodes, seed, &cfg.eval);
            if skipped > 0 {
                eprintln!("skipped {} draws without a valid start", skipped);
            }
            let report = evaluate_learned(&mapper, &policy, &graphs, &eps, &cfg.camera, &cfg.noise, &cfg.eval)?;
            print_nav(&report);
            if let Some(dir) = trajectories {
                write_trajectories(&dir, &report.records)?;
            }
            if let Some(path) = out {
                save_report(&path, &SavedReport::Navigation(report))?;
            }
        }
        Command::Baseline {
            kind,
            scenes,
            episodes,
            seed,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let graphs = load_scene_dir(&scenes, cfg.r_env)?;
            let (eps, skipped) = sample_nav_episodes(&graphs, &cfg.scene.target_classes, episodes, seed, &cfg.eval);
            if skipped > 0 {
                eprintln!("skipped {} draws without a valid start", skipped);
            }
            let report = match kind {
                BaselineKind::Random => baseline_random_walk(&graphs, &eps, &cfg.camera, &cfg.noise, &cfg.eval)?,
                BaselineKind::Nonlearning => baseline_non_learning(&graphs, &eps, &cfg.camera, &cfg.noise, &cfg.eval)?,
            };
            print_nav(&report);
            if let Some(path) = out {
                save_report(&path, &SavedReport::Navigation(report))?;
            }
        }
        Command::Report { input, out } => {
            let mut paths: Vec<PathBuf> = fs::read_dir(&input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            paths.sort();
            let mut rows = Vec::new();
            for p in &paths {
                let text = fs::read_to_string(p)?;
                match serde_json::from_str::<SavedReport>(&text) {
                    Ok(r) => rows.push(SummaryRow::from_report(&r)),
                    Err(_) => eprintln!("skipping {} (not an evaluation report)", p.display()),
                }
            }
            export_summary(fs::File::create(&out)?, &rows)?;
            print!("{}", summary_table(&rows));
        }
    }
    Ok(())
}

//! Localization and navigation metrics, baselines and report files.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use worldsim::seed::rng_for;
use worldsim::{CameraConfig, EnvGraph, NoiseConfig};

use crate::config::EvalConfig;
use crate::data::LocEpisode;
use crate::error::{Error, Result};
use crate::mapper::{pose_to_world, relative_pose, MapperParams, MapperRunner, ProjectionConfig};
use crate::nav::{run_episodes, Controller, DetectThenPlan, EpisodeRecord, Expert, LearnedAgent, NavEpisode, RandomWalk};
use crate::navpolicy::PolicyParams;

/// Mean 2D Euclidean distance between paired positions (mm).
pub fn compute_ape(predicted: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted poses for {} ground-truth poses",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predicted.iter().zip(truth).map(|(p, t)| (p.0 - t.0).hypot(p.1 - t.1)).sum();
    Ok(total / predicted.len() as f64)
}

/// Expected position error of a uniform belief over the map for an agent at
/// `truth`: the mean distance from `truth` to every map cell centre.
pub fn uniform_position_error(truth: (f64, f64), cfg: &ProjectionConfig) -> f64 {
    let mut total = 0.0;
    for i in 0..cfg.u {
        for j in 0..cfg.v {
            let (x, z, _) = pose_to_world(i, j, 0, cfg);
            total += (x - truth.0).hypot(z - truth.1);
        }
    }
    total / (cfg.u * cfg.v) as f64
}

/// Ground-truth positions of an episode relative to its first pose (mm).
pub fn relative_positions(ep: &LocEpisode, r_env: usize, cell_mm: f64) -> Vec<(f64, f64)> {
    let poses = &ep.episode.poses;
    poses
        .iter()
        .map(|&p| {
            let (a, b, _) = relative_pose(poses[0], p, r_env, cell_mm);
            (a, b)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub variant: String,
    pub episode_len: usize,
    pub episode_ape: Vec<f64>,
    pub baseline_ape: Vec<f64>,
}

impl LocalizationReport {
    pub fn mean_ape(&self) -> f64 {
        mean(&self.episode_ape)
    }

    pub fn mean_baseline_ape(&self) -> f64 {
        mean(&self.baseline_ape)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs the mapper over each episode and scores the belief argmax of frames
/// `1..T` against the ground truth. The first frame defines the origin and is
/// not scored.
pub fn evaluate_localization(params: &MapperParams, episodes: &[LocEpisode], r_env: usize, cell_mm: f64) -> Result<LocalizationReport> {
    let cfg = &params.config;
    let mut episode_ape = Vec::with_capacity(episodes.len());
    let mut baseline_ape = Vec::with_capacity(episodes.len());
    let mut len = 0;
    for ep in episodes {
        len = len.max(ep.episode.len());
        let truth = relative_positions(ep, r_env, cell_mm);
        let mut runner = MapperRunner::new(params);
        let mut predicted = Vec::with_capacity(ep.frames.len());
        for frame in &ep.frames {
            let snap = runner.observe(frame)?;
            let (i, j, rho) = cfg.pose_from_index(snap.belief.argmax());
            let (x, z, _) = pose_to_world(i, j, rho, cfg);
            predicted.push((x, z));
        }
        episode_ape.push(compute_ape(&predicted[1..], &truth[1..])?);
        baseline_ape.push(mean(&truth[1..].iter().map(|&t| uniform_position_error(t, cfg)).collect::<Vec<_>>()));
    }
    Ok(LocalizationReport {
        variant: cfg.modalities.tag(),
        episode_len: len,
        episode_ape,
        baseline_ape,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavigationReport {
    pub variant: String,
    pub records: Vec<EpisodeRecord>,
}

impl NavigationReport {
    pub fn episodes(&self) -> usize {
        self.records.len()
    }

    /// Percentage of successful episodes.
    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        100.0 * self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }

    /// Mean path-length ratio over successful episodes (NaN when none succeed).
    pub fn mean_path_ratio(&self) -> f64 {
        let ratios: Vec<f64> = self.records.iter().filter(|r| r.success).map(|r| r.path_ratio()).collect();
        if ratios.is_empty() {
            f64::NAN
        } else {
            mean(&ratios)
        }
    }
}

pub fn evaluate_navigation(
    variant: &str,
    graphs: &[EnvGraph],
    episodes: &[NavEpisode],
    controller: &mut dyn Controller,
    camera: &CameraConfig,
    noise: &NoiseConfig,
    eval: &EvalConfig,
) -> Result<NavigationReport> {
    Ok(NavigationReport {
        variant: variant.to_string(),
        records: run_episodes(graphs, episodes, controller, camera, noise, eval)?,
    })
}

pub fn evaluate_learned(
    mapper: &MapperParams,
    policy: &PolicyParams,
    graphs: &[EnvGraph],
    episodes: &[NavEpisode],
    camera: &CameraConfig,
    noise: &NoiseConfig,
    eval: &EvalConfig,
) -> Result<NavigationReport> {
    let mut agent = LearnedAgent::new(mapper, policy);
    evaluate_navigation(&mapper.config.modalities.tag(), graphs, episodes, &mut agent, camera, noise, eval)
}

pub fn baseline_random_walk(
    graphs: &[EnvGraph],
    episodes: &[NavEpisode],
    camera: &CameraConfig,
    noise: &NoiseConfig,
    eval: &EvalConfig,
) -> Result<NavigationReport> {
    evaluate_navigation("random-walk", graphs, episodes, &mut RandomWalk, camera, noise, eval)
}

pub fn baseline_non_learning(
    graphs: &[EnvGraph],
    episodes: &[NavEpisode],
    camera: &CameraConfig,
    noise: &NoiseConfig,
    eval: &EvalConfig,
) -> Result<NavigationReport> {
    evaluate_navigation("non-learning", graphs, episodes, &mut DetectThenPlan::default(), camera, noise, eval)
}

pub fn expert_replay(graphs: &[EnvGraph], episodes: &[NavEpisode], camera: &CameraConfig, noise: &NoiseConfig, eval: &EvalConfig) -> Result<NavigationReport> {
    evaluate_navigation("expert", graphs, episodes, &mut Expert, camera, noise, eval)
}

/// Percentile bootstrap interval of the mean (95%, `resamples` draws).
pub fn bootstrap_ci(xs: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    if xs.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = rng_for(seed, 0xb007);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..xs.len()).map(|_| xs[rng.gen_range(0..xs.len())]).sum::<f64>() / xs.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Some((at(0.025), at(0.975)))
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_SEED: u64 = 0x5eed;

/// A saved evaluation result, as written by the evaluation commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SavedReport {
    Localization(LocalizationReport),
    Navigation(NavigationReport),
}

/// One summary line per evaluated variant; metrics that do not apply are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub episodes: usize,
    pub episode_len: Option<usize>,
    pub ape_mm: Option<f64>,
    pub ape_ci_low: Option<f64>,
    pub ape_ci_high: Option<f64>,
    pub baseline_ape_mm: Option<f64>,
    pub success_rate: Option<f64>,
    pub success_ci_low: Option<f64>,
    pub success_ci_high: Option<f64>,
    pub path_ratio: Option<f64>,
    pub ratio_ci_low: Option<f64>,
    pub ratio_ci_high: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "variant",
    "episodes",
    "episode_len",
    "ape_mm",
    "ape_ci_low",
    "ape_ci_high",
    "baseline_ape_mm",
    "success_rate",
    "success_ci_low",
    "success_ci_high",
    "path_ratio",
    "ratio_ci_low",
    "ratio_ci_high",
];

impl SummaryRow {
    fn empty(variant: String, episodes: usize) -> SummaryRow {
        SummaryRow {
            variant,
            episodes,
            episode_len: None,
            ape_mm: None,
            ape_ci_low: None,
            ape_ci_high: None,
            baseline_ape_mm: None,
            success_rate: None,
            success_ci_low: None,
            success_ci_high: None,
            path_ratio: None,
            ratio_ci_low: None,
            ratio_ci_high: None,
        }
    }

    pub fn from_report(report: &SavedReport) -> SummaryRow {
        match report {
            SavedReport::Localization(r) => {
                let ci = bootstrap_ci(&r.episode_ape, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
                SummaryRow {
                    episode_len: Some(r.episode_len),
                    ape_mm: Some(r.mean_ape()),
                    ape_ci_low: ci.map(|c| c.0),
                    ape_ci_high: ci.map(|c| c.1),
                    baseline_ape_mm: Some(r.mean_baseline_ape()),
                    ..SummaryRow::empty(r.variant.clone(), r.episode_ape.len())
                }
            }
            SavedReport::Navigation(r) => {
                let wins: Vec<f64> = r.records.iter().map(|e| if e.success { 100.0 } else { 0.0 }).collect();
                let ratios: Vec<f64> = r.records.iter().filter(|e| e.success).map(|e| e.path_ratio()).collect();
                let sci = bootstrap_ci(&wins, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
                let rci = bootstrap_ci(&ratios, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
                SummaryRow {
                    success_rate: Some(r.success_rate()),
                    success_ci_low: sci.map(|c| c.0),
                    success_ci_high: sci.map(|c| c.1),
                    path_ratio: (!ratios.is_empty()).then(|| mean(&ratios)),
                    ratio_ci_low: rci.map(|c| c.0),
                    ratio_ci_high: rci.map(|c| c.1),
                    ..SummaryRow::empty(r.variant.clone(), r.records.len())
                }
            }
        }
    }
}

/// Summary CSV with a fixed column order; always writes the header.
pub fn export_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn parse_summary<R: Read>(r: R) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != SUMMARY_COLUMNS {
        return Err(Error::Format(format!("unexpected summary columns {:?}", header)));
    }
    rd.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Fixed-width text table of the summary rows.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let f = |x: Option<f64>, p: usize| x.map_or("-".to_string(), |v| format!("{:.*}", p, v));
    let mut out = format!(
        "{:<24} {:>8} {:>5} {:>22} {:>10} {:>22} {:>18}\n",
        "variant", "episodes", "len", "APE mm [95% CI]", "uniform", "success % [95% CI]", "ratio [95% CI]"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>8} {:>5} {:>22} {:>10} {:>22} {:>18}\n",
            r.variant,
            r.episodes,
            r.episode_len.map_or("-".to_string(), |l| l.to_string()),
            format!("{} [{}, {}]", f(r.ape_mm, 0), f(r.ape_ci_low, 0), f(r.ape_ci_high, 0)),
            f(r.baseline_ape_mm, 0),
            format!("{} [{}, {}]", f(r.success_rate, 1), f(r.success_ci_low, 1), f(r.success_ci_high, 1)),
            format!("{} [{}, {}]", f(r.path_ratio, 2), f(r.ratio_ci_low, 2), f(r.ratio_ci_high, 2)),
        ));
    }
    out
}

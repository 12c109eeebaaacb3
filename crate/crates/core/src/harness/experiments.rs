//! Experiment drivers: plain sampling, the guidance-scale sweep, the
//! ablation grid, the two-step comparison and the diversity study. Each
//! returns its rows and, via the `*_to_dir` wrappers, writes CSVs, images
//! and a manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::baselines::{iterative_transfer, moment_match_transfer};
use crate::denoisers::{train_affine, AffineDenoiser, DataLaw, Denoiser, GaussianData};
use crate::diffusion::{sample, NoiseSchedule, SampleRun, SamplerOptions};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceContext, GuidanceMode, GuidancePair};
use crate::metrics::{evaluate, pca_embed, style_loss};
use crate::numerics::{Image, RngStream};
use crate::style::{
    equal_weights, extract, feature_variance, Distance, PyramidConfig, StyleFeatures,
};

use super::config::{write_manifest, DataKind, ExperimentConfig};
use super::ppm::{read_ppm, write_ppm};
use super::templates::{render_template, style_population};

/// Everything a run needs, materialized from an [`ExperimentConfig`].
pub struct World {
    pub sched: NoiseSchedule,
    pub model: Arc<dyn Denoiser>,
    pub law: Arc<dyn DataLaw>,
    pub reference: Image,
    /// Equal-weight features of the reference, for assessment.
    pub reference_features: StyleFeatures,
    pub pyramid: PyramidConfig,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<World> {
        cfg.validate()?;
        let sched = cfg.schedule.build()?;
        let shape = cfg.image;
        let gaussian = || -> Result<GaussianData> {
            GaussianData::new(
                render_template(&cfg.data.template, shape, cfg.data.seed)?,
                cfg.data.sigma0,
            )
        };
        let (model, law): (Arc<dyn Denoiser>, Arc<dyn DataLaw>) = match cfg.data.kind {
            DataKind::Gaussian => {
                let g = gaussian()?;
                (Arc::new(g.clone()), Arc::new(g))
            }
            DataKind::Gmm => {
                let g = style_population(shape, cfg.data.seed, cfg.data.sigma0)?;
                (Arc::new(g.clone()), Arc::new(g))
            }
            DataKind::Affine => {
                let path = cfg.data.model_path.as_ref().expect("validated");
                let m = AffineDenoiser::load(path)?;
                if m.shape() != shape || m.steps() != sched.steps() {
                    return Err(Error::Config(format!(
                        "model {} does not match the configured image shape or step count",
                        path.display()
                    )));
                }
                (Arc::new(m), Arc::new(gaussian()?))
            }
        };
        let reference = if cfg.style.is_file() {
            read_ppm(Path::new(&cfg.style.source))?
        } else {
            render_template(&cfg.style.source, shape, cfg.style.seed)?
        };
        if reference.shape() != shape {
            return Err(Error::Config(format!(
                "style reference is {:?}, images are {:?}",
                reference.shape(),
                shape
            )));
        }
        let reference_features =
            extract(&reference, &cfg.pyramid, &equal_weights(cfg.pyramid.levels))?;
        Ok(World {
            sched,
            model,
            law,
            reference,
            reference_features,
            pyramid: cfg.pyramid,
        })
    }

    /// Scores `images` against the reference under the data law.
    pub fn score(&self, images: &[Image]) -> Result<(f64, f64, Option<f64>)> {
        let r = evaluate(
            images,
            Some(&self.reference_features),
            self.law.as_ref(),
            &self.pyramid,
        )?;
        Ok((
            r.style_loss.unwrap_or(f64::NAN),
            r.content_score,
            r.batch_diversity,
        ))
    }
}

/// One batch of `cfg.batch_size` chains. Chain noise comes from stream 0 of
/// `seed` and the synonymous mixing draws from stream 1, so runs that differ
/// only in guidance share their noise.
pub fn run_batch(
    world: &World,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SampleRun> {
    let noise = RngStream::new(seed, 0);
    let mix = RngStream::new(seed, 1);
    let opts = SamplerOptions {
        record_telemetry: true,
        guide_from_step: cfg.guide_from_step,
    };
    let model = world.model.as_ref();
    match guidance.mode {
        GuidanceMode::None => sample(model, &world.sched, cfg.batch_size, None, &noise, &opts),
        GuidanceMode::Supervised => {
            let mut ctx = GuidanceContext::supervised(
                guidance.clone(),
                world.pyramid,
                &world.reference,
                mix,
            )?;
            sample(
                model,
                &world.sched,
                cfg.batch_size,
                Some(&mut ctx),
                &noise,
                &opts,
            )
        }
        _ => {
            let mut ctx = GuidanceContext::new(guidance.clone(), world.pyramid, None, mix)?;
            sample(
                model,
                &world.sched,
                cfg.batch_size,
                Some(&mut ctx),
                &noise,
                &opts,
            )
        }
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let err = |e: csv::Error| Error::Parse(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub s0: f64,
    pub style_loss: f64,
    pub content_score: f64,
    pub batch_diversity: Option<f64>,
}

const METRICS_HEADER: &[&str] = &[
    "run_id",
    "mode",
    "s0",
    "style_loss",
    "content_score",
    "batch_diversity",
];

fn metrics_records(rows: &[MetricsRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.run_id.clone(),
                r.mode.clone(),
                fmt(r.s0),
                fmt(r.style_loss),
                fmt(r.content_score),
                fmt_opt(r.batch_diversity),
            ]
        })
        .collect()
}

/// Samples one guided batch per seed and writes images, `metrics.csv`,
/// `telemetry.csv` and the manifest. A diverged chain aborts the run.
pub fn run_sample_to_dir(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let world = World::build(cfg)?;
    let dir = prepare_dir(cfg)?;
    let mut rows = Vec::new();
    let mut telemetry = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_batch(&world, cfg, &cfg.guidance, seed)?;
        let run_id = format!("s{seed}");
        for (b, img) in run.images.iter().enumerate() {
            let name = format!("{run_id}_b{b}.ppm");
            write_ppm(img, &dir.join(&name))?;
            artifacts.push(name);
        }
        let (sl, cs, div) = world.score(&run.images)?;
        rows.push(MetricsRow {
            run_id: run_id.clone(),
            mode: cfg.guidance.mode.to_string(),
            s0: if cfg.guidance.mode == GuidanceMode::None {
                0.0
            } else {
                cfg.guidance.s0
            },
            style_loss: sl,
            content_score: cs,
            batch_diversity: div,
        });
        for t in &run.telemetry {
            telemetry.push(vec![
                run_id.clone(),
                t.step.to_string(),
                fmt(t.mean_distance),
                fmt(t.grad_norm),
                fmt(t.scale),
            ]);
        }
    }
    write_csv(
        &dir.join("metrics.csv"),
        METRICS_HEADER,
        &metrics_records(&rows),
    )?;
    write_csv(
        &dir.join("telemetry.csv"),
        &["run_id", "step", "mean_distance", "grad_norm", "scale"],
        &telemetry,
    )?;
    artifacts.push("metrics.csv".into());
    artifacts.push("telemetry.csv".into());
    write_manifest(&dir, "sample", cfg, &artifacts)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub s0: f64,
    pub seed: u64,
    pub style_loss: f64,
    pub content_score: f64,
    pub diverged: bool,
}

/// Scores one guided batch, turning a divergence into a flagged row.
fn guided_point(
    world: &World,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<SweepRow> {
    match run_batch(world, cfg, guidance, seed) {
        Ok(run) => {
            let (sl, cs, _) = world.score(&run.images)?;
            Ok(SweepRow {
                s0: guidance.s0,
                seed,
                style_loss: sl,
                content_score: cs,
                diverged: false,
            })
        }
        Err(e) if e.is_divergence() => Ok(SweepRow {
            s0: guidance.s0,
            seed,
            style_loss: f64::NAN,
            content_score: f64::NAN,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

fn grid_points(
    world: &World,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let points: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&k| (s, k)))
        .collect();
    points
        .par_iter()
        .map(|&(s0, seed)| {
            let g = GuidanceConfig {
                s0,
                ..guidance.clone()
            };
            guided_point(world, cfg, &g, seed)
        })
        .collect()
}

/// Supervised guidance over every `(s0, seed)` pair.
pub fn run_sweep(cfg: &ExperimentConfig, grid: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("s0 grid is empty".into()));
    }
    let world = World::build(cfg)?;
    let guidance = GuidanceConfig {
        mode: GuidanceMode::Supervised,
        ..cfg.guidance.clone()
    };
    grid_points(&world, cfg, &guidance, grid, seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub s0: f64,
    pub style_loss: f64,
    pub content_score: f64,
    pub converged: usize,
    pub diverged: usize,
}

/// Per-`s0` means over the non-diverged seeds, in grid order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut out: Vec<SweepSummary> = Vec::new();
    for r in rows {
        let idx = match out.iter().position(|s| s.s0 == r.s0) {
            Some(i) => i,
            None => {
                out.push(SweepSummary {
                    s0: r.s0,
                    style_loss: 0.0,
                    content_score: 0.0,
                    converged: 0,
                    diverged: 0,
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        if r.diverged {
            s.diverged += 1;
        } else {
            s.style_loss += r.style_loss;
            s.content_score += r.content_score;
            s.converged += 1;
        }
    }
    for s in &mut out {
        if s.converged > 0 {
            s.style_loss /= s.converged as f64;
            s.content_score /= s.converged as f64;
        } else {
            s.style_loss = f64::NAN;
            s.content_score = f64::NAN;
        }
    }
    out
}

/// The grid value with the lowest mean style loss among settings where no
/// seed diverged.
pub fn select_s0(summary: &[SweepSummary]) -> Option<f64> {
    summary
        .iter()
        .filter(|s| s.diverged == 0 && s.converged > 0)
        .min_by(|a, b| a.style_loss.total_cmp(&b.style_loss))
        .map(|s| s.s0)
}

pub fn run_sweep_to_dir(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(cfg, &cfg.sweep.s0_grid, &cfg.seeds)?;
    let dir = prepare_dir(cfg)?;
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt(r.s0),
                r.seed.to_string(),
                fmt(r.style_loss),
                fmt(r.content_score),
                r.diverged.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("tradeoff.csv"),
        &["s0", "seed", "style_loss", "content_score", "diverged"],
        &records,
    )?;
    write_manifest(&dir, "sweep", cfg, &["tradeoff.csv".to_string()])?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetting {
    pub id: usize,
    pub name: &'static str,
    pub config: GuidanceConfig,
}

/// The five guidance variants compared in the ablation, derived from the
/// reference setting `base` (x̂₀ pair, MAE, adaptive scale, tuned weights).
pub fn ablation_settings(base: &GuidanceConfig) -> Vec<AblationSetting> {
    let base = GuidanceConfig {
        mode: GuidanceMode::Supervised,
        pair: GuidancePair::X0hat,
        distance: Distance::Mae,
        adaptive: true,
        ..base.clone()
    };
    let with = |f: &dyn Fn(&mut GuidanceConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        AblationSetting {
            id: 0,
            name: "reference",
            config: base.clone(),
        },
        AblationSetting {
            id: 1,
            name: "noisy-pair",
            config: with(&|c| c.pair = GuidancePair::Xt),
        },
        AblationSetting {
            id: 2,
            name: "fixed-scale",
            config: with(&|c| c.adaptive = false),
        },
        AblationSetting {
            id: 3,
            name: "equal-weights",
            config: with(&|c| c.weights = equal_weights(c.weights.len())),
        },
        AblationSetting {
            id: 4,
            name: "mse",
            config: with(&|c| c.distance = Distance::Mse),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: usize,
    pub name: &'static str,
    pub s0: f64,
    pub seed: u64,
    pub style_loss: f64,
    pub content_score: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    /// Level weights picked for the reference setting.
    pub weights: Vec<f64>,
    pub settings: Vec<AblationSetting>,
    pub rows: Vec<AblationRow>,
}

/// Best `(s0, mean style loss)` for `guidance` on the tuning seeds.
fn tune_s0(world: &World, cfg: &ExperimentConfig, guidance: &GuidanceConfig) -> Result<(f64, f64)> {
    let rows = grid_points(
        world,
        cfg,
        guidance,
        &cfg.ablation.s0_grid,
        &cfg.ablation.tuning_seeds,
    )?;
    let summary = summarize_sweep(&rows);
    let s0 = select_s0(&summary)
        .ok_or_else(|| Error::Config("every grid point diverged while tuning".into()))?;
    let loss = summary
        .iter()
        .find(|s| s.s0 == s0)
        .map(|s| s.style_loss)
        .unwrap_or(f64::NAN);
    Ok((s0, loss))
}

/// Tunes the reference setting's level weights and every setting's base
/// scale on the tuning seeds, then evaluates all settings on `seeds`.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<AblationOutcome> {
    let world = World::build(cfg)?;
    let mut base = GuidanceConfig {
        mode: GuidanceMode::Supervised,
        ..cfg.guidance.clone()
    };
    if !cfg.ablation.weight_candidates.is_empty() {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for w in &cfg.ablation.weight_candidates {
            let g = GuidanceConfig {
                weights: w.clone(),
                ..base.clone()
            };
            g.validate()?;
            let (_, loss) = tune_s0(&world, cfg, &g)?;
            if best.as_ref().is_none_or(|(l, _)| loss < *l) {
                best = Some((loss, w.clone()));
            }
        }
        base.weights = best.expect("non-empty candidates").1;
    }
    let mut settings = ablation_settings(&base);
    for s in &mut settings {
        s.config.s0 = tune_s0(&world, cfg, &s.config)?.0;
    }
    let mut rows = Vec::new();
    for s in &settings {
        for r in grid_points(&world, cfg, &s.config, &[s.config.s0], seeds)? {
            rows.push(AblationRow {
                setting: s.id,
                name: s.name,
                s0: r.s0,
                seed: r.seed,
                style_loss: r.style_loss,
                content_score: r.content_score,
                diverged: r.diverged,
            });
        }
    }
    Ok(AblationOutcome {
        weights: base.weights,
        settings,
        rows,
    })
}

pub fn run_ablation_to_dir(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let out = run_ablation(cfg, &cfg.seeds)?;
    let dir = prepare_dir(cfg)?;
    let mut summary = Vec::new();
    for s in &out.settings {
        let ok: Vec<&AblationRow> = out
            .rows
            .iter()
            .filter(|r| r.setting == s.id && !r.diverged)
            .collect();
        let n = ok.len() as f64;
        let mean = |f: &dyn Fn(&AblationRow) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / n
            }
        };
        let c = &s.config;
        summary.push(vec![
            s.id.to_string(),
            s.name.to_string(),
            format!("{:?}", c.pair).to_lowercase(),
            c.distance.to_string(),
            c.adaptive.to_string(),
            c.weights
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            fmt(c.s0),
            fmt(mean(&|r| r.style_loss)),
            fmt(mean(&|r| r.content_score)),
            ok.len().to_string(),
        ]);
    }
    write_csv(
        &dir.join("ablation.csv"),
        &[
            "setting",
            "name",
            "pair",
            "distance",
            "adaptive",
            "weights",
            "s0",
            "style_loss",
            "content_score",
            "seeds",
        ],
        &summary,
    )?;
    let per_seed: Vec<Vec<String>> = out
        .rows
        .iter()
        .map(|r| {
            vec![
                r.setting.to_string(),
                r.name.to_string(),
                fmt(r.s0),
                r.seed.to_string(),
                fmt(r.style_loss),
                fmt(r.content_score),
                r.diverged.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("ablation_runs.csv"),
        &[
            "setting",
            "name",
            "s0",
            "seed",
            "style_loss",
            "content_score",
            "diverged",
        ],
        &per_seed,
    )?;
    write_manifest(
        &dir,
        "ablate",
        cfg,
        &["ablation.csv".to_string(), "ablation_runs.csv".to_string()],
    )?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepRow {
    pub seed: u64,
    pub unguided: f64,
    pub guided: f64,
    pub iterative: f64,
    pub moment: f64,
    pub content_guided: f64,
    pub content_iterative: f64,
    pub content_moment: f64,
}

pub struct TwoStepImages {
    pub unguided: Vec<Image>,
    pub guided: Vec<Image>,
    pub iterative: Vec<Image>,
    pub moment: Vec<Image>,
}

/// For one seed: the guided batch, and the unguided batch (same noise)
/// post-processed by both transfer baselines.
pub fn two_step_seed(
    world: &World,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(TwoStepRow, TwoStepImages)> {
    let guidance = GuidanceConfig {
        mode: GuidanceMode::Supervised,
        ..cfg.guidance.clone()
    };
    let plain = GuidanceConfig {
        mode: GuidanceMode::None,
        ..cfg.guidance.clone()
    };
    let unguided = run_batch(world, cfg, &plain, seed)?.images;
    let guided = run_batch(world, cfg, &guidance, seed)?.images;
    let target = &world.reference_features;
    let iterative: Vec<Image> = unguided
        .par_iter()
        .map(|x| Ok(iterative_transfer(x, target, &world.pyramid, &cfg.transfer)?.image))
        .collect::<Result<_>>()?;
    let moment: Vec<Image> = unguided
        .par_iter()
        .map(|x| moment_match_transfer(x, target, &world.pyramid))
        .collect::<Result<_>>()?;
    let (u, _, _) = world.score(&unguided)?;
    let (g, cg, _) = world.score(&guided)?;
    let (i, ci, _) = world.score(&iterative)?;
    let (m, cm, _) = world.score(&moment)?;
    Ok((
        TwoStepRow {
            seed,
            unguided: u,
            guided: g,
            iterative: i,
            moment: m,
            content_guided: cg,
            content_iterative: ci,
            content_moment: cm,
        },
        TwoStepImages {
            unguided,
            guided,
            iterative,
            moment,
        },
    ))
}

pub fn run_two_step(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<TwoStepRow>> {
    let world = World::build(cfg)?;
    seeds
        .par_iter()
        .map(|&s| Ok(two_step_seed(&world, cfg, s)?.0))
        .collect()
}

/// Writes `metrics.csv` with one row per seed and arm plus the first
/// seed's images for every arm.
pub fn run_two_step_to_dir(cfg: &ExperimentConfig) -> Result<Vec<TwoStepRow>> {
    let world = World::build(cfg)?;
    let dir = prepare_dir(cfg)?;
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    let mut artifacts = Vec::new();
    for (k, &seed) in cfg.seeds.iter().enumerate() {
        let (row, imgs) = two_step_seed(&world, cfg, seed)?;
        let run_id = format!("s{seed}");
        let arms = [
            (
                "guided",
                cfg.guidance.s0,
                row.guided,
                row.content_guided,
                &imgs.guided,
            ),
            (
                "iterative",
                0.0,
                row.iterative,
                row.content_iterative,
                &imgs.iterative,
            ),
            ("moment", 0.0, row.moment, row.content_moment, &imgs.moment),
        ];
        for (arm, s0, sl, cs, batch) in arms {
            metrics.push(MetricsRow {
                run_id: run_id.clone(),
                mode: arm.to_string(),
                s0,
                style_loss: sl,
                content_score: cs,
                batch_diversity: None,
            });
            if k == 0 {
                for (b, img) in batch.iter().enumerate() {
                    let name = format!("{run_id}_{arm}_b{b}.ppm");
                    write_ppm(img, &dir.join(&name))?;
                    artifacts.push(name);
                }
            }
        }
        rows.push(row);
    }
    write_csv(
        &dir.join("metrics.csv"),
        METRICS_HEADER,
        &metrics_records(&metrics),
    )?;
    artifacts.push("metrics.csv".into());
    write_manifest(&dir, "two-step", cfg, &artifacts)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityRow {
    pub seed: u64,
    pub mode: GuidanceMode,
    pub s0: f64,
    pub batch_diversity: f64,
    pub feature_variance: f64,
    pub content_score: f64,
}

fn diversity_configs(cfg: &ExperimentConfig) -> [GuidanceConfig; 3] {
    let with = |mode, s0| GuidanceConfig {
        mode,
        s0,
        ..cfg.guidance.clone()
    };
    [
        with(GuidanceMode::None, 0.0),
        with(GuidanceMode::Synonymous, cfg.diversity.synonymous_s0),
        with(GuidanceMode::Contrastive, cfg.diversity.contrastive_s0),
    ]
}

/// Unguided, synonymous and contrastive batches per seed, sharing noise.
pub fn diversity_seed(
    world: &World,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<(DiversityRow, Vec<Image>)>> {
    let w = equal_weights(world.pyramid.levels);
    diversity_configs(cfg)
        .iter()
        .map(|g| {
            let images = run_batch(world, cfg, g, seed)?.images;
            let feats: Vec<StyleFeatures> = images
                .iter()
                .map(|x| extract(x, &world.pyramid, &w))
                .collect::<Result<_>>()?;
            let r = evaluate(&images, None, world.law.as_ref(), &world.pyramid)?;
            let row = DiversityRow {
                seed,
                mode: g.mode,
                s0: g.s0,
                batch_diversity: r.batch_diversity.unwrap_or(f64::NAN),
                feature_variance: feature_variance(&feats)?,
                content_score: r.content_score,
            };
            Ok((row, images))
        })
        .collect()
}

fn diversity_world(cfg: &ExperimentConfig) -> Result<World> {
    if cfg.diversity.style_population {
        let mut c = cfg.clone();
        c.data.kind = DataKind::Gmm;
        World::build(&c)
    } else {
        World::build(cfg)
    }
}

pub fn run_diversity(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<DiversityRow>> {
    let world = diversity_world(cfg)?;
    let per_seed: Vec<Vec<DiversityRow>> = seeds
        .par_iter()
        .map(|&s| {
            Ok(diversity_seed(&world, cfg, s)?
                .into_iter()
                .map(|(r, _)| r)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Writes `diversity.csv`, `metrics.csv`, and `embedding.csv` (a PCA of
/// every sample of the first seed across the three modes).
pub fn run_diversity_to_dir(cfg: &ExperimentConfig) -> Result<Vec<DiversityRow>> {
    let world = diversity_world(cfg)?;
    let dir = prepare_dir(cfg)?;
    let w = equal_weights(world.pyramid.levels);
    let mut rows = Vec::new();
    let mut embed_feats = Vec::new();
    let mut embed_ids = Vec::new();
    for (k, &seed) in cfg.seeds.iter().enumerate() {
        for (row, images) in diversity_seed(&world, cfg, seed)? {
            if k == 0 {
                for (b, x) in images.iter().enumerate() {
                    embed_feats.push(extract(x, &world.pyramid, &w)?);
                    embed_ids.push(format!("{}-s{seed}-b{b}", row.mode));
                }
            }
            rows.push(row);
        }
    }
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.mode.to_string(),
                fmt(r.s0),
                fmt(r.batch_diversity),
                fmt(r.feature_variance),
                fmt(r.content_score),
            ]
        })
        .collect();
    write_csv(
        &dir.join("diversity.csv"),
        &[
            "seed",
            "mode",
            "s0",
            "batch_diversity",
            "feature_variance",
            "content_score",
        ],
        &records,
    )?;
    let metrics: Vec<MetricsRow> = rows
        .iter()
        .map(|r| MetricsRow {
            run_id: format!("s{}", r.seed),
            mode: r.mode.to_string(),
            s0: r.s0,
            style_loss: f64::NAN,
            content_score: r.content_score,
            batch_diversity: Some(r.batch_diversity),
        })
        .collect();
    write_csv(
        &dir.join("metrics.csv"),
        METRICS_HEADER,
        &metrics_records(&metrics),
    )?;
    let pts = pca_embed(&embed_feats, 2)?;
    let embed: Vec<Vec<String>> = pts
        .iter()
        .zip(&embed_ids)
        .map(|(p, id)| vec![fmt(p[0]), fmt(p[1]), id.clone()])
        .collect();
    write_csv(&dir.join("embedding.csv"), &["x", "y", "run_id"], &embed)?;
    write_manifest(
        &dir,
        "diversity",
        cfg,
        &[
            "diversity.csv".to_string(),
            "metrics.csv".to_string(),
            "embedding.csv".to_string(),
        ],
    )?;
    Ok(rows)
}

/// Trains the affine denoiser on the configured Gaussian law and writes the
/// model, the loss trace and the fitted-vs-optimal slopes.
pub fn run_train_to_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let data = GaussianData::new(
        render_template(&cfg.data.template, cfg.image, cfg.data.seed)?,
        cfg.data.sigma0,
    )?;
    let seed = cfg.seeds[0];
    let out = train_affine(&data, &sched, &cfg.train, &RngStream::new(seed, 7))?;
    let dir = prepare_dir(cfg)?;
    let model_path = dir.join("affine.txt");
    out.model.save(&model_path)?;
    let losses: Vec<Vec<String>> = out
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), fmt(*l)])
        .collect();
    write_csv(&dir.join("train_loss.csv"), &["iteration", "loss"], &losses)?;
    let coeffs: Vec<Vec<String>> = (1..=sched.steps())
        .map(|t| {
            vec![
                t.to_string(),
                fmt(out.model.slope(t)),
                fmt(out.model.offset(t)),
                fmt(data.optimal_slope(sched.alpha_bar(t))),
            ]
        })
        .collect();
    write_csv(
        &dir.join("coefficients.csv"),
        &["t", "a", "b", "a_optimal"],
        &coeffs,
    )?;
    write_manifest(
        &dir,
        "train",
        cfg,
        &[
            "affine.txt".to_string(),
            "train_loss.csv".to_string(),
            "coefficients.csv".to_string(),
        ],
    )?;
    Ok(model_path)
}

/// Mean style loss of `images` against the world's reference.
pub fn mean_style_loss(world: &World, images: &[Image]) -> Result<f64> {
    let total = images
        .iter()
        .map(|x| style_loss(x, &world.reference_features, &world.pyramid))
        .sum::<Result<f64>>()?;
    Ok(total / images.len() as f64)
}

//! End-to-end orchestration: inputs, per-resolution solves, fusion, metrics
//! and on-disk artifacts.
//!
//! A run directory holds:
//!
//! * `config.json`, the configuration as run, and `run.json`, the layout
//!   needed to fuse from disk;
//! * `posteriors_r{r}` (f32, one channel per class, layer dims);
//! * `hcrf_weights_r{r}` (f32, one channel) for every layer below the coarsest;
//! * `reference_r{r}` (u16) when reference labels are known;
//! * `labels_r{r}` (u16), the fused labels, plus `energy.json` and `metrics.json`;
//! * variant extras: `categories.json`, `susceptibility_r{r}`, `susceptibility.json`,
//!   `curvature_histogram.csv`; `trials.jsonl` and `hyperparameters.json` after tuning.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constrained::{boundary_samples, categorize, sobel3d, solve_constrained, Category, CategorySummary};
use crate::error::{invalid, Result};
use crate::hcrf::{hcrf_edge_weights, EnergyReport, HcrfGraph};
use crate::hyperopt::{evaluate, tune_hcrf, tune_layers, write_trial_log, Metrics, TuneOutcome, TunerConfig};
use crate::mesh::histogram::CurvatureHistogram;
use crate::mesh::hog::hog_modes;
use crate::mesh::susceptibility::{ClassRoles, SearchSummary, SurfaceAnalysis, DEFAULT_MAX_STEPS};
use crate::mesh::voxelize::Grid;
use crate::mesh::TriMesh;
use crate::phantom::{default_class_names, generate_phantom, PhantomSpec};
use crate::pyramid::{build_pyramid, Dims, Pyramid};
use crate::robust::{mad_sigma, spatial_edge_weights, EdgeWeights, TukeyParams, WeightMode, DEFAULT_SIGMA_FLOOR};
use crate::samples::{aggregate, reference_labels, SampleSet};
use crate::sir::{modified_weights, solve_guided, SusceptibilityField};
use crate::solver::{assemble, solve, stationarity_residual, IterationReport, PosteriorMatrix, SolverOptions};
use crate::volume::{channels_to_rows, rows_to_channels, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Feature and prior graph.
    Fpg,
    /// Constrained feature and prior graph.
    Cfpg,
    /// Susceptibility-guided feature and prior graph.
    Gfpg,
}

impl std::str::FromStr for Variant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpg" => Ok(Self::Fpg),
            "cfpg" => Ok(Self::Cfpg),
            "gfpg" => Ok(Self::Gfpg),
            _ => Err(invalid(format!("unknown variant {s:?} (expected fpg, cfpg or gfpg)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Tukey,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub n_lay: usize,
    /// One value for every resolution, or a single value broadcast to all.
    pub lambda_prior: Vec<f64>,
    pub lambda_hcrf: f64,
    /// Tune `lambda_prior` and `lambda_hcrf` instead of using the values above.
    pub tune: bool,
    pub tuner: TunerConfig,
    pub solver: SolverOptions,
    pub weights: WeightKind,
    pub sigma_floor: f64,
    pub sobel_quantile: f64,
    /// Triangle mesh (OBJ) for the guided variant.
    pub mesh: Option<PathBuf>,
    pub grid_origin: [f64; 3],
    pub grid_spacing: [f64; 3],
    /// Per-resolution susceptibility volumes for the guided variant, instead of a mesh.
    pub susceptibilities: Option<Vec<PathBuf>>,
    pub fat_channel: usize,
    pub roles: ClassRoles,
    pub max_steps: usize,
    pub class_names: Option<Vec<String>>,
    /// Class excluded from averaged metrics; defaults to the last class.
    pub background: Option<usize>,
    pub seed: u64,
    /// Volume stems (`.raw` + `.json`) of the intensities, voxel priors and labels.
    pub input: Option<PathBuf>,
    pub priors: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Generate inputs instead of reading them.
    pub phantom: Option<PhantomSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fpg,
            n_lay: 2,
            lambda_prior: vec![0.5],
            lambda_hcrf: 0.5,
            tune: false,
            tuner: TunerConfig::default(),
            solver: SolverOptions::default(),
            weights: WeightKind::Tukey,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            sobel_quantile: crate::constrained::DEFAULT_SOBEL_QUANTILE,
            mesh: None,
            grid_origin: [0.0; 3],
            grid_spacing: [1.0; 3],
            susceptibilities: None,
            fat_channel: 0,
            roles: ClassRoles::default(),
            max_steps: DEFAULT_MAX_STEPS,
            class_names: None,
            background: None,
            seed: 0,
            input: None,
            priors: None,
            labels: None,
            phantom: None,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
    }

    /// `lambda_prior` expanded to one value per resolution.
    pub fn lambda_per_layer(&self) -> Result<Vec<f64>> {
        let l = &self.lambda_prior;
        let out = match l.len() {
            1 => vec![l[0]; self.n_lay + 1],
            n if n == self.n_lay + 1 => l.clone(),
            n => {
                return Err(invalid(format!(
                    "lambda_prior needs 1 or {} values, got {n}",
                    self.n_lay + 1
                )))
            }
        };
        if out.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("lambda_prior values must be finite and nonnegative"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.lambda_per_layer()?;
        if !(self.lambda_hcrf >= 0.0) || !self.lambda_hcrf.is_finite() {
            return Err(invalid("lambda_hcrf must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.sobel_quantile) {
            return Err(invalid("sobel_quantile must lie in [0, 1]"));
        }
        if !(self.solver.tol > 0.0) {
            return Err(invalid("solver tolerance must be positive"));
        }
        if self.input.is_none() && self.phantom.is_none() {
            return Err(invalid("either an input volume or a phantom spec is required"));
        }
        if self.input.is_some() && self.priors.is_none() {
            return Err(invalid("an input volume needs voxel priors"));
        }
        Ok(())
    }
}

/// Voxel-level inputs of a run.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub volume: Volume<f32>,
    pub priors: Volume<f32>,
    pub labels: Option<Volume<u16>>,
    pub mesh: Option<TriMesh>,
    pub class_names: Vec<String>,
    pub background: usize,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (volume, priors, labels, mut mesh, names) = match (&cfg.input, &cfg.phantom) {
            (Some(input), _) => {
                let priors_path = cfg.priors.as_ref().ok_or_else(|| invalid("missing priors volume"))?;
                let labels = cfg.labels.as_ref().map(|p| Volume::<u16>::read(p)).transpose()?;
                (Volume::<f32>::read(input)?, Volume::<f32>::read(priors_path)?, labels, None, None)
            }
            (None, Some(spec)) => {
                let p = generate_phantom(spec)?;
                (p.volume, p.priors, Some(p.labels), p.mesh, Some(p.class_names))
            }
            (None, None) => return Err(invalid("either an input volume or a phantom spec is required")),
        };
        if let Some(path) = &cfg.mesh {
            mesh = Some(TriMesh::read_obj(BufReader::new(fs::File::open(path)?))?);
        }
        let n_clas = priors.channels;
        if priors.dims != volume.dims || labels.as_ref().is_some_and(|l| l.dims != volume.dims || l.channels != 1) {
            return Err(invalid("volume, priors and labels must share dims (labels with one channel)"));
        }
        let class_names = cfg
            .class_names
            .clone()
            .or(names)
            .unwrap_or_else(|| if n_clas == 4 { default_class_names() } else { (0..n_clas).map(|c| format!("class{c}")).collect() });
        if class_names.len() != n_clas {
            return Err(invalid(format!("{} class names for {n_clas} classes", class_names.len())));
        }
        let background = cfg.background.unwrap_or(n_clas - 1);
        if background >= n_clas {
            return Err(invalid(format!("background class {background} outside {n_clas} classes")));
        }
        Ok(Self { volume, priors, labels, mesh, class_names, background })
    }

    pub fn n_clas(&self) -> usize {
        self.priors.channels
    }
}

/// Everything the per-resolution solves share.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pyramid: Pyramid,
    pub n_clas: usize,
    pub background: usize,
    pub samples: Vec<SampleSet>,
    pub sigmas: Vec<TukeyParams>,
    pub weights: Vec<EdgeWeights>,
    pub reference: Option<Vec<Vec<u16>>>,
    pub boundary: Option<Vec<Vec<bool>>>,
    pub susceptibility: Option<Vec<SusceptibilityField>>,
    pub search: Vec<SearchSummary>,
    pub histogram: Option<CurvatureHistogram>,
}

/// Priors used in the padding region: nearly certain background.
const PADDING_BACKGROUND_PRIOR: f32 = 0.97;

pub fn prepare(cfg: &RunConfig, inputs: &Inputs) -> Result<Prepared> {
    let n_clas = inputs.n_clas();
    let pyramid = build_pyramid(inputs.volume.dims, cfg.n_lay)?;
    let fd = pyramid.finest_dims;
    let volume = inputs.volume.padded(fd, |_| 0.0)?;
    let other = (1.0 - PADDING_BACKGROUND_PRIOR) / (n_clas - 1) as f32;
    let priors = inputs
        .priors
        .padded(fd, |c| if c == inputs.background { PADDING_BACKGROUND_PRIOR } else { other })?;
    let layers = 0..=cfg.n_lay;
    let samples = layers.clone().map(|r| aggregate(&pyramid, r, &volume, &priors)).collect::<Result<Vec<_>>>()?;
    let mut sigmas = Vec::new();
    let mut weights = Vec::new();
    for (r, s) in samples.iter().enumerate() {
        let topo = pyramid.topology(r)?;
        // a single-sample layer has no edges, so its scale is irrelevant
        let sigma = if topo.edge_count() == 0 {
            TukeyParams::new(cfg.sigma_floor, cfg.sigma_floor)?
        } else {
            mad_sigma(s, &topo, cfg.sigma_floor)?
        };
        let mode = match cfg.weights {
            WeightKind::Tukey => WeightMode::Tukey(sigma),
            WeightKind::Plain => WeightMode::Plain,
        };
        log::info!("resolution {r}: {} samples, sigma {:e}", s.len(), sigma.sigma_out);
        weights.push(spatial_edge_weights(s, &topo, mode)?);
        sigmas.push(sigma);
    }
    let reference = match &inputs.labels {
        Some(l) => {
            let padded = l.padded(fd, |_| inputs.background as u16)?;
            Some(reference_labels(&pyramid, &padded.data, n_clas)?)
        }
        None => None,
    };
    let mut prepared = Prepared {
        pyramid,
        n_clas,
        background: inputs.background,
        samples,
        sigmas,
        weights,
        reference,
        boundary: None,
        susceptibility: None,
        search: Vec::new(),
        histogram: None,
    };
    match cfg.variant {
        Variant::Fpg => {}
        Variant::Cfpg => {
            let mask = sobel3d(&inputs.volume, cfg.sobel_quantile)?;
            log::info!("Sobel threshold {:e}, {} boundary voxels", mask.threshold, mask.count());
            prepared.boundary =
                Some(layers.map(|r| boundary_samples(&prepared.pyramid, r, &mask)).collect::<Result<_>>()?);
        }
        Variant::Gfpg => {
            let fields = if let Some(stems) = &cfg.susceptibilities {
                if stems.len() != cfg.n_lay + 1 {
                    return Err(invalid(format!("need {} susceptibility volumes, got {}", cfg.n_lay + 1, stems.len())));
                }
                stems
                    .iter()
                    .enumerate()
                    .map(|(r, stem)| {
                        let v = Volume::<f32>::read(stem)?;
                        let n = prepared.pyramid.len(r);
                        if v.dims != prepared.pyramid.layers[r].dims || v.channels != n_clas {
                            return Err(invalid(format!("susceptibility volume {} has the wrong shape", stem.display())));
                        }
                        SusceptibilityField::from_scores(n, n_clas, channels_to_rows(&v.to_f64(), n, n_clas))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else if let Some(mesh) = &inputs.mesh {
                if cfg.roles.n_clas != n_clas {
                    return Err(invalid(format!("class roles assume {} classes, inputs have {n_clas}", cfg.roles.n_clas)));
                }
                let grid = Grid::new(inputs.volume.dims, cfg.grid_origin, cfg.grid_spacing)?;
                let analysis = SurfaceAnalysis::new(mesh, grid)?;
                prepared.histogram = Some(analysis.populations.histogram.clone());
                let mut fields = Vec::new();
                for r in layers {
                    let modes = hog_modes(&inputs.volume, cfg.fat_channel, &prepared.pyramid, r)?;
                    let (f, summary) = analysis.susceptibilities(&prepared.pyramid, r, &modes, cfg.roles, cfg.max_steps)?;
                    log::info!("resolution {r}: {} of {} samples hit", summary.hit_samples, f.n_samples());
                    prepared.search.push(summary);
                    fields.push(f);
                }
                fields
            } else {
                return Err(invalid("the guided variant needs a mesh or susceptibility volumes"));
            };
            prepared.susceptibility = Some(fields);
        }
    }
    Ok(prepared)
}

#[derive(Debug, Clone)]
pub struct LayerSolution {
    /// Columns as solved; constrained columns need not sum to one.
    pub posteriors: PosteriorMatrix,
    pub reports: Vec<IterationReport>,
    /// Largest pointwise residual of the stationarity equations of the unknowns.
    pub residual: f64,
    pub categories: Option<Vec<CategorySummary>>,
}

impl Prepared {
    pub fn solve_layer(&self, r: usize, lambda: f64, opts: &SolverOptions) -> Result<LayerSolution> {
        let s = self.samples.get(r).ok_or_else(|| invalid(format!("no resolution {r}")))?;
        let w = &self.weights[r];
        let (n, k) = (s.len(), self.n_clas);
        if let Some(b) = &self.boundary {
            let mut values = vec![0.0; n * k];
            let mut reports = Vec::new();
            let mut summaries = Vec::new();
            let mut residual: f64 = 0.0;
            let per_class = crate::par::map_range(k, |c| -> Result<_> {
                let cats = categorize(s, &b[r], c)?;
                let prior = s.prior_column(c);
                let sol = solve_constrained(w, &cats, &prior, lambda, opts)?;
                let col = PosteriorMatrix::new(n, 1, sol.values.clone())?;
                let res = stationarity_residual(w, &prior, lambda, &col, |j| cats.category[j] == Category::Rest);
                Ok((cats.summary(), sol, res))
            });
            for (c, item) in per_class.into_iter().enumerate() {
                let (summary, sol, res) = item?;
                if let Some(note) = &sol.notice {
                    log::info!("resolution {r} class {c}: {note}");
                }
                for j in 0..n {
                    values[j * k + c] = sol.values[j];
                }
                residual = residual.max(res);
                reports.push(sol.report);
                summaries.push(summary);
            }
            return Ok(LayerSolution {
                posteriors: PosteriorMatrix::new(n, k, values)?,
                reports,
                residual,
                categories: Some(summaries),
            });
        }
        if let Some(fields) = &self.susceptibility {
            let sol = solve_guided(w, &fields[r], s, lambda, opts, None)?;
            let mut residual: f64 = 0.0;
            for c in 0..k {
                let mw = modified_weights(w, &fields[r], c)?;
                let col = PosteriorMatrix::new(n, 1, sol.posteriors.column(c))?;
                residual = residual.max(stationarity_residual(&mw, &s.prior_column(c), lambda, &col, |_| true));
            }
            return Ok(LayerSolution { posteriors: sol.posteriors, reports: sol.reports, residual, categories: None });
        }
        let system = assemble(w, s.priors(), k, lambda, None)?;
        let (p, report) = solve(&system, opts)?;
        let residual = stationarity_residual(w, s.priors(), lambda, &p, |_| true);
        Ok(LayerSolution { posteriors: p, reports: vec![report], residual, categories: None })
    }

    /// Weight of every child-parent edge, per child resolution.
    pub fn hcrf_weights(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.pyramid.n_lay)
            .map(|r| {
                hcrf_edge_weights(
                    &self.samples[r],
                    &self.samples[r + 1],
                    &self.pyramid.parent_map(r)?,
                    self.sigmas[r].sigma_out,
                    self.sigmas[r + 1].sigma_out,
                )
            })
            .collect()
    }

    /// Metrics of per-layer labels against the reference, pooled over layers.
    pub fn evaluate(&self, labels: &[Vec<u16>]) -> Result<Option<PipelineMetrics>> {
        let Some(reference) = &self.reference else { return Ok(None) };
        evaluate_layers(labels, reference, self.n_clas, self.background).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineMetrics {
    pub per_layer: Vec<Metrics>,
    pub pooled: Metrics,
}

pub fn evaluate_layers(labels: &[Vec<u16>], reference: &[Vec<u16>], n_clas: usize, background: usize) -> Result<PipelineMetrics> {
    if labels.len() != reference.len() {
        return Err(invalid("label and reference layer counts differ"));
    }
    let per_layer =
        labels.iter().zip(reference).map(|(l, r)| evaluate(l, r, n_clas, background)).collect::<Result<Vec<_>>>()?;
    let pooled = Metrics::pooled(&per_layer)?;
    Ok(PipelineMetrics { per_layer, pooled })
}

/// Rounds through f32, the precision of every stored artifact, so fusing
/// in memory and fusing from disk see identical inputs.
fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub labels: Vec<Vec<u16>>,
    pub energy: EnergyReport,
}

/// Row-normalizes the posteriors and minimizes the hierarchical energy.
pub fn fuse(pyramid: &Pyramid, posteriors: &[PosteriorMatrix], hcrf_weights: &[Vec<f64>], lambda: f64) -> Result<Fusion> {
    let post = posteriors
        .iter()
        .map(|p| PosteriorMatrix::new(p.n_samples(), p.n_clas(), quantize(p.normalized().values())))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<Vec<f64>> = hcrf_weights.iter().map(|w| quantize(w)).collect();
    let graph = HcrfGraph::from_pyramid(pyramid, &post, &weights)?;
    let labels = graph.minimize(lambda)?;
    let energy = graph.energy(&labels, lambda)?;
    Ok(Fusion { labels: graph.split_layers(&labels), energy })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunLayout {
    pub n_lay: usize,
    pub original_dims: Dims,
    pub n_clas: usize,
    pub background: usize,
    pub class_names: Vec<String>,
    pub variant: Variant,
    pub lambda_prior: Vec<f64>,
    pub lambda_hcrf: f64,
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub layout: RunLayout,
    /// Row-normalized posteriors per resolution.
    pub posteriors: Vec<PosteriorMatrix>,
    pub solutions: Vec<LayerSolution>,
    pub fusion: Fusion,
    pub metrics: Option<PipelineMetrics>,
    pub tuning: Option<Vec<TuneOutcome>>,
}

/// Tunes every `lambda_prior` coarse to fine, then `lambda_hcrf`.
pub fn tune_run(cfg: &RunConfig, prepared: &Prepared) -> Result<(Vec<f64>, f64, Vec<TuneOutcome>)> {
    let reference = prepared.reference.as_ref().ok_or_else(|| invalid("tuning needs reference labels"))?;
    let tuner = TunerConfig { seed: cfg.seed, ..cfg.tuner.clone() };
    let layer_outcomes = tune_layers(&tuner, cfg.n_lay, |r, lambda, _frozen| {
        let sol = prepared.solve_layer(r, lambda, &cfg.solver)?;
        evaluate(&sol.posteriors.normalized().labels(), &reference[r], prepared.n_clas, prepared.background)
    })?;
    let lambdas: Vec<f64> = layer_outcomes.iter().map(|o| o.best).collect();
    let posteriors = lambdas
        .iter()
        .enumerate()
        .map(|(r, &l)| prepared.solve_layer(r, l, &cfg.solver).map(|s| s.posteriors))
        .collect::<Result<Vec<_>>>()?;
    let hw = prepared.hcrf_weights()?;
    let hcrf = tune_hcrf(&tuner, |lambda| {
        let f = fuse(&prepared.pyramid, &posteriors, &hw, lambda)?;
        Ok(evaluate_layers(&f.labels, reference, prepared.n_clas, prepared.background)?.pooled)
    })?;
    let best = hcrf.best;
    let mut outcomes = layer_outcomes;
    outcomes.push(hcrf);
    Ok((lambdas, best, outcomes))
}

/// Runs every stage in memory and, with `out` set, writes the artifacts.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    run_with_inputs(cfg, &inputs, out)
}

pub fn run_with_inputs(cfg: &RunConfig, inputs: &Inputs, out: Option<&Path>) -> Result<RunSummary> {
    let prepared = prepare(cfg, inputs)?;
    let (lambdas, lambda_hcrf, tuning) = if cfg.tune {
        let (l, h, o) = tune_run(cfg, &prepared)?;
        (l, h, Some(o))
    } else {
        (cfg.lambda_per_layer()?, cfg.lambda_hcrf, None)
    };
    let solutions = lambdas
        .iter()
        .enumerate()
        .map(|(r, &l)| prepared.solve_layer(r, l, &cfg.solver))
        .collect::<Result<Vec<_>>>()?;
    for (r, s) in solutions.iter().enumerate() {
        log::info!("resolution {r}: stationarity residual {:e}", s.residual);
    }
    let raw: Vec<PosteriorMatrix> = solutions.iter().map(|s| s.posteriors.clone()).collect();
    let hw = prepared.hcrf_weights()?;
    let fusion = fuse(&prepared.pyramid, &raw, &hw, lambda_hcrf)?;
    let metrics = prepared.evaluate(&fusion.labels)?;
    let layout = RunLayout {
        n_lay: cfg.n_lay,
        original_dims: prepared.pyramid.original_dims,
        n_clas: prepared.n_clas,
        background: prepared.background,
        class_names: inputs.class_names.clone(),
        variant: cfg.variant,
        lambda_prior: lambdas,
        lambda_hcrf,
        sigmas: prepared.sigmas.iter().map(|s| s.sigma_out).collect(),
    };
    let posteriors: Vec<PosteriorMatrix> = raw.iter().map(PosteriorMatrix::normalized).collect();
    let summary = RunSummary { layout, posteriors, solutions, fusion, metrics, tuning };
    if let Some(dir) = out {
        write_artifacts(dir, cfg, &prepared, &summary, &hw)?;
    }
    Ok(summary)
}

fn stem(dir: &Path, name: &str, r: usize) -> PathBuf {
    dir.join(format!("{name}_r{r}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_artifacts(dir: &Path, cfg: &RunConfig, prepared: &Prepared, run: &RunSummary, hw: &[Vec<f64>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let echo = serde_json::to_value(cfg)?;
    write_json(&dir.join("config.json"), &echo)?;
    write_json(&dir.join("run.json"), &run.layout)?;
    let k = prepared.n_clas;
    for (r, layer) in prepared.pyramid.layers.iter().enumerate() {
        let n = layer.len();
        let p = &run.posteriors[r];
        Volume::from_f64(layer.dims, k, &rows_to_channels(p.values(), n, k))?.write(&stem(dir, "posteriors", r), Some(echo.clone()))?;
        if r < hw.len() {
            Volume::from_f64(layer.dims, 1, &hw[r])?.write(&stem(dir, "hcrf_weights", r), Some(echo.clone()))?;
        }
        if let Some(reference) = &prepared.reference {
            Volume::new(layer.dims, 1, reference[r].clone())?.write(&stem(dir, "reference", r), Some(echo.clone()))?;
        }
        if let Some(fields) = &prepared.susceptibility {
            let f = &fields[r];
            Volume::from_f64(layer.dims, k, &rows_to_channels(f.values(), n, k))?
                .write(&stem(dir, "susceptibility", r), Some(echo.clone()))?;
        }
    }
    write_fusion(dir, &prepared.pyramid, &run.fusion, run.metrics.as_ref(), &echo)?;
    let solver: Vec<_> = run.solutions.iter().map(|s| serde_json::json!({"residual": s.residual, "reports": s.reports})).collect();
    write_json(&dir.join("solver.json"), &solver)?;
    if prepared.boundary.is_some() {
        let cats: Vec<_> = run.solutions.iter().map(|s| &s.categories).collect();
        write_json(&dir.join("categories.json"), &cats)?;
    }
    if !prepared.search.is_empty() {
        write_json(&dir.join("susceptibility.json"), &prepared.search)?;
    }
    if let Some(h) = &prepared.histogram {
        h.write_csv(fs::File::create(dir.join("curvature_histogram.csv"))?)?;
    }
    if let Some(outcomes) = &run.tuning {
        let refs: Vec<&TuneOutcome> = outcomes.iter().collect();
        write_trial_log(&refs, fs::File::create(dir.join("trials.jsonl"))?)?;
        write_json(
            &dir.join("hyperparameters.json"),
            &serde_json::json!({
                "variant": cfg.variant,
                "lambda_prior": run.layout.lambda_prior,
                "lambda_hcrf": run.layout.lambda_hcrf,
                "trials": outcomes.iter().map(|o| serde_json::json!({"target": o.target, "count": o.trials.len()})).collect::<Vec<_>>(),
            }),
        )?;
    }
    Ok(())
}

fn write_fusion(dir: &Path, pyramid: &Pyramid, fusion: &Fusion, metrics: Option<&PipelineMetrics>, echo: &serde_json::Value) -> Result<()> {
    for (r, layer) in pyramid.layers.iter().enumerate() {
        Volume::new(layer.dims, 1, fusion.labels[r].clone())?.write(&stem(dir, "labels", r), Some(echo.clone()))?;
    }
    write_json(&dir.join("energy.json"), &fusion.energy)?;
    if let Some(m) = metrics {
        write_json(&dir.join("metrics.json"), m)?;
    }
    Ok(())
}

/// Fuses the posteriors of a finished run directory, optionally with a new
/// coupling, and rewrites the labels, energy and metrics there.
pub fn fuse_from_disk(dir: &Path, lambda_hcrf: Option<f64>) -> Result<(Fusion, Option<PipelineMetrics>)> {
    let layout: RunLayout = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let pyramid = build_pyramid(layout.original_dims, layout.n_lay)?;
    let k = layout.n_clas;
    let mut posteriors = Vec::new();
    let mut weights = Vec::new();
    let mut reference = Vec::new();
    for (r, layer) in pyramid.layers.iter().enumerate() {
        let n = layer.len();
        let p = Volume::<f32>::read(&stem(dir, "posteriors", r))?;
        if p.dims != layer.dims || p.channels != k {
            return Err(invalid(format!("posteriors at resolution {r} do not match run.json")));
        }
        posteriors.push(PosteriorMatrix::new(n, k, channels_to_rows(&p.to_f64(), n, k))?);
        if r < layout.n_lay {
            let w = Volume::<f32>::read(&stem(dir, "hcrf_weights", r))?;
            if w.dims != layer.dims || w.channels != 1 {
                return Err(invalid(format!("HCRF weights at resolution {r} do not match run.json")));
            }
            weights.push(w.to_f64());
        }
        let ref_stem = stem(dir, "reference", r);
        if ref_stem.with_extension("json").exists() {
            reference.push(Volume::<u16>::read(&ref_stem)?.data);
        }
    }
    let lambda = lambda_hcrf.unwrap_or(layout.lambda_hcrf);
    let fusion = fuse(&pyramid, &posteriors, &weights, lambda)?;
    let metrics = if reference.len() == pyramid.layers.len() {
        Some(evaluate_layers(&fusion.labels, &reference, k, layout.background)?)
    } else {
        None
    };
    write_fusion(dir, &pyramid, &fusion, metrics.as_ref(), &echo)?;
    Ok((fusion, metrics))
}

/// Scores the labels of a run directory against its stored reference, or
/// against per-resolution reference stems given explicitly, and rewrites
/// `metrics.json`.
pub fn evaluate_run_dir(dir: &Path, reference: Option<&[PathBuf]>) -> Result<PipelineMetrics> {
    let layout: RunLayout = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
    let pyramid = build_pyramid(layout.original_dims, layout.n_lay)?;
    if reference.is_some_and(|r| r.len() != pyramid.layers.len()) {
        return Err(invalid(format!("need {} reference volumes", pyramid.layers.len())));
    }
    let mut labels = Vec::new();
    let mut refs = Vec::new();
    for (r, layer) in pyramid.layers.iter().enumerate() {
        let ref_stem = reference.map_or_else(|| stem(dir, "reference", r), |p| p[r].clone());
        for (name, s, out) in [("labels", stem(dir, "labels", r), &mut labels), ("reference", ref_stem, &mut refs)] {
            let v = Volume::<u16>::read(&s)?;
            if v.dims != layer.dims || v.channels != 1 {
                return Err(invalid(format!("{name} at resolution {r} do not match run.json")));
            }
            out.push(v.data);
        }
    }
    let metrics = evaluate_layers(&labels, &refs, layout.n_clas, layout.background)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

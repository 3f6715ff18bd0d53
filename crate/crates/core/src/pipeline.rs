//! Experiment orchestration behind the `pcoh` subcommands.
//!
//! An experiment is one TOML document ([`ExperimentConfig`]); CLI flags
//! override its fields and the effective values are echoed into every
//! manifest. Example:
//!
//! ```toml
//! experiment_id = "direct-desk"
//! preset = "direct"              # direct | diffuser | pinhole | depth-direct | depth-diffuser
//! output_dir = "out/direct"
//! l_c = [1e-4, 1e-3, 8e-3]       # meters
//! realizations = 100
//! seed = 1
//!
//! [objects]
//! count = 200
//!
//! [diffuser]
//! phase_rms = 9.42477796076938
//! seed = 5
//! ```
//!
//! Items are enumerated object-major: `item_id = (object * n_lc + lc) * n_depth
//! + depth`, so every prefix of the item list covers all coherence lengths.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::{ensemble_intensity_prepared, EnsembleSpec, PhaseScreenSpec, DEFAULT_SIGMA_PHI};
use crate::dataset::{
    collect_spilled, encode_pgm, sha256_hex, write_atomic, write_intensity_record, write_preview, DatasetManifest,
    IdxDataset, IntensityRecord, ItemInfo, LabelTaxonomy, ManifestHeader, ManifestRecord, SpillWriter, MANIFEST_FILE,
    MANIFEST_FORMAT, SPILL_DIR,
};
use crate::error::{Error, Result};
use crate::field::{ComplexField, GridSpec, IntensityImage, DEFAULT_WAVELENGTH};
use crate::metrology::{
    csv_table, entropy_2d, fringe_visibility, linear_fit, mean_and_std, speckle_stats, FringeWindow, LinearFit,
    SpeckleWindow, VisibilityReport,
};
use crate::propagation::PlanOptions;
use crate::scene::{DiffuserSpec, PinholeMaskSpec, PreparedScene, SceneConfig, SlmObject, Stage};
use crate::screen::realization_seed;

/// Overrides the worker count of every parallel command.
pub const WORKERS_ENV: &str = "PCOH_WORKERS";

/// Number of leading item ids whose maximum sets the exposure scale.
pub const CALIBRATION_BATCH: usize = 100;
/// Object count behind the full-scale flag.
pub const FULL_SCALE_OBJECTS: usize = 5000;
/// Hole-to-detector distance behind the short-distance flag.
pub const SHORT_METROLOGY_DISTANCE: f64 = 0.025;

pub const DEFAULT_IMAGES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/mnist5k-images-idx3-ubyte.gz");
pub const DEFAULT_LABELS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/mnist5k-labels-idx1-ubyte.gz");

pub const VISIBILITY_CSV: &str = "visibility.csv";
pub const SPECKLE_FIT_FILE: &str = "speckle_fit.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Direct,
    Diffuser,
    Pinhole,
    DepthDirect,
    DepthDiffuser,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Direct => "direct",
            Preset::Diffuser => "diffuser",
            Preset::Pinhole => "pinhole",
            Preset::DepthDirect => "depth-direct",
            Preset::DepthDiffuser => "depth-diffuser",
        }
    }

    pub fn is_depth(self) -> bool {
        matches!(self, Preset::DepthDirect | Preset::DepthDiffuser)
    }

    pub fn has_diffuser(self) -> bool {
        matches!(self, Preset::Diffuser | Preset::DepthDiffuser)
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "direct" => Preset::Direct,
            "diffuser" => Preset::Diffuser,
            "pinhole" => Preset::Pinhole,
            "depth-direct" => Preset::DepthDirect,
            "depth-diffuser" => Preset::DepthDiffuser,
            other => return Err(Error::config(format!("unknown preset {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub extent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectsConfig {
    /// IDX image file, plain or gzipped; the bundled MNIST subset if unset.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub count: usize,
    /// Seed of the object subset draw.
    pub seed: u64,
    /// Side of the object square, meters; the full grid if unset.
    pub extent: Option<f64>,
    /// Use `FULL_SCALE_OBJECTS` objects; a runtime estimate is printed first.
    pub full_scale: bool,
}

impl Default for ObjectsConfig {
    fn default() -> Self {
        Self {
            images: None,
            labels: None,
            count: 200,
            seed: 0,
            extent: None,
            full_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetrologyConfig {
    /// Hole-to-detector distance, meters.
    pub distance: f64,
    /// Use `SHORT_METROLOGY_DISTANCE` instead; fringes are under-resolved.
    pub short_distance: bool,
    /// Fringe periods spanned by the visibility window. Wider windows reach
    /// the single-hole Fresnel ringing, which a quadratic envelope cannot follow.
    pub window_periods: f64,
    /// Rows averaged on each side of the axis.
    pub window_half_width: usize,
}

impl Default for MetrologyConfig {
    fn default() -> Self {
        Self {
            distance: 0.25,
            short_distance: false,
            window_periods: 4.0,
            window_half_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    /// 1, 2 or 4; 1 for the pinhole preset and 2 otherwise when unset.
    pub pad_factor: Option<usize>,
    pub bandlimit: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            pad_factor: None,
            bandlimit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub preset: Preset,
    pub output_dir: PathBuf,
    pub wavelength: f64,
    /// Preset default (imaging or metrology grid) if unset.
    pub grid: Option<GridConfig>,
    /// Coherence lengths, meters.
    pub l_c: Vec<f64>,
    /// Detector depths for the depth presets, meters.
    pub depths: Vec<f64>,
    /// Object-to-detector distance of the direct and diffuser presets.
    pub distance: f64,
    pub realizations: usize,
    pub sigma_phi: f64,
    /// Base seed of the decoherence screens.
    pub seed: u64,
    pub objects: ObjectsConfig,
    pub diffuser: DiffuserSpec,
    pub pinholes: PinholeMaskSpec,
    pub metrology: MetrologyConfig,
    pub propagation: PropagationConfig,
    pub previews: bool,
    /// Worker threads; `PCOH_WORKERS` wins when set.
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            preset: Preset::Direct,
            output_dir: PathBuf::from("out"),
            wavelength: DEFAULT_WAVELENGTH,
            grid: None,
            l_c: vec![0.1e-3, 0.3e-3, 0.8e-3, 1e-3, 3e-3, 8e-3, 10e-3],
            depths: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            distance: 2.5,
            realizations: 100,
            sigma_phi: DEFAULT_SIGMA_PHI,
            seed: 1,
            objects: ObjectsConfig::default(),
            diffuser: DiffuserSpec::default(),
            pinholes: PinholeMaskSpec::default(),
            metrology: MetrologyConfig::default(),
            propagation: PropagationConfig::default(),
            previews: true,
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            experiment_id: preset.name().into(),
            preset,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        match self.grid {
            Some(g) => GridSpec::with_extent(g.n, g.extent),
            None if self.preset == Preset::Pinhole => Ok(GridSpec::metrology()),
            None => Ok(GridSpec::imaging()),
        }
    }

    pub fn plan_options(&self) -> PlanOptions {
        let default_pad = if self.preset == Preset::Pinhole { 1 } else { 2 };
        PlanOptions {
            pad_factor: self.propagation.pad_factor.unwrap_or(default_pad),
            bandlimit: self.propagation.bandlimit,
        }
    }

    pub fn object_count(&self) -> usize {
        if self.objects.full_scale {
            FULL_SCALE_OBJECTS
        } else {
            self.objects.count
        }
    }

    pub fn metrology_distance(&self) -> f64 {
        if self.metrology.short_distance {
            SHORT_METROLOGY_DISTANCE
        } else {
            self.metrology.distance
        }
    }

    /// Detector distances swept by this experiment.
    pub fn distances(&self) -> Vec<f64> {
        if self.preset.is_depth() {
            self.depths.clone()
        } else {
            vec![self.distance]
        }
    }

    /// Stages after the object for detector distance `z`.
    fn stages_after_object(&self, z: f64) -> Vec<Stage> {
        if self.preset.has_diffuser() {
            vec![
                Stage::FreeSpace(z / 2.0),
                Stage::Diffuser(self.diffuser),
                Stage::FreeSpace(z / 2.0),
                Stage::Detector,
            ]
        } else {
            vec![Stage::FreeSpace(z), Stage::Detector]
        }
    }

    /// Full scene for one object at distance `z`; the pinhole scene for
    /// the pinhole preset.
    pub fn scene(&self, object: Option<SlmObject>, z: f64) -> Result<SceneConfig> {
        let grid = self.grid_spec()?;
        let stages = if self.preset == Preset::Pinhole {
            vec![Stage::PinholeMask(self.pinholes), Stage::FreeSpace(z), Stage::Detector]
        } else {
            let mut s = vec![Stage::Object(object.unwrap_or_else(SlmObject::blank))];
            s.extend(self.stages_after_object(z));
            s
        };
        let mut scene = SceneConfig::new(grid, self.wavelength, stages);
        scene.propagation = self.plan_options();
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid_spec()?;
        crate::field::check_wavelength(self.wavelength)?;
        if self.l_c.is_empty() {
            return Err(Error::config("l_c sweep is empty"));
        }
        for &l in &self.l_c {
            PhaseScreenSpec::new(grid, l, self.sigma_phi, 0)?;
        }
        let pad = self.plan_options().pad_factor;
        if ![1, 2, 4].contains(&pad) {
            return Err(Error::config(format!("pad factor {pad} not in {{1, 2, 4}}")));
        }
        if self.realizations == 0 {
            return Err(Error::config("realizations must be >= 1"));
        }
        if self.preset.is_depth() && self.depths.is_empty() {
            return Err(Error::config("depth presets need at least one depth"));
        }
        if self.preset != Preset::Pinhole && self.object_count() == 0 {
            return Err(Error::config("object count must be >= 1"));
        }
        let z = if self.preset == Preset::Pinhole {
            self.metrology_distance()
        } else {
            self.distances().into_iter().fold(f64::INFINITY, f64::min)
        };
        self.scene(None, z)?.validate()
    }

    /// Effective parameters as recorded in manifests. Output location and
    /// worker count do not affect results and are left out.
    pub fn parameters(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
            map.remove("workers");
            map.insert("grid".into(), {
                let g = self.grid_spec().ok();
                serde_json::json!({ "n": g.map(|g| g.n()), "pitch": g.map(|g| g.pitch()) })
            });
            let opts = self.plan_options();
            map.insert(
                "propagation".into(),
                serde_json::json!({ "pad_factor": opts.pad_factor, "bandlimit": opts.bandlimit }),
            );
            let objects = map.get_mut("objects").and_then(|o| o.as_object_mut());
            if let Some(o) = objects {
                o.insert("count".into(), self.object_count().into());
                o.remove("images");
                o.remove("labels");
            }
        }
        v
    }

    fn load_objects(&self) -> Result<IdxDataset> {
        let images = self.objects.images.clone().unwrap_or_else(|| DEFAULT_IMAGES.into());
        let labels = self.objects.labels.clone().unwrap_or_else(|| DEFAULT_LABELS.into());
        IdxDataset::load(&images, &labels)
    }
}

/// Worker count: `PCOH_WORKERS`, then `configured`, then the number of
/// available cores.
pub fn resolve_workers(configured: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        };
    }
    if let Some(n) = configured {
        if n == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        return Ok(n);
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One row of the visibility sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub l_c: f64,
    pub report: VisibilityReport,
    pub converged: Option<bool>,
}

/// Double-pinhole visibility per coherence length. Writes `visibility.csv`
/// and a central fringe preview per `l_c` under the output directory.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<Vec<CalibrationPoint>> {
    if cfg.preset != Preset::Pinhole {
        return Err(Error::config(format!(
            "calibrate needs the pinhole preset, got {}",
            cfg.preset.name()
        )));
    }
    cfg.validate()?;
    let grid = cfg.grid_spec()?;
    let z = cfg.metrology_distance();
    let period_px = cfg.wavelength * z / cfg.pinholes.spacing / grid.pitch();
    if period_px < 2.0 {
        log::warn!(
            "fringe period {:.2} px at z = {z} m is below two pixels; visibilities are unreliable",
            period_px
        );
    }
    let window = FringeWindow::centered(
        grid.n(),
        cfg.pinholes.orientation,
        period_px,
        cfg.metrology.window_periods,
        cfg.metrology.window_half_width,
    );
    let prepared = cfg.scene(None, z)?.prepare()?;
    let source = ComplexField::new_plane_wave(grid, cfg.wavelength, 1.0)?;
    let workers = resolve_workers(cfg.workers)?;
    let points = pool(workers)?.install(|| -> Result<Vec<CalibrationPoint>> {
        let mut points = Vec::with_capacity(cfg.l_c.len());
        for (i, &l_c) in cfg.l_c.iter().enumerate() {
            let ens = EnsembleSpec::new(PhaseScreenSpec::new(grid, l_c, cfg.sigma_phi, cfg.seed)?, cfg.realizations)?;
            let img = ensemble_intensity_prepared(&source, &ens, &prepared)?;
            let report = fringe_visibility(&img, &window)?;
            log::info!("l_c = {l_c:e} m: V = {:.4}", report.v);
            if cfg.previews {
                write_fringe_preview(&cfg.output_dir, i, &img)?;
            }
            points.push(CalibrationPoint {
                l_c,
                report,
                converged: img.metadata.converged,
            });
        }
        Ok(points)
    })?;
    let rows: Vec<Vec<f64>> = points.iter().map(|p| vec![p.l_c, p.report.v]).collect();
    create_dir(&cfg.output_dir)?;
    write_atomic(
        &cfg.output_dir.join(VISIBILITY_CSV),
        csv_table(&["l_c_m", "visibility"], &rows).as_bytes(),
    )?;
    Ok(points)
}

const FRINGE_PREVIEW_SIDE: usize = 256;

fn write_fringe_preview(dir: &Path, index: usize, img: &IntensityImage) -> Result<()> {
    let n = img.grid().n();
    let side = FRINGE_PREVIEW_SIDE.min(n);
    let start = (n - side) / 2;
    let max = (start..start + side)
        .flat_map(|r| (start..start + side).map(move |c| (r, c)))
        .map(|(r, c)| img.at(r, c))
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 1.0 };
    let crop: Vec<f64> = (start..start + side)
        .flat_map(|r| (start..start + side).map(move |c| (r, c)))
        .map(|(r, c)| img.at(r, c))
        .collect();
    let px = crate::field::quantize_values(&crop, scale);
    write_atomic(
        &dir.join("previews").join(format!("fringe-{index:02}.pgm")),
        &encode_pgm(&px, side),
    )
}

/// Controls for [`cmd_generate`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Keep records already on disk from an earlier interrupted run.
    pub resume: bool,
    /// Generate at most this many missing items, then finalize an
    /// incomplete manifest with a resume cursor.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct WorkItem {
    item_id: u64,
    object_pos: usize,
    source_index: usize,
    lc_idx: usize,
    depth_idx: usize,
}

fn work_items(objects: &[usize], n_lc: usize, n_depth: usize) -> Vec<WorkItem> {
    let mut items = Vec::with_capacity(objects.len() * n_lc * n_depth);
    for (object_pos, &source_index) in objects.iter().enumerate() {
        for lc_idx in 0..n_lc {
            for depth_idx in 0..n_depth {
                items.push(WorkItem {
                    item_id: items.len() as u64,
                    object_pos,
                    source_index,
                    lc_idx,
                    depth_idx,
                });
            }
        }
    }
    items
}

struct GenContext<'a> {
    cfg: &'a ExperimentConfig,
    grid: GridSpec,
    dataset: &'a IdxDataset,
    distances: Vec<f64>,
    scenes: Vec<PreparedScene>,
}

impl GenContext<'_> {
    fn run(&self, item: &WorkItem) -> Result<IntensityImage> {
        let cfg = self.cfg;
        let mut object = self.dataset.object(item.source_index);
        object.object_extent = cfg.objects.extent;
        let source = ComplexField::new_plane_wave(self.grid, cfg.wavelength, 1.0)?
            .scaled_by(&object.transmittance(&self.grid))?;
        let l_c = cfg.l_c[item.lc_idx];
        let seed = realization_seed(cfg.seed, item.object_pos as u64);
        let ens = EnsembleSpec::new(PhaseScreenSpec::new(self.grid, l_c, cfg.sigma_phi, seed)?, cfg.realizations)?;
        let mut img = ensemble_intensity_prepared(&source, &ens, &self.scenes[item.depth_idx])?;
        img.metadata.object_id = Some(item.source_index as u64);
        img.metadata.depth = Some(self.distances[item.depth_idx]);
        Ok(img)
    }

    fn info(&self, item: &WorkItem) -> ItemInfo {
        let depth = self.cfg.preset.is_depth();
        ItemInfo {
            item_id: item.item_id,
            source_dataset: Some(self.dataset.name().to_string()),
            source_index: Some(item.source_index as u64),
            class_label: (!depth).then(|| self.dataset.label(item.source_index)),
            depth_label: depth.then_some(item.depth_idx as u8),
            depth_m: depth.then(|| self.distances[item.depth_idx]),
            l_c_m: self.cfg.l_c[item.lc_idx],
            base_seed: realization_seed(self.cfg.seed, item.object_pos as u64),
        }
    }
}

/// Rough wall-clock estimate from timing one realization of the first item.
pub fn estimate_runtime(cfg: &ExperimentConfig) -> Result<Duration> {
    let grid = cfg.grid_spec()?;
    let z = cfg.distances().into_iter().fold(0.0, f64::max);
    let prepared = cfg.scene(None, z)?.prepare()?;
    let source = ComplexField::new_plane_wave(grid, cfg.wavelength, 1.0)?;
    let ens = EnsembleSpec::new(PhaseScreenSpec::new(grid, cfg.l_c[0], cfg.sigma_phi, cfg.seed)?, 1)?;
    let t = Instant::now();
    ensemble_intensity_prepared(&source, &ens, &prepared)?;
    let per = t.elapsed();
    let n_items = cfg.object_count() * cfg.l_c.len() * cfg.distances().len();
    let workers = resolve_workers(cfg.workers)?.min(std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(per * (n_items * cfg.realizations) as u32 / workers as u32)
}

/// Generates one labeled dataset: every selected object at every `l_c`
/// (and every depth for the depth presets). Returns the finalized manifest,
/// which is incomplete only when `stop_after` cut the run short. On item
/// failure an incomplete manifest with a resume cursor is written and the
/// error returned.
pub fn cmd_generate(cfg: &ExperimentConfig, opts: &GenerateOptions) -> Result<DatasetManifest> {
    if cfg.preset == Preset::Pinhole {
        return Err(Error::config("the pinhole preset is for calibrate, not generate"));
    }
    cfg.validate()?;
    let root = cfg.output_dir.as_path();
    if !opts.resume && (root.join(MANIFEST_FILE).exists() || root.join(SPILL_DIR).exists()) {
        return Err(Error::config(format!(
            "{} already holds a dataset; resume it or choose another output directory",
            root.display()
        )));
    }
    if cfg.objects.full_scale {
        let est = estimate_runtime(cfg)?;
        eprintln!(
            "full scale: {} objects x {} l_c x {} depth(s) x M = {}; estimated runtime {:.1} h",
            cfg.object_count(),
            cfg.l_c.len(),
            cfg.distances().len(),
            cfg.realizations,
            est.as_secs_f64() / 3600.0
        );
    }

    let dataset = cfg.load_objects()?;
    let objects = crate::dataset::select_objects(dataset.len(), cfg.object_count(), cfg.objects.seed)?;
    let grid = cfg.grid_spec()?;
    let distances = cfg.distances();
    let scenes = distances
        .iter()
        .map(|&z| {
            let mut scene = SceneConfig::new(grid, cfg.wavelength, cfg.stages_after_object(z));
            scene.propagation = cfg.plan_options();
            scene.prepare()
        })
        .collect::<Result<Vec<_>>>()?;
    let ctx = GenContext {
        cfg,
        grid,
        dataset: &dataset,
        distances,
        scenes,
    };
    let items = work_items(&objects, cfg.l_c.len(), ctx.distances.len());

    create_dir(root)?;
    let done = if opts.resume { collect_spilled(root)? } else { BTreeMap::new() };
    let mut todo: Vec<&WorkItem> = items.iter().filter(|it| !done.contains_key(&it.item_id)).collect();
    if let Some(k) = opts.stop_after {
        todo.truncate(k);
    }

    let workers = resolve_workers(cfg.workers)?;
    let spills: Vec<Mutex<Option<SpillWriter>>> = (0..workers).map(|_| Mutex::new(None)).collect();
    let failure = pool(workers)?.install(|| {
        todo.par_iter()
            .with_max_len(1)
            .map(|item| -> Result<()> {
                let img = ctx.run(item)?;
                let record = write_intensity_record(&img, root, ctx.info(item), None)?;
                let w = rayon::current_thread_index().unwrap_or(0) % workers;
                let mut slot = spills[w].lock().unwrap_or_else(|e| e.into_inner());
                if slot.is_none() {
                    *slot = Some(SpillWriter::open(root, w)?);
                }
                slot.as_mut().unwrap().append(&record)
            })
            .filter_map(|r| r.err())
            .min_by_key(|e| e.exit_code())
    });
    drop(spills);

    let records = collect_spilled(root)?;
    let manifest = finalize(&ctx, &items, &objects, records)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn scene_hash(cfg: &ExperimentConfig) -> String {
    let params = cfg.parameters();
    let canonical = serde_json::to_string(&params).expect("json serializes");
    sha256_hex(canonical.as_bytes())
}

fn finalize(
    ctx: &GenContext,
    items: &[WorkItem],
    objects: &[usize],
    mut records: BTreeMap<u64, ManifestRecord>,
) -> Result<DatasetManifest> {
    let cfg = ctx.cfg;
    let root = cfg.output_dir.as_path();
    records.retain(|id, _| (*id as usize) < items.len());
    let resume_cursor = items.iter().map(|it| it.item_id).find(|id| !records.contains_key(id));
    let complete = resume_cursor.is_none();

    let calibration_items = CALIBRATION_BATCH.min(items.len());
    let calib_max = records
        .range(..calibration_items as u64)
        .map(|(_, r)| r.max_intensity)
        .fold(0.0, f64::max);
    let exposure_scale = if calib_max > 0.0 { 255.0 / calib_max } else { 1.0 };
    for r in records.values_mut() {
        r.exposure_scale = exposure_scale;
    }

    if complete && cfg.previews {
        let workers = resolve_workers(cfg.workers)?;
        pool(workers)?.install(|| {
            records.values().par_bridge().try_for_each(|r| -> Result<()> {
                let rec = IntensityRecord::read(&root.join(&r.path))?;
                write_preview(root, r.item_id, &rec, exposure_scale)
            })
        })?;
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            experiment_id: cfg.experiment_id.clone(),
            preset: cfg.preset.name().into(),
            scene_hash: scene_hash(cfg),
            taxonomy: if cfg.preset.is_depth() {
                LabelTaxonomy::Depth
            } else {
                LabelTaxonomy::Digit
            },
            grid_n: ctx.grid.n(),
            grid_pitch: ctx.grid.pitch(),
            wavelength: cfg.wavelength,
            realizations: cfg.realizations,
            exposure_scale,
            calibration_items,
            class_histogram: ctx.dataset.class_histogram(objects),
            items_expected: items.len(),
            complete,
            resume_cursor,
            parameters: cfg.parameters(),
        },
        records: records.into_values().collect(),
    };
    manifest.write(&root.join(MANIFEST_FILE))?;
    if complete {
        manifest.verify(root)?.into_result()?;
        let spill = root.join(SPILL_DIR);
        fs::remove_dir_all(&spill).map_err(|e| Error::io(&spill, e))?;
    }
    Ok(manifest)
}

/// Reads a manifest and checks it against the files beside it.
pub fn cmd_verify_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read(path)?;
    manifest.verify(manifest_root(path))?.into_result()?;
    Ok(manifest)
}

fn manifest_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_complete(path: &Path) -> Result<DatasetManifest> {
    let manifest = cmd_verify_manifest(path)?;
    if !manifest.header.complete {
        return Err(Error::data(format!(
            "{} is incomplete (resume cursor {:?})",
            path.display(),
            manifest.header.resume_cursor
        )));
    }
    Ok(manifest)
}

/// Entropy of every record at the experiment exposure scale, in item order.
fn item_entropies(manifest: &DatasetManifest, root: &Path, records: &[&ManifestRecord]) -> Result<Vec<f64>> {
    let scale = manifest.header.exposure_scale;
    let workers = resolve_workers(None)?;
    pool(workers)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let rec = IntensityRecord::read(&root.join(&r.path))?;
                Ok(entropy_2d(&rec.quantize(scale), rec.grid.n())?.h)
            })
            .collect()
    })
}

fn records_at(manifest: &DatasetManifest, l_c: f64) -> Vec<&ManifestRecord> {
    manifest.records.iter().filter(|r| r.l_c_m == l_c).collect()
}

/// Mean and standard deviation of the item entropies at `l_c`, bits.
pub fn entropy_stats(manifest: &DatasetManifest, root: &Path, l_c: f64) -> Result<(f64, f64)> {
    let recs = records_at(manifest, l_c);
    if recs.is_empty() {
        return Err(Error::data(format!("no items at l_c = {l_c} m")));
    }
    mean_and_std(&item_entropies(manifest, root, &recs)?)
}

/// Mean two-dimensional entropy over all items at `l_c`, bits.
pub fn mean_entropy(manifest: &DatasetManifest, root: &Path, l_c: f64) -> Result<f64> {
    Ok(entropy_stats(manifest, root, l_c)?.0)
}

/// Entropy CSV for one manifest (`l_c_m,mean_entropy_bits,std_entropy_bits`)
/// or, with `compare`, a diffuser/no-diffuser pair over their common `l_c`
/// values. Written to `out` when given; the CSV text is returned.
pub fn cmd_entropy(manifest_path: &Path, compare: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let a = load_complete(manifest_path)?;
    let csv = match compare {
        None => {
            let root = manifest_root(manifest_path);
            let rows = a
                .l_c_values()
                .into_iter()
                .map(|l| {
                    let (m, s) = entropy_stats(&a, root, l)?;
                    Ok(vec![l, m, s])
                })
                .collect::<Result<Vec<_>>>()?;
            csv_table(&["l_c_m", "mean_entropy_bits", "std_entropy_bits"], &rows)
        }
        Some(b_path) => {
            let b = load_complete(b_path)?;
            let diffused = |m: &DatasetManifest| m.header.preset.parse::<Preset>().is_ok_and(|p| p.has_diffuser());
            let ((plain, plain_path), (diff, diff_path)) = match (diffused(&a), diffused(&b)) {
                (false, true) => ((&a, manifest_path), (&b, b_path)),
                (true, false) => ((&b, b_path), (&a, manifest_path)),
                _ => {
                    return Err(Error::config(
                        "entropy comparison needs one manifest with a diffuser and one without",
                    ))
                }
            };
            let other = diff.l_c_values();
            let common: Vec<f64> = plain.l_c_values().into_iter().filter(|l| other.contains(l)).collect();
            if common.is_empty() {
                return Err(Error::data("the two manifests share no l_c value"));
            }
            let rows = common
                .into_iter()
                .map(|l| {
                    let (m0, s0) = entropy_stats(plain, manifest_root(plain_path), l)?;
                    let (m1, s1) = entropy_stats(diff, manifest_root(diff_path), l)?;
                    Ok(vec![l, m0, s0, m1, s1])
                })
                .collect::<Result<Vec<_>>>()?;
            csv_table(
                &[
                    "l_c_m",
                    "mean_entropy_bits_without_diffuser",
                    "std_entropy_bits_without_diffuser",
                    "mean_entropy_bits_with_diffuser",
                    "std_entropy_bits_with_diffuser",
                ],
                &rows,
            )
        }
    };
    if let Some(out) = out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeckleFitReport {
    pub depths_m: Vec<f64>,
    pub mean_speckle_size_m: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleSummary {
    pub csv: String,
    pub fit: LinearFit,
    pub report: SpeckleFitReport,
}

pub const DEFAULT_SPECKLE_WINDOW: usize = 256;

/// Mean speckle size per detector depth over a centered window of
/// `window` pixels, plus a least-squares line through the means. Writes
/// the CSV to `out` and the fit as JSON beside it.
pub fn cmd_speckle(manifest_path: &Path, window: usize, out: Option<&Path>) -> Result<SpeckleSummary> {
    let manifest = load_complete(manifest_path)?;
    if manifest.header.taxonomy != LabelTaxonomy::Depth {
        return Err(Error::config("speckle analysis needs a depth manifest"));
    }
    let depths = manifest.depth_values();
    if depths.len() < 2 {
        return Err(Error::config(format!(
            "speckle fit needs at least two depths, manifest has {}",
            depths.len()
        )));
    }
    let root = manifest_root(manifest_path);
    let n = manifest.header.grid_n;
    if window > n {
        return Err(Error::config(format!("speckle window {window} exceeds the {n} px grid")));
    }
    let win = SpeckleWindow::centered(n, window);
    let workers = resolve_workers(None)?;
    let sizes: Vec<f64> = pool(workers)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|r| {
                let img = IntensityRecord::read(&root.join(&r.path))?.to_image()?;
                Ok(speckle_stats(&img, &win)?.size)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let mut rows = Vec::with_capacity(depths.len());
    for &d in &depths {
        let at: Vec<f64> = manifest
            .records
            .iter()
            .zip(&sizes)
            .filter(|(r, _)| r.depth_m == Some(d))
            .map(|(_, &s)| s)
            .collect();
        let (m, s) = mean_and_std(&at)?;
        rows.push(vec![d, m, s]);
    }
    let means: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let fit = linear_fit(&depths, &means)?;
    let report = SpeckleFitReport {
        depths_m: depths,
        mean_speckle_size_m: means,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
    };
    let csv = csv_table(&["depth_m", "mean_speckle_size_m", "std_speckle_size_m"], &rows);
    if let Some(out) = out {
        write_atomic(out, csv.as_bytes())?;
        let fit_path = out.with_file_name(SPECKLE_FIT_FILE);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(&fit_path, json.as_bytes())?;
    }
    Ok(SpeckleSummary { csv, fit, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in [
            Preset::Direct,
            Preset::Diffuser,
            Preset::Pinhole,
            Preset::DepthDirect,
            Preset::DepthDiffuser,
        ] {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("lens".parse::<Preset>().is_err());
    }

    #[test]
    fn defaults_match_documented_sweeps() {
        let c = ExperimentConfig::default();
        assert_eq!(c.l_c, vec![1e-4, 3e-4, 8e-4, 1e-3, 3e-3, 8e-3, 1e-2]);
        assert_eq!(c.depths, vec![0.5, 1.0, 1.5, 2.0, 2.5]);
        assert_eq!(c.realizations, 100);
        assert_eq!(c.object_count(), 200);
        assert_eq!(c.grid_spec().unwrap(), GridSpec::imaging());
        assert_eq!(c.plan_options().pad_factor, 2);
        let p = ExperimentConfig::for_preset(Preset::Pinhole);
        assert_eq!(p.grid_spec().unwrap(), GridSpec::metrology());
        assert_eq!(p.plan_options().pad_factor, 1);
        assert_eq!(p.metrology_distance(), 0.25);
        p.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = r#"
            experiment_id = "x"
            preset = "depth-diffuser"
            l_c = [0.001]
            depths = [1.0, 2.0]
            [objects]
            count = 3
            [diffuser]
            seed = 4
        "#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.preset, Preset::DepthDiffuser);
        assert_eq!(c.diffuser.seed, 4);
        assert_eq!(c.diffuser.phase_rms, 3.0 * std::f64::consts::PI);
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_bad_parameters() {
        let mut c = ExperimentConfig::default();
        c.l_c.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sigma_phi = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::for_preset(Preset::Pinhole);
        c.grid = Some(GridConfig { n: 512, extent: 6e-3 });
        assert!(matches!(c.validate(), Err(Error::Stage { .. })));
        let mut c = ExperimentConfig::default();
        c.propagation.pad_factor = Some(3);
        assert!(c.validate().is_err());
    }

    #[test]
    fn items_are_object_major() {
        let items = work_items(&[7, 9], 3, 2);
        assert_eq!(items.len(), 12);
        let it = items[2 * 3 + 2 * 2 + 1];
        assert_eq!((it.item_id, it.source_index, it.lc_idx, it.depth_idx), (11, 9, 2, 1));
        // Every l_c appears within the first object's items.
        let lcs: std::collections::BTreeSet<usize> = items[..6].iter().map(|i| i.lc_idx).collect();
        assert_eq!(lcs.len(), 3);
    }

    #[test]
    fn parameters_exclude_location_and_workers() {
        let mut a = ExperimentConfig::default();
        let mut b = a.clone();
        a.output_dir = "x".into();
        b.output_dir = "y".into();
        b.workers = Some(8);
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(scene_hash(&a), scene_hash(&b));
        b.seed = 99;
        assert_ne!(scene_hash(&a), scene_hash(&b));
    }

    #[test]
    fn generate_refuses_pinhole_preset() {
        let c = ExperimentConfig::for_preset(Preset::Pinhole);
        assert!(matches!(cmd_generate(&c, &GenerateOptions::default()), Err(Error::Config(_))));
        assert!(matches!(cmd_calibrate(&ExperimentConfig::default()), Err(Error::Config(_))));
    }
}

//! Optical elements and the ordered stage chain that forms one experiment
//! geometry.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, GridSpec, DEFAULT_WAVELENGTH};
use crate::propagation::{make_plan_with, PlanOptions, PropagationPlan};
use crate::screen::{gaussian_phase_map, realization_seed};

pub const SLM_SIDE: usize = 28;

/// Amplitude object on a spatial light modulator. Gray value `g` maps to
/// transmittance `1 - g/255`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlmObject {
    pixels: Arc<Vec<u8>>,
    /// Side of the centered square the image is stretched over; `None`
    /// means the full grid.
    pub object_extent: Option<f64>,
}

impl SlmObject {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != SLM_SIDE * SLM_SIDE {
            return Err(Error::data(format!(
                "SLM object must be {SLM_SIDE}x{SLM_SIDE} 8-bit, got {} bytes",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels: Arc::new(pixels),
            object_extent: None,
        })
    }

    pub fn blank() -> Self {
        Self::new(vec![0; SLM_SIDE * SLM_SIDE]).unwrap()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Nearest-neighbor upsampled transmittance on `grid`. Pixels outside
    /// the object square are fully transmissive.
    pub fn transmittance(&self, grid: &GridSpec) -> Vec<f64> {
        let extent = self.object_extent.unwrap_or(grid.extent());
        let half = extent / 2.0;
        let cell = |c: f64| -> Option<usize> {
            if c < -half || c >= half {
                None
            } else {
                Some((((c + half) / extent * SLM_SIDE as f64) as usize).min(SLM_SIDE - 1))
            }
        };
        let cells: Vec<Option<usize>> = grid.coords().into_iter().map(cell).collect();
        let mut t = Vec::with_capacity(grid.len());
        for row in &cells {
            for col in &cells {
                t.push(match (row, col) {
                    (Some(r), Some(c)) => 1.0 - self.pixels[r * SLM_SIDE + c] as f64 / 255.0,
                    _ => 1.0,
                });
            }
        }
        t
    }
}

/// Thin ground-glass phase screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffuserSpec {
    /// Phase correlation length, meters; `None` means two grid pixels.
    #[serde(default)]
    pub corr_len: Option<f64>,
    #[serde(default = "DiffuserSpec::default_rms")]
    pub phase_rms: f64,
    #[serde(default)]
    pub seed: u64,
    /// Frozen screen shared by every realization and item.
    #[serde(default = "default_true")]
    pub static_screen: bool,
}

fn default_true() -> bool {
    true
}

impl DiffuserSpec {
    fn default_rms() -> f64 {
        3.0 * std::f64::consts::PI
    }

    pub fn corr_len_on(&self, grid: &GridSpec) -> f64 {
        self.corr_len.unwrap_or(2.0 * grid.pitch())
    }

    pub fn phase_map(&self, grid: &GridSpec, realization: usize) -> Vec<f64> {
        let seed = if self.static_screen {
            self.seed
        } else {
            realization_seed(self.seed, realization as u64)
        };
        gaussian_phase_map(grid, self.corr_len_on(grid), self.phase_rms, seed).values
    }

    fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.corr_len_on(grid) < grid.pitch() {
            return Err(Error::config("diffuser correlation length below one pixel"));
        }
        if !(self.phase_rms >= 0.0 && self.phase_rms.is_finite()) {
            return Err(Error::config("diffuser phase RMS must be >= 0"));
        }
        Ok(())
    }
}

impl Default for DiffuserSpec {
    fn default() -> Self {
        Self {
            corr_len: None,
            phase_rms: Self::default_rms(),
            seed: 0,
            static_screen: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    #[default]
    Horizontal,
    Vertical,
}

/// Two circular holes symmetric about the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeMaskSpec {
    #[serde(default = "PinholeMaskSpec::default_diameter")]
    pub diameter: f64,
    #[serde(default = "PinholeMaskSpec::default_spacing")]
    pub spacing: f64,
    #[serde(default)]
    pub orientation: Axis,
}

impl PinholeMaskSpec {
    fn default_diameter() -> f64 {
        1e-3
    }

    fn default_spacing() -> f64 {
        5e-3
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.diameter < 4.0 * grid.pitch() {
            return Err(Error::config(format!(
                "hole diameter {} m is below 4 pixels",
                self.diameter
            )));
        }
        if self.spacing <= self.diameter {
            return Err(Error::config("hole spacing must exceed the diameter"));
        }
        // Sampled coordinates run from -extent/2 to extent/2 - pitch.
        let reach = self.spacing / 2.0 + self.diameter / 2.0;
        if reach >= grid.extent() / 2.0 - grid.pitch() {
            return Err(Error::config(format!(
                "holes reach {reach} m from the axis, clipped by the {} m grid",
                grid.extent()
            )));
        }
        Ok(())
    }

    pub fn centers(&self) -> [(f64, f64); 2] {
        let s = self.spacing / 2.0;
        match self.orientation {
            Axis::Horizontal => [(-s, 0.0), (s, 0.0)],
            Axis::Vertical => [(0.0, -s), (0.0, s)],
        }
    }

    pub fn mask(&self, grid: &GridSpec) -> Vec<f64> {
        let r2 = (self.diameter / 2.0).powi(2);
        let centers = self.centers();
        let coords = grid.coords();
        let mut m = Vec::with_capacity(grid.len());
        for &y in &coords {
            for &x in &coords {
                let inside = centers
                    .iter()
                    .any(|(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= r2);
                m.push(if inside { 1.0 } else { 0.0 });
            }
        }
        m
    }
}

impl Default for PinholeMaskSpec {
    fn default() -> Self {
        Self {
            diameter: Self::default_diameter(),
            spacing: Self::default_spacing(),
            orientation: Axis::Horizontal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Object(SlmObject),
    FreeSpace(f64),
    Diffuser(DiffuserSpec),
    PinholeMask(PinholeMaskSpec),
    Detector,
}

/// Ordered stage chain; must end in exactly one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub grid: GridSpec,
    pub wavelength: f64,
    pub propagation: PlanOptions,
    pub stages: Vec<Stage>,
}

impl SceneConfig {
    pub fn new(grid: GridSpec, wavelength: f64, stages: Vec<Stage>) -> Self {
        Self {
            grid,
            wavelength,
            propagation: PlanOptions::default(),
            stages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let detectors = self
            .stages
            .iter()
            .filter(|s| matches!(s, Stage::Detector))
            .count();
        if detectors != 1 || !matches!(self.stages.last(), Some(Stage::Detector)) {
            return Err(Error::config("scene needs exactly one detector, as the last stage"));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let res = match stage {
                Stage::FreeSpace(z) if !(*z > 0.0 && z.is_finite()) => {
                    Err(Error::config(format!("free-space distance {z} must be > 0")))
                }
                Stage::Diffuser(d) => d.validate(&self.grid),
                Stage::PinholeMask(p) => p.validate(&self.grid),
                _ => Ok(()),
            };
            res.map_err(|e| Error::Stage {
                stage: i,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    /// Sum of free-space distances, meters.
    pub fn optical_path(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::FreeSpace(z) => *z,
                _ => 0.0,
            })
            .sum()
    }

    pub fn prepare(&self) -> Result<PreparedScene> {
        self.validate()?;
        let mut ops = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let wrap = |e: Error| Error::Stage {
                stage: i,
                source: Box::new(e),
            };
            ops.push(match stage {
                Stage::Object(obj) => Op::Multiply(Arc::new(obj.transmittance(&self.grid))),
                Stage::PinholeMask(p) => Op::Multiply(Arc::new(p.mask(&self.grid))),
                Stage::FreeSpace(z) => Op::Propagate(
                    make_plan_with(self.grid, self.wavelength, *z, self.propagation).map_err(wrap)?,
                ),
                Stage::Diffuser(d) if d.static_screen => {
                    Op::Phase(Arc::new(d.phase_map(&self.grid, 0)))
                }
                Stage::Diffuser(d) => Op::DynamicPhase(*d),
                Stage::Detector => break,
            });
        }
        Ok(PreparedScene {
            grid: self.grid,
            wavelength: self.wavelength,
            ops,
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Multiply(Arc<Vec<f64>>),
    Phase(Arc<Vec<f64>>),
    DynamicPhase(DiffuserSpec),
    Propagate(PropagationPlan),
}

/// A validated scene with element masks, frozen diffuser screens and
/// propagation plans precomputed. Cheap to clone and share.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    grid: GridSpec,
    wavelength: f64,
    ops: Vec<Op>,
}

impl PreparedScene {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Field at the detector. `realization` only affects non-static diffusers.
    pub fn run(&self, source: &ComplexField, realization: usize) -> Result<ComplexField> {
        source.ensure_same_grid(&self.grid)?;
        self.run_from(source.clone(), 0, realization)
    }

    /// Applies the leading static pointwise stages to `source`. They commute
    /// with any other pointwise factor, so an ensemble can apply them once
    /// and continue each realization with [`PreparedScene::run_from`] at the
    /// returned stage index.
    pub(crate) fn apply_static_prefix(&self, source: &ComplexField) -> Result<(ComplexField, usize)> {
        source.ensure_same_grid(&self.grid)?;
        let end = self
            .ops
            .iter()
            .position(|op| !matches!(op, Op::Multiply(_) | Op::Phase(_)))
            .unwrap_or(self.ops.len());
        let mut field = source.clone();
        for (i, op) in self.ops[..end].iter().enumerate() {
            field = self.apply(i, op, field, 0)?;
        }
        Ok((field, end))
    }

    pub(crate) fn run_from(&self, mut field: ComplexField, start: usize, realization: usize) -> Result<ComplexField> {
        for (i, op) in self.ops.iter().enumerate().skip(start) {
            field = self.apply(i, op, field, realization)?;
        }
        Ok(field)
    }

    fn apply(&self, i: usize, op: &Op, field: ComplexField, realization: usize) -> Result<ComplexField> {
        match op {
            Op::Multiply(m) => field.scaled_by(m),
            Op::Phase(p) => field.phase_modulated(p),
            Op::DynamicPhase(d) => field.phase_modulated(&d.phase_map(&self.grid, realization)),
            Op::Propagate(plan) => plan.propagate(&field),
        }
        .map_err(|e| Error::Stage {
            stage: i,
            source: Box::new(e),
        })
    }
}

pub fn apply_slm(field: &ComplexField, object: &SlmObject) -> Result<ComplexField> {
    field.scaled_by(&object.transmittance(field.grid()))
}

pub fn apply_diffuser(field: &ComplexField, spec: &DiffuserSpec) -> Result<ComplexField> {
    spec.validate(field.grid())?;
    field.phase_modulated(&spec.phase_map(field.grid(), 0))
}

pub fn apply_pinholes(field: &ComplexField, spec: &PinholeMaskSpec) -> Result<ComplexField> {
    spec.validate(field.grid())?;
    field.scaled_by(&spec.mask(field.grid()))
}

pub fn run_scene(source: &ComplexField, scene: &SceneConfig) -> Result<ComplexField> {
    scene.prepare()?.run(source, 0)
}

/// The lensless imaging chain: object, then `z` meters to the detector.
pub fn direct_scene(grid: GridSpec, object: SlmObject, z: f64) -> SceneConfig {
    SceneConfig::new(
        grid,
        DEFAULT_WAVELENGTH,
        vec![Stage::Object(object), Stage::FreeSpace(z), Stage::Detector],
    )
}

/// Object, then a diffuser halfway to the detector at `z`.
pub fn diffuser_scene(grid: GridSpec, object: SlmObject, diffuser: DiffuserSpec, z: f64) -> SceneConfig {
    SceneConfig::new(
        grid,
        DEFAULT_WAVELENGTH,
        vec![
            Stage::Object(object),
            Stage::FreeSpace(z / 2.0),
            Stage::Diffuser(diffuser),
            Stage::FreeSpace(z / 2.0),
            Stage::Detector,
        ],
    )
}

/// Double-pinhole mask followed by `z` meters of free space.
pub fn pinhole_scene(grid: GridSpec, mask: PinholeMaskSpec, z: f64) -> SceneConfig {
    SceneConfig::new(
        grid,
        DEFAULT_WAVELENGTH,
        vec![Stage::PinholeMask(mask), Stage::FreeSpace(z), Stage::Detector],
    )
}

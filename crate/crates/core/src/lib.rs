//! Wave-optics simulation of imaging under partially coherent light.
//!
//! A coherent plane wave passes a dynamic random phase screen (the
//! decoherence filter), an amplitude object, optional ground glass or a
//! double-pinhole mask, and free space; detector intensities are averaged
//! over many screen realizations. Measurements on the resulting images
//! (fringe visibility, two-dimensional entropy, speckle size) and labeled
//! dataset generation sit on top.
//!
//! Modules, bottom-up:
//!
//! - [`field`]: grids, complex fields, intensity images, raw field dumps
//! - [`propagation`]: band-limited angular spectrum propagation
//! - [`screen`] and [`coherence`]: Gaussian phase screens and ensembles
//! - [`scene`]: SLM objects, diffusers, pinholes, stage chains
//! - [`dataset`]: IDX ingestion, raw intensity records, manifests
//! - [`metrology`]: entropy, visibility, speckle statistics, CSV output
//! - [`pipeline`]: experiment presets and the `pcoh` subcommands
//!
//! Runnable walkthroughs of each capability live in the crate's
//! `examples/` directory.

pub mod coherence;
pub mod dataset;
pub mod error;
pub mod fft;
pub mod field;
pub mod metrology;
pub mod pipeline;
pub mod plot;
pub mod propagation;
pub mod scene;
pub mod screen;

pub use coherence::{
    coherent_limit_intensity, ensemble_intensity, sample_phase_screen, EnsembleSpec,
    PhaseScreenSpec,
};
pub use error::{Error, Result};
pub use field::{ComplexField, GridSpec, IntensityImage};
pub use propagation::{make_plan, PlanOptions, PropagationPlan};
pub use scene::{SceneConfig, Stage};

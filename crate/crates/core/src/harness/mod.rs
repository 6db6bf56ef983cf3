//! Benchmarks, the memory calculator and rendering.

pub mod bench;
pub mod memcalc;
pub mod render;

pub use bench::{bench_fitting, random_mixture, BenchConfig, BenchReport, MethodReport};
pub use memcalc::{footprint, memcalc, FootprintLayer, FootprintRow, FootprintSpec, FootprintTable};
pub use render::{colorize, diverging_color, raster_values, render, RgbImage, Slice};

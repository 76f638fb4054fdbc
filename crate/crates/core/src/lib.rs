//! Differentiable SVBRDF toolkit: material maps, GGX shading, a planar
//! patch renderer, auto exposure, the generator/discriminator networks,
//! their losses, procedural dataset generation, training and evaluation.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod exposure;
pub mod fit;
pub mod image;
pub mod losses;
pub mod maps;
pub mod math;
pub mod networks;
pub mod optim;
pub mod render;
pub mod shading;
pub mod train;

pub use error::{Error, Result};
pub use maps::{DiffuseSpecularMaps, SvbrdfMaps};
pub use math::Vec3;
pub use shading::{DirectionPair, ShadingPoint};

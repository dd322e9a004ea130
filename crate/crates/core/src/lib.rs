//! Housing price nowcasting from neighborhood context.
//!
//! The crate builds per-block features from open urban layers, aggregates
//! them over each block's egohood, trains gradient boosted trees under
//! spatially independent cross-validation and explains individual
//! predictions.

pub mod geo;
pub mod geomodel;
pub mod roadnet;
pub mod table;
pub mod features;
pub mod egohood;
pub mod spatialcv;
pub mod gbt;
pub mod evaluation;
pub mod pipeline;

//! Metro network design with a two-stage genetic algorithm.
//!
//! Stage one places `K` stations to maximize Gaussian coverage of a
//! rasterized population and of point demand generators. Stage two lays out
//! `L` lines over those stations, minimizing the demand-weighted sum of
//! network distances between every station pair while keeping the network
//! connected.

pub mod coverage;
pub mod evolve;
pub mod geomodel;
pub mod lines_stage;
pub mod netgraph;
pub mod pipeline;
pub mod stations_stage;

pub mod splines;
pub mod gpd;
pub mod model;
pub mod covariance;
pub mod inference;
pub mod simulate;
pub mod scoring;
pub mod app;

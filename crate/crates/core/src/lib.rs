pub mod dataset;
pub mod difficulty;
pub mod flow;
pub mod ids;
pub mod knn;
pub mod matrix;
pub mod projection;
pub mod subset;
pub mod summary;

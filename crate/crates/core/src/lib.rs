pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod surgery;
pub mod theory;
pub mod train;

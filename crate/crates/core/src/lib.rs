pub mod factors;
pub mod liegroup;
pub mod model;
pub mod solver;
pub mod sim;

pub mod kinematics;
pub mod retarget;
pub mod env;
pub mod dataset;
pub mod model;
pub mod rl;

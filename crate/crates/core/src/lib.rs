pub mod baselines;
pub mod config;
pub mod costs;
pub mod dynamics;
pub mod lie_se3;
pub mod mppi;
pub mod savgol;
pub mod sim;

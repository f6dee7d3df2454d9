pub mod bridge;
pub mod dimf_gauss;
pub mod error;
pub mod experiment;
pub mod gauss;
pub mod grid;
pub mod linalg;
pub mod oracle;
pub mod trace;

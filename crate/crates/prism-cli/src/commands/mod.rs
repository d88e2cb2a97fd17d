pub mod generate;
pub mod infer_time;
pub mod ood;
pub mod predict;
pub mod report;
pub mod train;
pub mod train_inverse;
pub mod validate_fisher;

pub mod conv;
mod elementwise;
mod loss;
mod shape;
pub mod spatial;

pub use elementwise::sigmoid;
pub use loss::Reduction;

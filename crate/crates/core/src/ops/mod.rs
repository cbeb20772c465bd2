pub mod activation;
pub mod basic;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod upsample;

pub mod gradcheck;
pub mod kv;
pub mod network;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod tensor;
pub mod volume;

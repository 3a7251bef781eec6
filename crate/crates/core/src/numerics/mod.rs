//! Dense numerics: `f32` parameter storage, an `f64` reverse-mode tape,
//! optimizers, seeded randomness and the binary checkpoint format.

pub mod checkpoint;
pub mod functions;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use functions::{argmax, cosine_f32, cosine_similarity, kl_divergence, softmax};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use params::{Bound, Gradients, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

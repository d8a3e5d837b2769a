//! Small differentiable-computation layer: tensors, a parameter store with
//! partition labels, a reverse-mode tape over a handful of primitives, SGD
//! with momentum, a seeded RNG, and checkpoint files.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT};
pub use graph::{log_softmax_at, softmax_values, Graph, LstmParams, Var};
pub use optim::{Sgd, SgdConfig};
pub use params::{Gradients, Param, ParamId, ParamStore, Partition};
pub use rng::Rng;
pub use tensor::{sq_dist, Tensor};
pub(crate) use tensor::dot;

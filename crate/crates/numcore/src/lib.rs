//! Minimal dense-tensor numeric core.
//!
//! Row-major `f64` tensors, a single-threaded [`Tape`] recording the forward
//! pass for reverse-mode differentiation, named parameter storage with a
//! parallel gradient buffer, an Adam optimizer, a central finite-difference
//! oracle, and a flat binary checkpoint format.
//!
//! ```
//! use numcore::{ParamStore, Gradients, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
//! let mut tape = Tape::new();
//! let wv = tape.param(&store, w).unwrap();
//! let sq = tape.mul(wv, wv).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let mut grads = Gradients::for_store(&store);
//! tape.backward(loss, &mut grads).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
//! ```

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{NumError, Result};
pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Variance guard used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

//! Reverse-mode differentiation, small networks, and the optimizer.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod matrix;
mod mlp;
mod tape;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, manifest_path, parse_key_values, render_key_values, save_checkpoint};
pub use matrix::Matrix;
pub use mlp::{encoder_heads, forward_mlp, reparameterize, BoundMlp, Linear, MlpParams, STD_FLOOR};
pub use tape::{Gradients, NodeId, Tape};

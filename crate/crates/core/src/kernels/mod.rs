//! Pure forward/backward kernels shared by the autodiff tape and the eager
//! inference engine.

pub mod conv;
pub mod elementwise;
pub mod shuffle;

pub use conv::{conv2d_bwd_input, conv2d_bwd_weight, conv2d_fwd, conv_output_dims, Pad2};
pub use elementwise::{
    add, add_bcast, l1_bwd, l1_fwd, mean_all, mul, reduce_to_dims, rprelu_bwd, rprelu_fwd,
    silu_bwd, silu_fwd, sum_all,
};
pub use shuffle::{
    channel_shuffle_indices, concat_c, gather_c, gather_c_bwd, pixel_shuffle, pixel_unshuffle,
};

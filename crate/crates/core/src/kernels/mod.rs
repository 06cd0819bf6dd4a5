//! Differentiable kernels. Each forward function has a matching backward
//! that returns the vector-Jacobian product for every differentiable input.

pub mod attention;
pub mod conv;
pub mod flow;
pub mod gemm;
pub mod resample;
pub mod sample;

pub use attention::{attention, attention_backward, attention_weights, softmax, softmax_backward};
pub use conv::{conv, conv_backward, conv_out_extent};
pub use flow::{
    blend_flows, blend_flows_backward, candidate_flows, candidate_flows_backward, gaussian_heatmap,
    gaussian_heatmap_backward,
};
pub use resample::{
    blur_down, blur_down_backward, spatial_mean, spatial_mean_backward, upsample_nearest,
    upsample_nearest_backward,
};
pub use sample::{axis_coord, grid_coords, trilinear_sample, trilinear_sample_backward};

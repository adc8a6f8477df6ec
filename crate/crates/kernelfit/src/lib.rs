//! Procedural image-filter kernels with per-pixel parameters.
//!
//! Instead of predicting filter weights directly, everything here goes
//! through small functional kernel generators (non-local means, isotropic
//! and anisotropic Gaussians, polynomial reblurring) whose few per-pixel
//! parameters live on a reduced-resolution map. Maps are found either by
//! oracle gradient optimization against a clean reference or predicted by
//! a tiny convolutional network; both search the same bounded space.

pub mod apply;
pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod kernel;
pub mod net;
pub mod oracle;
pub mod synth;

pub use apply::{
    apply_polyblur, apply_varying, infer_once_upsample_many, load_param_map, save_param_map,
    upsample_continuous, ParamMap,
};
pub use error::{Error, Result};
pub use harness::{
    cmd_deblur, cmd_denoise, cmd_eval, cmd_gradcheck, cmd_train, cmd_upsample, denoise_image,
    false_color, run_eval, write_provenance, DenoiseMethod, EvalDetail, EvalReport, EvalRow,
    EvalSettings, MethodRun, RunConfig, TOOL_VERSION,
};
pub use image::{
    add_awgn, bilinear_resize, mean_squared_error, pad_mirror, psnr, Image, NoiseModel, PSNR_CAP,
};
pub use io::{load_image, save_image, save_image_depth, BitDepth};
pub use net::{
    backward, build_network, build_network_seeded, forward, forward_cached,
    forward_with_noise_map, load_checkpoint, net_grad_check, net_grad_check_corrupted,
    save_checkpoint, train, Checkpoint, ConvLayer, Network, TrainConfig, TrainRun,
};
pub use oracle::{
    grad_check, grad_check_corrupted, loss_l2, optimize_global_param, optimize_local_params,
    optimize_local_params_init, optimize_local_params_traced, GradReport, OptimConfig, OracleRun,
};
pub use synth::{synth_scene, write_dataset};
pub use kernel::{
    aniso_gaussian_weight_grad, aniso_gaussian_weights, gaussian_blur, iso_gaussian_weight_grad,
    iso_gaussian_weights, nlm_weight_grad, nlm_weights, polyblur_apply, raw_from_value,
    remap_sigmoid, remap_sigmoid_deriv, KernelFamily, KernelParams, KernelSpec, KernelWeights,
    RHO_LIMIT, SIGMA_FLOOR,
};

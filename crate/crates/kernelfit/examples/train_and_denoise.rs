//! Trains the tiny parameter-map predictor on synthetic scenes, then
//! denoises a held-out scene with the checkpoint and compares against the
//! globally tuned baseline.
//!
//! The run is sized for a quick demonstration (about a minute); expect the
//! network to land between the global baseline and the oracle. The `train`
//! and `eval` CLI commands run the same machinery at larger scale.

use std::fs;
use std::path::Path;

use kernelfit::{
    add_awgn, build_network_seeded, denoise_image, load_checkpoint, psnr, save_checkpoint,
    save_image, synth_scene, train, write_dataset, DenoiseMethod, KernelSpec, NoiseModel,
    OptimConfig, Result, TrainConfig,
};

fn main() -> Result<()> {
    let out = Path::new("demo-out");
    let data = out.join("train-set");
    fs::create_dir_all(&data).expect("create demo-out/train-set");
    write_dataset(&data, 16, 64, 64, 1, 11)?;

    let spec = KernelSpec::nlm();
    let cfg = TrainConfig {
        dataset_dir: data.clone(),
        epochs: 10,
        crops_per_epoch: 256,
        crop_size: 44,
        batch: 4,
        lr: 2e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut net = build_network_seeded(&spec, cfg.seed);
    println!(
        "training {} parameters on {} ...",
        net.param_count(),
        data.display()
    );
    let run = train(&mut net, &cfg)?;
    let per_epoch = run.step_losses.len() / cfg.epochs;
    let epoch_mean = |e: usize| {
        run.step_losses[e * per_epoch..(e + 1) * per_epoch]
            .iter()
            .sum::<f64>()
            / per_epoch as f64
    };
    println!(
        "{} updates, mean batch loss per epoch: {}",
        run.step_losses.len(),
        (0..cfg.epochs)
            .map(|e| format!("{:.3e}", epoch_mean(e)))
            .collect::<Vec<_>>()
            .join(" -> ")
    );
    let ckpt_path = out.join("demo.ckpt");
    save_checkpoint(&run.checkpoint, &ckpt_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;

    // held-out scene: a seed the training set never saw
    let sigma = 0.08;
    let clean = synth_scene(96, 96, 1, 999);
    let noisy = add_awgn(&clean, &NoiseModel::new(sigma, 2));
    let opt = OptimConfig::default();

    let global = denoise_image(&noisy, Some(&clean), DenoiseMethod::Global, &spec, sigma, None, &opt)?;
    let network = denoise_image(&noisy, None, DenoiseMethod::Checkpoint, &spec, sigma, Some(&ckpt), &opt)?;

    println!("input:   {:.2} dB", psnr(&noisy, &clean)?);
    println!("global:  {:.2} dB", psnr(&global.output, &clean)?);
    println!("network: {:.2} dB (no reference needed)", psnr(&network.output, &clean)?);

    save_image(&network.output, &out.join("denoised_network.png"))?;
    println!("wrote {} and {}", ckpt_path.display(), out.join("denoised_network.png").display());
    Ok(())
}

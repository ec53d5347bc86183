//! Train the invertible denoiser on a synthetic phantom and evaluate the
//! denoising gain on a held-out noisy phantom against a 3x3 box-filter
//! baseline.
//!
//!     cargo run --release --example train_denoise -- [iters] [channels] [blocks] [patch] [batch]

use interslice::metrics::{box_blur3, psnr, ssim};
use interslice::model::Arch;
use interslice::train::{denoise_volume, train, TrainConfig};
use interslice::volume::phantom::{make_phantom, PhantomKind};
use interslice::volume::{add_noise, normalize, NoiseKind, NoiseSpec, Volume};

fn arg(n: usize, default: u64) -> u64 {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn mean_psnr_ssim(a: &Volume, b: &Volume, window: interslice::volume::Window) -> (f64, f64) {
    let an = normalize(a, window).unwrap();
    let bn = normalize(b, window).unwrap();
    let (h, w) = (a.dims[1], a.dims[2]);
    let mut p_acc = 0.0;
    let mut s_acc = 0.0;
    for z in 0..a.dims[0] {
        p_acc += psnr(an.slice(z), bn.slice(z), 1.0).unwrap();
        s_acc += ssim(an.slice(z), bn.slice(z), h, w, 1.0).unwrap();
    }
    (p_acc / a.dims[0] as f64, s_acc / a.dims[0] as f64)
}

fn box_filter_volume(v: &Volume) -> Volume {
    let mut out = v.clone();
    for z in 0..v.dims[0] {
        let blurred = box_blur3(v.slice(z), v.dims[1], v.dims[2]);
        out.slice_mut(z).copy_from_slice(&blurred);
    }
    out
}

fn main() {
    let cfg = TrainConfig {
        arch: Arch::M3,
        total_iters: arg(1, 400),
        channels: arg(2, 32) as usize,
        blocks: arg(3, 12) as usize,
        patch_size: arg(4, 48) as usize,
        batch_size: arg(5, 8) as usize,
        lr0: std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(1e-4),
        seed: 17,
        log_every: 25,
        ..TrainConfig::default()
    };
    let window = cfg.window_struct();
    let sigma_norm = 0.08f32;
    let sigma_hu = sigma_norm * window.width();

    let (train_clean, _) = make_phantom(PhantomKind::Ellipses, [32, 64, 64], 100).unwrap();
    let train_noisy =
        add_noise(&train_clean, &NoiseSpec { kind: NoiseKind::Gaussian { sigma: sigma_hu }, seed: 200 }).unwrap();
    let (test_clean, _) = make_phantom(PhantomKind::Ellipses, [32, 64, 64], 101).unwrap();
    let test_noisy =
        add_noise(&test_clean, &NoiseSpec { kind: NoiseKind::Gaussian { sigma: sigma_hu }, seed: 201 }).unwrap();

    let (noisy_psnr, noisy_ssim) = mean_psnr_ssim(&test_noisy, &test_clean, window);
    let boxed = box_filter_volume(&test_noisy);
    let (box_psnr, box_ssim) = mean_psnr_ssim(&boxed, &test_clean, window);
    println!("noisy:      PSNR {noisy_psnr:.2} dB  SSIM {noisy_ssim:.4}");
    println!("box filter: PSNR {box_psnr:.2} dB  SSIM {box_ssim:.4}");

    let dir = std::env::temp_dir().join("interslice-train-denoise");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("model.innc");

    let started = std::time::Instant::now();
    let outcome = train(
        &cfg,
        &[train_noisy],
        &ckpt,
        Some(&dir.join("train.log.jsonl")),
        None,
        |rec, bundle| {
            let eval_every = arg(7, 100);
            if rec.iter % eval_every == 0 || rec.iter == cfg.total_iters {
                let denoised = denoise_volume(bundle, &test_noisy, window).unwrap();
                let (p, s) = mean_psnr_ssim(&denoised, &test_clean, window);
                println!(
                    "iter {:5}  lr {:.2e}  L_f {:.5}  L_r {:.5}  heldout PSNR {p:.2} dB  SSIM {s:.4}  [{:.1}s]",
                    rec.iter, rec.lr, rec.loss_f, rec.loss_r, rec.secs
                );
            } else {
                println!(
                    "iter {:5}  lr {:.2e}  L_f {:.5}  L_r {:.5}  [{:.1}s]",
                    rec.iter, rec.lr, rec.loss_f, rec.loss_r, rec.secs
                );
            }
        },
    )
    .unwrap();
    println!("training took {:.1}s", started.elapsed().as_secs_f64());

    let denoised = denoise_volume(&outcome.bundle, &test_noisy, window).unwrap();
    let (p, s) = mean_psnr_ssim(&denoised, &test_clean, window);
    println!("final:      PSNR {p:.2} dB  SSIM {s:.4}");
    println!("gain over noisy: {:+.2} dB (box filter: {:+.2} dB)", p - noisy_psnr, box_psnr - noisy_psnr);
    println!("checkpoint: {}", outcome.checkpoint_path.display());
}

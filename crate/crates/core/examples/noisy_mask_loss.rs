//! The noise-corrupted mask loss and the reliability weight on a handful
//! of pixels: larger predicted variance flattens the loss on pixels whose
//! pseudo label disagrees with the logits.

use crossmodal_seg::losses::{draw_noise, naive_mask_loss, noisy_mask_loss, reliability, McAggregation, NoiseConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> crossmodal_seg::Result<()> {
    let logits = [3.0, 2.0, -2.5, 0.3];
    let target = [true, false, false, true];
    let (naive, _) = naive_mask_loss(&logits, &target, true);
    println!("naive loss {naive:.4}");

    for aggregation in [McAggregation::Likelihood, McAggregation::Loss] {
        let cfg = NoiseConfig { mc_samples: 64, aggregation, ..NoiseConfig::default() };
        let z = draw_noise(&mut ChaCha8Rng::seed_from_u64(0), cfg.mc_samples, logits.len());
        println!("{aggregation:?}:");
        for var in [1e-4f64, 0.1, 1.0, 10.0, 100.0] {
            let log_var = [var.ln(); 4];
            let (loss, _, d_log_var) = noisy_mask_loss(&logits, &log_var, &target, &z, &cfg, true);
            println!("  variance {var:>7}: loss {loss:.4}  d/dlogvar {:+.4?}", d_log_var);
        }
    }

    let cfg = NoiseConfig::default();
    for mean in [cfg.eta, 2.0 * cfg.eta, 10.0 * cfg.eta] {
        println!("mean noise {mean:.3} -> reliability {:.3}", reliability(&[mean; 16], &cfg)?);
    }
    Ok(())
}

//! Recover the spatial sources of the default manufactured case from noisy
//! observations and compare with the truth.

use mfg_lab::harness::{build_case, ExperimentConfig};
use mfg_lab::inverse::{make_inverse_data, reconstruct, ReconstructionConfig};

fn main() -> mfg_lab::Result<()> {
    let case = build_case(&ExperimentConfig::default(), 7)?;
    for delta in [0.0, 1e-3, 1e-2, 1e-1] {
        let data = make_inverse_data(&case, delta, 7)?;
        let cfg = ReconstructionConfig { beta: (delta * delta).max(1e-10), ..Default::default() };
        let res = reconstruct(&data, &cfg)?;
        let err = res.errors.expect("manufactured truth");
        println!(
            "delta {delta:>6}: rel err f {:.3e}, g {:.3e} ({} iterations, {})",
            err.rel_f, err.rel_g, res.iterations, res.preconditioner
        );
    }
    Ok(())
}

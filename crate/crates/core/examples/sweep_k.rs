//! One-factor sweep over the prediction weighting power.
//!
//! cargo run --release --example sweep_k

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::eval::{sweep, TeacherReference};

fn main() -> flowmap_distill::Result<()> {
    let mut cfg = common::config();
    cfg.distill.steps = 800;
    cfg.eval.samples = 4000;
    let ds = cfg.dataset()?;
    let teacher = common::teacher();
    let reference = TeacherReference::build(&teacher, ds.class_count(), ds.dim(), &cfg.eval)?;
    let variants = cfg.sweeps.k_variants(&cfg.distill);
    for r in sweep(&teacher, "k", &variants, 1, &reference, ds.as_gmm().ok(), &cfg.eval)? {
        println!("k={}: coupled sliced W {:.4}, score {:.4}", r.value, r.coupled_sw, r.score);
    }
    Ok(())
}

//! The data-based baseline trained on increasingly augmented data against
//! a data-free student, scored against the teacher.
//!
//! cargo run --release --example mismatch -- [baseline steps]

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::eval::{mismatch_sweep, TeacherReference};

fn main() -> flowmap_distill::Result<()> {
    let steps = std::env::args().nth(1).map_or(1500, |s| s.parse().expect("steps"));
    let mut cfg = common::config();
    cfg.baseline.steps = steps;
    cfg.distill.steps = steps;
    cfg.eval.samples = 4000;
    let ds = cfg.dataset()?;
    let teacher = common::teacher();
    let reference = TeacherReference::build(&teacher, ds.class_count(), ds.dim(), &cfg.eval)?;
    let rows = mismatch_sweep(&teacher, &ds, &[0, 3], &cfg.baseline, &cfg.distill, &reference, &cfg.eval, 1)?;
    for r in rows {
        println!("{:>9} level {}: sliced W {:.4}", r.method, r.level, r.sliced_wasserstein);
    }
    Ok(())
}

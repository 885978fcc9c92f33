//! Distills a one-step student from a teacher without touching data, then
//! compares it with the teacher on shared noise.
//!
//! cargo run --release --example distill_student -- [steps]

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::eval::{evaluate_student, TeacherReference};
use flowmap_distill::trainer::distill;
use flowmap_distill::trainer::DistillState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flowmap_distill::Result<()> {
    let steps = std::env::args().nth(1).map_or(1500, |s| s.parse().expect("steps"));
    let mut cfg = common::config();
    cfg.distill.steps = steps;
    cfg.eval.samples = 4000;
    let ds = cfg.dataset()?;
    let teacher = common::teacher();

    let mut state = DistillState::from_teacher(&teacher, &cfg.distill, ChaCha8Rng::seed_from_u64(1))?;
    let log = distill(&mut state, &teacher, &cfg.distill)?;
    for r in log.iter().step_by(steps.div_ceil(6).max(1)) {
        println!(
            "step {:>5}  pred residual {:.4}  corr residual {:.4}  aux loss {:.4}  lambda {:.3}",
            r.step, r.pred_residual, r.corr_residual, r.aux_loss, r.lambda
        );
    }

    let reference = TeacherReference::build(&teacher, ds.class_count(), ds.dim(), &cfg.eval)?;
    let e = evaluate_student(&state.student.ema_model(), &reference, ds.as_gmm().ok(), &cfg.eval)?;
    let s = e.summary();
    println!("one-step student vs teacher on the same noise: sliced W {:.4}", s.coupled_sw);
    println!("conditional modes covered {:.0}/8, unconditional sliced W {:.4}", s.conditional_coverage * 8.0, s.unconditional_sw);
    Ok(())
}

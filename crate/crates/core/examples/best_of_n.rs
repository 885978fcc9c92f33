//! Noise search with the student as a cheap proxy: pick the best of N
//! student outputs under a verifier and solve the teacher from that noise.
//!
//! cargo run --release --example best_of_n

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::eval::{best_of_n, train_student, Verifier};

fn main() -> flowmap_distill::Result<()> {
    let mut cfg = common::config();
    cfg.distill.steps = 1500;
    cfg.bon.trials = 256;
    let ds = cfg.dataset()?;
    let teacher = common::teacher();
    let st = train_student(&teacher, &cfg.distill, 1)?;
    let verifier = Verifier::ClassLogDensity(ds.as_gmm()?.clone());
    for r in best_of_n(&st.student.ema_model(), &teacher, &verifier, ds.class_count(), &cfg.bon)? {
        println!(
            "N={:>3}: student score {:7.3}  transferred {:7.3}  cost {} student + {} teacher evals",
            r.n, r.student_score, r.transferred_score, r.student_nfe, r.teacher_nfe
        );
    }
    Ok(())
}

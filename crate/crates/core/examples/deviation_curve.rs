//! How far a student's jumps drift from the teacher trajectory as the jump
//! grows, for prediction-only and combined training.
//!
//! cargo run --release --example deviation_curve

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::eval::{deviation_study, train_student};
use flowmap_distill::trainer::ObjectiveMode;

fn main() -> flowmap_distill::Result<()> {
    let mut cfg = common::config();
    cfg.distill.steps = 1500;
    let dev = &cfg.experiments.deviation;
    let teacher = common::teacher();
    for objective in [ObjectiveMode::Prediction, ObjectiveMode::Combined] {
        let mut d = cfg.distill.clone();
        d.objective = objective;
        let st = train_student(&teacher, &d, 1)?;
        let curve = deviation_study(&st.student.ema_model(), &teacher, 8, dev)?;
        let shown: Vec<String> = curve.mean.iter().map(|v| format!("{v:.3}")).collect();
        println!("{objective:?}: rho {:.2}, deviation by jump [{}]", curve.trend()?, shown.join(" "));
    }
    Ok(())
}

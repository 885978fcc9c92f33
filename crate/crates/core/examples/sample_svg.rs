//! One-step samples per class from a briefly distilled student, written as
//! a scatter plot next to teacher samples.
//!
//! cargo run --release --example sample_svg -- [out.svg]

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::eval::{balanced_labels, student_samples};
use flowmap_distill::interpolant::prior_samples;
use flowmap_distill::io::{svg_plot, write_svg, PlotKind, Series};
use flowmap_distill::teacher::{sample_teacher, Guided, GuidanceInterval, SolverConfig};
use flowmap_distill::trainer::{distill, DistillState};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(x: &Array2<f64>) -> Vec<(f64, f64)> {
    x.outer_iter().map(|r| (r[0], r[1])).collect()
}

fn main() -> flowmap_distill::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "samples.svg".into());
    let mut cfg = common::config();
    cfg.distill.steps = 1000;
    let teacher = common::teacher();
    let mut state = DistillState::from_teacher(&teacher, &cfg.distill, ChaCha8Rng::seed_from_u64(2))?;
    distill(&mut state, &teacher, &cfg.distill)?;

    let n = 1600;
    let z = prior_samples(n, 2, &mut ChaCha8Rng::seed_from_u64(3));
    let labels = balanced_labels(n, 8);
    let student = student_samples(&state.student.ema_model(), z.view(), &labels, 1.0)?;
    let guided = Guided { field: &teacher, interval: GuidanceInterval::FULL };
    let reference = sample_teacher(guided, z.view(), &labels, Array1::ones(n).view(), 1.0, 0.0, &SolverConfig::heun(50))?;
    let svg = svg_plot(
        "1 NFE student vs 100 NFE teacher",
        "x",
        "y",
        &[
            Series { name: "teacher".into(), points: points(&reference) },
            Series { name: "student".into(), points: points(&student) },
        ],
        PlotKind::Scatter,
    );
    write_svg(std::path::Path::new(&out), &svg)?;
    println!("wrote {out}");
    Ok(())
}

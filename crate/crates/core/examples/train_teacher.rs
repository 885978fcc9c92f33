//! Trains the conditional flow-matching teacher on the 8-mode ring and
//! checks its samples against exact draws.
//!
//! cargo run --release --example train_teacher -- [steps]

use flowmap_distill::config::RunConfig;
use flowmap_distill::interpolant::prior_samples;
use flowmap_distill::metrics::{mode_coverage, sliced_wasserstein};
use flowmap_distill::net::Label;
use flowmap_distill::run::resolve;
use flowmap_distill::teacher::{sample_teacher, train_teacher, Guided, GuidanceInterval, SolverConfig};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flowmap_distill::Result<()> {
    let steps = std::env::args().nth(1).map_or(3000, |s| s.parse().expect("steps"));
    let mut cfg = RunConfig::default();
    cfg.teacher.steps = steps;
    let (ds, spec) = resolve(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let run = train_teacher(&ds, spec, &cfg.teacher, &mut rng)?;
    let tail = &run.losses[run.losses.len().saturating_sub(100)..];
    println!("final loss (mean of last 100 steps): {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);

    let field = run.field();
    let n = 8000;
    let (exact, classes) = ds.sample(Label::Null, n, &mut rng)?;
    let z = prior_samples(n, 2, &mut rng);
    let guided = Guided { field: &field, interval: GuidanceInterval::FULL };
    for (name, labels) in [
        ("class-matched", classes.iter().map(|&c| Label::Class(c)).collect::<Vec<_>>()),
        ("unconditional", vec![Label::Null; n]),
    ] {
        let x = sample_teacher(guided, z.view(), &labels, Array1::ones(n).view(), 1.0, 0.0, &SolverConfig::heun(50))?;
        let sw = sliced_wasserstein(x.view(), exact.view(), 256, &mut rng)?;
        let cov = mode_coverage(x.view(), ds.as_gmm()?)?;
        println!("{name:>14}: sliced W {sw:.4}, modes {}/8, smallest mode mass {:.3}", cov.covered(), cov.min_mass());
    }
    Ok(())
}

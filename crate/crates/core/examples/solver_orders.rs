//! Euler and Heun on a field with a closed-form solution, halving the step
//! each time.
//!
//! cargo run --example solver_orders

use flowmap_distill::net::Label;
use flowmap_distill::teacher::{solve, Analytic, SolverConfig, VelocityField};
use ndarray::array;

fn main() -> flowmap_distill::Result<()> {
    let field = VelocityField::Analytic(Analytic::Linear { a: 1.0 });
    let z = array![[1.0, -0.5]];
    let labels = [Label::Null];
    let exact = &z * 1f64.exp();
    for (name, mk) in [("euler", SolverConfig::euler as fn(usize) -> SolverConfig), ("heun", SolverConfig::heun)] {
        let mut prev: Option<f64> = None;
        for n in [8, 16, 32, 64] {
            let x = solve(|x, t| field.velocity_at(x, t, &labels), z.view(), 1.0, 0.0, &mk(n))?;
            let err = (&x - &exact).mapv(f64::abs).sum();
            match prev {
                Some(p) => println!("{name:>5} N={n:>2}: error {err:.3e}, observed order {:.2}", (p / err).log2()),
                None => println!("{name:>5} N={n:>2}: error {err:.3e}"),
            }
            prev = Some(err);
        }
    }
    Ok(())
}

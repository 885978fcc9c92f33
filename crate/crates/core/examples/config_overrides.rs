//! Loading a TOML run config and applying command-line style overrides.
//!
//! cargo run --example config_overrides

use flowmap_distill::config::RunConfig;

fn main() -> flowmap_distill::Result<()> {
    let text = r#"
[distill]
steps = 2000
k = 0.5

[distill.balance]
alpha_ref = 0.6
"#;
    let mut cfg = RunConfig::from_toml_str(text)?;
    cfg.apply_overrides(&["distill.r.hi=0.9".to_string(), "network.hidden_dims=[32, 32]".to_string()])?;
    println!("steps {} k {} alpha {}", cfg.distill.steps, cfg.distill.k, cfg.distill.balance.alpha_ref);
    println!("r range [{}, {}], hidden {:?}", cfg.distill.r.lo, cfg.distill.r.hi, cfg.network.hidden_dims);

    for bad in ["distill.stepz=1", "distill.split.prediction=1.5"] {
        match cfg.clone().apply_overrides(&[bad.to_string()]) {
            Ok(_) => println!("{bad}: accepted"),
            Err(e) => println!("{bad}: rejected ({e})"),
        }
    }
    println!("\nfull config:\n{}", cfg.to_toml_string()?);
    Ok(())
}

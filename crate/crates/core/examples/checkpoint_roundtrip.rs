//! Saves a partly trained distillation state, reloads it and shows that the
//! bytes and the resumed run are unchanged.
//!
//! cargo run --release --example checkpoint_roundtrip

#[path = "common/mod.rs"]
mod common;

use flowmap_distill::io::{config_hash, load_checkpoint, save_checkpoint};
use flowmap_distill::run::{distill_checkpoint, load_student, resolve};
use flowmap_distill::trainer::{distill, DistillState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flowmap_distill::Result<()> {
    let mut cfg = common::config();
    cfg.distill.steps = 50;
    let (_, spec) = resolve(&cfg)?;
    let teacher = common::teacher();
    let mut st = DistillState::from_teacher(&teacher, &cfg.distill, ChaCha8Rng::seed_from_u64(4))?;
    distill(&mut st, &teacher, &cfg.distill)?;

    let dir = std::env::temp_dir().join("flowmap-example-ckpt");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("student.ckpt");
    let ckpt = distill_checkpoint(&st, &config_hash(&cfg.distill));
    save_checkpoint(&path, &ckpt)?;
    let back = load_checkpoint(&path)?;
    println!("{} bytes, byte-identical after reload: {}", ckpt.to_bytes().len(), back.to_bytes() == ckpt.to_bytes());

    let student = load_student(&back, &spec)?;
    println!("student weights restored exactly: {}", student.params == st.student.params);
    let rng = back.rng.as_ref().expect("distill checkpoints carry the rng").restore();
    println!("rng stream restored exactly: {}", rng == st.rng);
    Ok(())
}

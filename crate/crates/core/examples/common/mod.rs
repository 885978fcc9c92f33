//! Helpers shared by the examples: a quickly trained teacher cached in the
//! system temp directory so each example does not pay for it again.

use flowmap_distill::config::RunConfig;
use flowmap_distill::data::Dataset2D;
use flowmap_distill::io::{load_checkpoint, save_checkpoint};
use flowmap_distill::run::{load_teacher, resolve, teacher_checkpoint};
use flowmap_distill::teacher::{train_teacher, VelocityField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TEACHER_STEPS: usize = 3000;

pub fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.teacher.steps = TEACHER_STEPS;
    cfg
}

#[allow(dead_code)]
pub fn dataset() -> Dataset2D {
    config().dataset().expect("default dataset")
}

pub fn teacher() -> VelocityField {
    let cfg = config();
    let (ds, spec) = resolve(&cfg).expect("default config resolves");
    let path = std::env::temp_dir().join(format!("flowmap-example-teacher-{TEACHER_STEPS}.ckpt"));
    if let Ok(t) = load_checkpoint(&path).and_then(|c| load_teacher(&c, &spec)) {
        return t;
    }
    eprintln!("training a {TEACHER_STEPS}-step teacher (cached at {})", path.display());
    let run = train_teacher(&ds, spec, &cfg.teacher, &mut ChaCha8Rng::seed_from_u64(0)).expect("teacher trains");
    save_checkpoint(&path, &teacher_checkpoint(&run, TEACHER_STEPS, "example")).expect("cache writable");
    run.field()
}

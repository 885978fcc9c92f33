//! Glue between trained states and files on disk: checkpoint layouts for
//! each model kind and a run directory that owns exactly one manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::correct::AUX_CONDITIONS;
use crate::data::Dataset2D;
use crate::error::{Error, Result};
use crate::io::{config_hash, save_checkpoint, write_csv, write_svg, Checkpoint, RngState, RunManifest};
use crate::net::{Network, NetworkSpec};
use crate::student::{FlowMapModel, STUDENT_CONDITIONS};
use crate::teacher::{TeacherRun, VelocityField};
use crate::trainer::{distill_step, BaselineState, DistillConfig, DistillState, StepRecord};

pub const TEACHER_KIND: &str = "teacher";
pub const DISTILL_KIND: &str = "distill";
pub const BASELINE_KIND: &str = "baseline";

pub fn teacher_checkpoint(run: &TeacherRun, step: usize, hash: &str) -> Checkpoint {
    let spec = run.net.spec();
    Checkpoint::new(TEACHER_KIND, step as u64, hash.to_string())
        .with_block("params", spec, &run.params)
        .with_block("ema", spec, &run.ema)
}

/// The EMA teacher stored in `ckpt`, checked against `spec`.
pub fn load_teacher(ckpt: &Checkpoint, spec: &NetworkSpec) -> Result<VelocityField> {
    let params = ckpt.params_for("ema", spec)?;
    Ok(VelocityField::Network {
        net: Network::new(spec.clone())?,
        params,
    })
}

pub fn distill_checkpoint(state: &DistillState, hash: &str) -> Checkpoint {
    let mut c = Checkpoint::new(DISTILL_KIND, state.step as u64, hash.to_string())
        .with_block("theta", state.student.net.spec(), &state.student.params)
        .with_block("theta_ema", state.student.net.spec(), &state.student.ema)
        .with_block("psi", state.aux.net.spec(), &state.aux.params);
    c.rng = Some(RngState::capture(&state.rng));
    c
}

pub fn baseline_checkpoint(state: &BaselineState, hash: &str) -> Checkpoint {
    let spec = state.student.net.spec();
    let mut c = Checkpoint::new(BASELINE_KIND, state.step as u64, hash.to_string())
        .with_block("theta", spec, &state.student.params)
        .with_block("theta_ema", spec, &state.student.ema);
    c.rng = Some(RngState::capture(&state.rng));
    c
}

/// A student with live and EMA weights from a distillation or baseline
/// checkpoint. `teacher_spec` is the teacher architecture the student was
/// grown from.
pub fn load_student(ckpt: &Checkpoint, teacher_spec: &NetworkSpec) -> Result<FlowMapModel> {
    let spec = teacher_spec.with_conditions(&STUDENT_CONDITIONS);
    let mut m = FlowMapModel::new(spec.clone(), ckpt.params_for("theta", &spec)?)?;
    m.ema = ckpt.params_for("theta_ema", &spec)?;
    Ok(m)
}

/// Spec of the auxiliary network matching `teacher_spec`.
pub fn aux_spec(teacher_spec: &NetworkSpec) -> NetworkSpec {
    teacher_spec.with_conditions(&AUX_CONDITIONS)
}

/// Runs distillation up to `cfg.steps`. When a step produces a non-finite
/// gradient the last finite state is saved to `diag` before the error is
/// returned.
pub fn distill_logged(state: &mut DistillState, teacher: &VelocityField, cfg: &DistillConfig, diag: &Path) -> Result<Vec<StepRecord>> {
    let mut records = Vec::new();
    while state.step < cfg.steps {
        match distill_step(state, teacher, cfg) {
            Ok(r) => records.push(r),
            Err(e @ Error::Diverged { .. }) => {
                save_checkpoint(diag, &distill_checkpoint(state, &config_hash(cfg)))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(records)
}

/// An output directory with its manifest. Files are registered as they are
/// written and the manifest is rewritten on every registration, so a
/// crashed run still describes what it produced.
pub struct RunDir {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn create(dir: &Path, command: &str, seed: u64, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, seed, config),
        };
        run.manifest.write(dir)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        let p = self.path(name);
        save_checkpoint(&p, ckpt)?;
        self.manifest.checkpoints.push(name.to_string());
        self.manifest.write(&self.dir)?;
        Ok(p)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.path(name);
        write_csv(&p, rows)?;
        self.register(name)?;
        Ok(p)
    }

    pub fn svg(&mut self, name: &str, svg: &str) -> Result<PathBuf> {
        let p = self.path(name);
        write_svg(&p, svg)?;
        self.register(name)?;
        Ok(p)
    }

    fn register(&mut self, name: &str) -> Result<()> {
        self.manifest.outputs.push(name.to_string());
        self.manifest.write(&self.dir)?;
        Ok(())
    }
}

/// Dataset and teacher spec implied by a config.
pub fn resolve(cfg: &RunConfig) -> Result<(Dataset2D, NetworkSpec)> {
    let ds = cfg.dataset()?;
    let spec = cfg.network.teacher_spec(&ds);
    Ok((ds, spec))
}

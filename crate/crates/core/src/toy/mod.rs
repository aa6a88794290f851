//! A small deterministic radar-camera depth task: procedural scenes, a frozen
//! teacher, a 1×1-convolution student and a gradient-descent training loop.

pub mod layers;
pub mod scene;
pub mod student;
pub mod teacher;
pub mod train;

pub use layers::{channel_project, Projection};
pub use scene::{gen_scene, Scene};
pub use student::{StudentInputs, StudentOutput, ToyModel};
pub use teacher::{Teacher, TeacherOutput};
pub use train::{train, Objective, Sample, StepRecord, TrainConfig, TrainingHistory};

use crate::error::Result;

/// Frozen teacher outputs for `scene`.
pub fn teacher_forward(scene: &Scene) -> Result<TeacherOutput> {
    Teacher::new().forward(scene)
}

/// Student outputs for `scene`.
pub fn student_forward(model: &ToyModel, scene: &Scene) -> Result<StudentOutput> {
    model.forward(&StudentInputs::new(scene)?)
}

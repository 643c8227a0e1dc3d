//! Cross-task knowledge distillation from a weakly-supervised detector
//! (the teacher) into a multi-label image classifier (the student).
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, temperature-scaled softmax/sigmoid.
//! * [`regions`]: proposals, RoI pooling, IoU and greedy NMS.
//! * [`wsdnet`]: the two-branch detection teacher.
//! * [`clsnet`]: the sigmoid classification student.
//! * [`distill`]: feature-level and prediction-level transfer.
//! * [`metrics`]: AP/mAP and F1 scores.
//! * [`datagen`]: the synthetic multi-label scene generator.
//! * [`checkpoint`], [`config`], [`pipeline`]: files and end-to-end commands.
//!
//! The guide in `book/` walks through each piece with runnable examples.

pub mod checkpoint;
pub mod clsnet;
pub mod config;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod regions;
pub mod tensor;
pub mod wsdnet;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/teacher.md")]
    mod teacher {}
    #[doc = include_str!("../../../book/src/student.md")]
    mod student {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}

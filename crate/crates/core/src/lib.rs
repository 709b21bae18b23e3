//! GBH detector engine: a small CPU tensor/autodiff core, the Ghost /
//! BottleneckCSP / Focus / SPP building blocks, four YOLOv5-family network
//! variants, decoding + NMS, CIoU training loss, a PV-defect data pipeline and
//! VOC-style evaluation.

pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

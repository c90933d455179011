//! MidState-YOLO-ED: a small from-scratch detector stack for retail
//! self-checkout scenes.
//!
//! * [`tensor`] - NCHW tensors, kernels and a reverse-mode tape
//! * [`nn`] - ConvBNSiLU, DualConv, C2f/C2f-Dual, SPPF, EMA, SCDD and the detection head
//! * [`zoo`] - detector variants, parameter/FLOP accounting, weights files
//! * [`post`] - box decoding, NMS, shopping lists and annotation
//! * [`metrics`] - precision, recall, AP and mAP
//! * [`image`] - RGB images in binary PPM
//! * [`data`] - synthetic checkout scenes, splits and label files
//! * [`train`] - target assignment, detection loss and SGD

pub mod data;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod post;
pub mod tensor;
pub mod train;
pub mod zoo;

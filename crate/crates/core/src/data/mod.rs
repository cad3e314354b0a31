//! Annotation formats, synthetic scenes and image sets.

mod dataset;
pub mod synth;
pub mod wider;

pub use dataset::{
    crop_resize, draw_boxes, hflip, load_image, resize, save_image, to_rgb8, Dataset, Sample, ANNOTATIONS,
};
pub use synth::{synth_scene, SynthScene, SynthSpec};
pub use wider::{
    format_detections, format_wider_annotations, parse_detections, parse_wider_annotations, write_detections,
    FaceAttrs, ImageRecord,
};

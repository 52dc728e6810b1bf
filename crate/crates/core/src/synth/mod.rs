//! Procedural garment triplets: garment images, captions and composites.

pub mod compose;
pub mod dataset;
pub mod garment;
pub mod image;
pub mod layout;
pub mod palette;

pub use compose::{compose_model_image, region_masks};
pub use dataset::{build_dataset, caption_for, DatasetConfig, TripletSample};
pub use garment::{make_garment, GarmentSpec, Pattern};
pub use image::{Rgb, RgbImage};
pub use layout::{BodyLayout, Region};

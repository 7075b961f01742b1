//! Datasets: synthetic generation, annotation I/O, density targets and
//! preprocessing.

pub mod density;
pub mod io;
pub mod preprocess;
pub mod synth;
mod types;

pub use density::{render_density_target, resize_density, DensityMap};
pub use io::{export_bundle, load_annotations, load_dataset, read_png, write_png};
pub use preprocess::preprocess_image;
pub use synth::{generate_synthetic_dataset, ClassSpec, SyntheticSpec};
pub use types::{BoundingBox, DatasetBundle, Image, ImageRecord, Instance, Split, SplitClasses};

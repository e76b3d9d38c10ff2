//! Face dataset ingestion, preprocessing, mask augmentation and batching.

pub mod batch;
pub mod dataset;
pub mod image_ops;
pub mod labels;
pub mod mask;
pub mod synth;

pub use batch::{batch_iter, batch_order, epoch_seed, gather_batch, Batch, BatchIter};
pub use dataset::{load_split, Dataset, InMemoryDataset, Sample, SampleSource, Split};
pub use image_ops::{decode, preprocess, resize_bilinear, resize_plane, tensor_to_image};
pub use labels::{parse_utk_filename, Ethnicity, Gender, LabelTriple};
pub use mask::{apply_mask, color_name, parse_color, MaskRanges, MaskSpec, Texture};

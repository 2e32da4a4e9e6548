//! Dataset indexing, balanced epoch planning and image preprocessing.

mod ingest;
mod preprocess;
mod record;
mod sampler;

pub use ingest::{build_index, is_image_path, Exclusion, IndexReport, LabeledRoot, SplitRule};
pub use preprocess::{
    decode_file, flip_drawn, load_and_preprocess, preprocess_from, preprocess_image, FileStore,
    ImageStore, ImageTensor, MemoryStore, PreprocessConfig, Provenance, NATURAL_IMAGE_MEANS,
    NATURAL_IMAGE_STDS,
};
pub use record::{ClassCounts, DatasetIndex, Label, SampleRecord, Split, INDEX_FORMAT_VERSION};
pub use sampler::{plan_epoch, EpochPlan, EpochSpec, PlannedBatch};

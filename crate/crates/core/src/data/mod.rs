//! Samples, synthetic generation, file formats, batch sampling and token
//! attachment.

mod attach;
mod coco;
mod export;
mod image_io;
mod sampler;
mod synth;
mod types;

pub use attach::{attach_token, select_token, selection_embedding, token_on_tape, TokenMode, TokenSelection};
pub use coco::{
    coco_box_to_cxcywh, export_coco, ingest_coco, CocoAnnotation, CocoCategory, CocoFile, CocoImage,
    IngestOptions, IngestReport, RecordError, BOX_SLACK_PX,
};
pub use export::{export_dataset, load_dataset, DatasetManifest, SampleRecord, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use image_io::{read_f32_blob, read_image, read_pgm, read_png, write_f32_blob};
pub use sampler::{Batch, ModalityBatchSampler};
pub use synth::{
    derive_seed, generate_synthetic, per_modality_counts, render_mask, Appearance, ClassSpec, DatasetSpec,
    ModalitySpec, Shape, Split, SplitCounts, TransferCurve,
};
pub use types::{cxcywh_to_xyxy, validate_box, Annotation, Catalog, ClassInfo, Sample};

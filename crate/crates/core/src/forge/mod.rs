//! Forgery corpus construction: masks, compositing, crop boxes, quota
//! sampling, rank splits, on-disk manifests and the procedural desk corpus.

pub mod bbox;
pub mod composite;
pub mod corpus;
pub mod dataset;
pub mod image;
pub mod io;
pub mod manifest;
pub mod mask;
pub mod sampling;

pub use self::bbox::{enlarge_box, BoundingBox};
pub use self::composite::composite;
pub use self::corpus::{build_desk_corpus, generate_sample, CorpusConfig};
pub use self::dataset::{load_split, verify_manifest, LoadedSample};
pub use self::image::{Image, ImageSample};
pub use self::manifest::{DatasetManifest, ManifestRecord, SourceTag, Split};
pub use self::mask::{synth_component_mask, FacialZone, ManipulationMask, Region, ShapeKind};
pub use self::sampling::{quota_sample, split_by_rank, FrameGroup};

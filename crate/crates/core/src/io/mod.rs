//! File formats: annotation/detection JSONL, tiled PPM slides, rating CSVs.

pub mod annotations;
pub mod ppm;
pub mod ratings;
pub mod slide;

pub use annotations::{
    load_annotations, load_annotations_unchecked, load_detections, parse_annotations,
    parse_annotations_unchecked, parse_detections, save_annotations, save_detections,
    write_annotations, write_detections,
};
pub use ratings::{load_ratings, parse_ratings, save_ratings, Rating, RatingTable};
pub use slide::{
    write_manifest, Manifest, Patch, PixelAccounting, SlideSource, TileFormat, BACKGROUND,
    DEFAULT_TILE_PATTERN, MANIFEST_MAGIC,
};

//! Labelled frames, polygon rasterization, fold planning, corpus IO and the
//! synthetic corpus.

pub mod contour;
pub mod folds;
pub mod frame;
pub mod io;
pub mod raster;
pub mod synth;

pub use contour::{label_components, mask_to_polygon, mask_to_polygons};
pub use folds::{make_folds, validation_split, Fold, FoldPlan};
pub use frame::{depth_byte, ColorImage, LabelClass, LabeledFrame, PolygonLabel, DEPTH_MODALITY_MAX_M};
pub use io::{
    load_color_png, load_corpus, load_depth_png, save_color_png, save_corpus, save_depth_png, save_frame, Corpus,
    CorpusManifest, FrameEntry, FrameIssue, LabelFile, CORPUS_SCHEMA_VERSION,
};
pub use raster::{point_in_polygon, rasterize, rasterize_one};
pub use synth::{
    camera_up, group_floor_color, group_name, is_trip, render_scene, sample_scene, synth_generate, ObjectKind,
    RenderTruth, RenderedFrame, Scene, SceneObject, Shape, SynthConfig, TRIP_HEIGHT_M,
};

//! Synthetic corpus generation, key-frame selection and the corpus layout.

mod generate;
mod keyframes;
mod records;

pub use generate::{
    generate, generate_corpus, GeneratorSpec, APPEARANCE_DIM, CELL_PIXELS, DIRECTIONS,
    MOTION_DIM, PREDICATES,
};
pub use keyframes::{frame_differences, select_keyframes, top_by_score};
pub use records::{
    parse_manifest, parse_scene_graph_line, parse_scene_graphs, scene_graphs_to_jsonl, Corpus,
    FeatureGrid, FrameRegions, FrameSceneGraph, Manifest, ManifestEntry, SceneClasses,
    SceneObject, SceneTriplet, VideoRecord, LEXICON_FILE, MANIFEST_FILE, SCENE_CLASSES_FILE,
    SYNONYM_FILE,
};
pub use crate::cmgf::{read_feature_file, write_feature_file};

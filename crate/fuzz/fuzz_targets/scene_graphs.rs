#![no_main]
use cmg::datagen::{parse_scene_graphs, scene_graphs_to_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(graphs) = parse_scene_graphs(text) {
        let again = parse_scene_graphs(&scene_graphs_to_jsonl(&graphs)).expect("re-parses");
        assert_eq!(again.len(), graphs.len());
    }
});

#![no_main]
use cmg::datagen::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text) {
            for v in &m.videos {
                assert!(!v.id.is_empty() && !v.id.contains('/'));
            }
        }
    }
});

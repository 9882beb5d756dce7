#![no_main]
use cmg::corpus::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::parse(text) {
        let again = Vocabulary::parse(&v.to_text()).expect("re-parses");
        assert_eq!(again.len(), v.len());
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), id);
        }
    }
});

#![no_main]
use cmg::corpus::{format_synonym_table, parse_synonym_table, SynonymTable};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pairs) = parse_synonym_table(text) {
        assert_eq!(parse_synonym_table(&format_synonym_table(&pairs)).expect("re-parses"), pairs);
        let table = SynonymTable::new(&pairs);
        for (member, _) in &pairs {
            let _ = table.canonical(member);
        }
    }
});

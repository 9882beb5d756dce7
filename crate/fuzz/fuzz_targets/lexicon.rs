#![no_main]
use cmg::corpus::{parse_lexicon, tokenize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for word in parse_lexicon(text) {
        assert!(!word.is_empty());
    }
    for tok in tokenize(text) {
        assert!(!tok.is_empty() && !tok.contains(char::is_whitespace));
    }
});

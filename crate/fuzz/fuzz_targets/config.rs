#![no_main]
use cmg::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = Config::parse(text) {
        assert_eq!(Config::parse(&c.to_toml()).expect("re-parses"), c);
    }
});

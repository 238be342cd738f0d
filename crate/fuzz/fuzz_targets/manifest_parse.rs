#![no_main]
use hsn_core::data::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            let back = Manifest::parse(&m.to_json()).expect("printed manifest parses");
            assert_eq!(back, m);
        }
    }
});

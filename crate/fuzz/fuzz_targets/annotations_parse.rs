#![no_main]
use hsn_core::data::manifest::{format_annotations, parse_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(labels) = parse_annotations(text) {
            assert_eq!(parse_annotations(&format_annotations(&labels)), Ok(labels));
        }
    }
});

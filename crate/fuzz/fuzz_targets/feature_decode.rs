#![no_main]
use hsn_core::data::feature::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok((tensor, precision)) = decode(data) {
        let again = encode(&tensor, precision).expect("decoded tensor encodes");
        assert_eq!(again.len(), data.len());
        let (back, _) = decode(&again).expect("re-encoded bytes decode");
        assert_eq!(back.shape(), tensor.shape());
    }
});

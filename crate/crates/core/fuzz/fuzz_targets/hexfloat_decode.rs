#![no_main]

use fusionlab::hexfloat::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Some(x) = decode(text) {
        assert_eq!(encode(x), text);
    }
});

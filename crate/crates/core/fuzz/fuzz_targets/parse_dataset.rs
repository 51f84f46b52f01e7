#![no_main]

use fusionlab::dataset::{parse_dataset, render_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((header, samples)) = parse_dataset(text) {
        let rendered = render_dataset(&header, &samples);
        let (h2, s2) = parse_dataset(&rendered).expect("rendered dataset parses");
        assert_eq!(render_dataset(&h2, &s2), rendered);
    }
});

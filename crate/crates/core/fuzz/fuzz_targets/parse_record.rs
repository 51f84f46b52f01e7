#![no_main]

use fusionlab::dataset::{parse_record, render_record};
use fusionlab::types::validate_sample;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(sample) = parse_record(text, 1) {
        // Indices were range-checked, so validation must not panic, and a
        // clean sample must support the accessors callers rely on.
        if validate_sample(&sample).is_empty() {
            let _ = sample.global_best();
        }
        let line = render_record(&sample);
        let again = parse_record(&line, 1).expect("rendered record parses");
        assert_eq!(render_record(&again), line);
    }
});

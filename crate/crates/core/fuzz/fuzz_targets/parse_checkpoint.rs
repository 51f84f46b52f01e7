#![no_main]

use fusionlab::tinylm::{parse_checkpoint, render_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ck) = parse_checkpoint(text) {
        // Whatever parses must survive a render and re-parse unchanged.
        let rendered = render_checkpoint(&ck.model, ck.digest.as_deref());
        let again = parse_checkpoint(&rendered).expect("rendered checkpoint parses");
        assert_eq!(render_checkpoint(&again.model, again.digest.as_deref()), rendered);
    }
});

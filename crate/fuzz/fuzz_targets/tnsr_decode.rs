#![no_main]

use libfuzzer_sys::fuzz_target;
use streetscape_core::tnsr::Tnsr;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(t) = Tnsr::decode(data) {
        assert_eq!(t.encode(), data);
    }
});

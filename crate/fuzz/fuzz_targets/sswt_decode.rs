#![no_main]

use libfuzzer_sys::fuzz_target;
use streetscape_model::ModelWeights;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = ModelWeights::decode(data) {
        let again = ModelWeights::decode(&w.encode()).expect("re-encoded weights decode");
        assert_eq!(again.encode(), w.encode());
    }
});

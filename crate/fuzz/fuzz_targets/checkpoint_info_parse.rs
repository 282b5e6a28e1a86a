#![no_main]

use libfuzzer_sys::fuzz_target;
use streetscape_model::train::CheckpointInfo;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(info) = CheckpointInfo::parse(text) {
        let again = CheckpointInfo::parse(&info.to_text()).expect("printed info parses");
        assert_eq!(again.to_text(), info.to_text());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use streetscape_scene::SceneLayout;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(layout) = SceneLayout::parse(text) {
        let again = SceneLayout::parse(&layout.to_text()).expect("printed layout parses");
        assert_eq!(again.to_text(), layout.to_text());
    }
});

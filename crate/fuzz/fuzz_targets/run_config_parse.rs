#![no_main]

use libfuzzer_sys::fuzz_target;
use streetscape_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        // Typed accessors must reject bad values, not panic.
        let _ = cfg.world_spec();
        let _ = cfg.dataset_spec();
        let _ = cfg.backbone();
        let _ = cfg.schedule();
        let _ = cfg.sampler(2, 0, &[]);
        let _ = cfg.stage();
        let _ = cfg.hash();
    }
});

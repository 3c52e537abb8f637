#![no_main]

use gearshift_core::config::{parse, LearningConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse::<LearningConfig>(text) {
        let _ = cfg.validate();
    }
});

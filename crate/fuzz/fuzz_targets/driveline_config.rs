#![no_main]
//! Driveline TOML: parsing never panics, and an accepted config either
//! calibrates or reports an error.

use gearshift_core::config::{parse, DrivelineConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = parse::<DrivelineConfig>(text) else { return };
    let _ = cfg.calibrated();
});

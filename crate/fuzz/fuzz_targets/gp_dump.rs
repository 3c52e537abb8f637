#![no_main]

use gearshift_core::gp::GpDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(dump) = GpDump::parse(text) else { return };
    let again = GpDump::parse(&dump.to_text()).expect("written dump parses");
    assert_eq!(dump, again);
});

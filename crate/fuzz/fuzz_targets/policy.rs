#![no_main]
//! Policy dumps: parsing never panics and accepted policies survive a
//! write/read round trip unchanged.

use gearshift_core::controller::PolicyParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(p) = PolicyParams::parse(text) else { return };
    let again = PolicyParams::parse(&p.to_text()).expect("written policy parses");
    assert_eq!(p.to_array().map(f64::to_bits), again.to_array().map(f64::to_bits));
});

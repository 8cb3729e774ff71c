//! Manifest parsing must reject arbitrary bytes with an error, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = qsvd::store::parse_manifest_bytes(data);
});

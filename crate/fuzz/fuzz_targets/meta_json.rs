//! Compressed-model metadata parsing must never panic on arbitrary bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = qsvd::compressed::parse_meta_bytes(data);
});

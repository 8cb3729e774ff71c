//! Full container loading (manifest + tensor blob) on arbitrary byte
//! pairs: every failure mode must surface as an error, never a panic or
//! an out-of-bounds read.

#![no_main]

use libfuzzer_sys::fuzz_target;

// Input layout: 4-byte little-endian manifest length, manifest bytes,
// then the tensor blob.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let split = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    let rest = &data[4..];
    if split > rest.len() {
        return;
    }
    let (manifest, blob) = rest.split_at(split);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), manifest).unwrap();
    std::fs::write(dir.path().join("tensors.bin"), blob).unwrap();
    let _ = qsvd::store::load_container(dir.path());
});

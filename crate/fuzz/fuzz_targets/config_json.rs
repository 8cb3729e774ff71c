//! Pipeline config files come from users; parsing and validation must
//! fail cleanly, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use qsvd::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<PipelineConfig>(data) {
        let _ = cfg.validate();
        // A config that parses and validates must survive a round trip.
        let json = serde_json::to_vec(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_slice(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }
});

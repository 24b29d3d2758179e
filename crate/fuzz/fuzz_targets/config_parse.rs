#![no_main]

use libfuzzer_sys::fuzz_target;
use ratetip::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json_str(s) {
            // Anything accepted must survive a round trip.
            let back = RunConfig::from_json_str(&cfg.to_json()).expect("round trip");
            assert_eq!(format!("{back:?}"), format!("{cfg:?}"));
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use ratetip::io::read_path_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = read_path_csv(s);
    }
});

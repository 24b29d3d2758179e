#![no_main]

use libfuzzer_sys::fuzz_target;
use ratetip::io::CsvTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(t) = CsvTable::parse(s) {
            let _ = t.numbers();
        }
    }
});

#![no_main]

use archdistill::distill::LogitDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = LogitDataset::parse(data) {
        let mut text = Vec::new();
        set.write_text(&mut text).unwrap();
        assert_eq!(LogitDataset::parse(&text).unwrap(), set);
    }
});

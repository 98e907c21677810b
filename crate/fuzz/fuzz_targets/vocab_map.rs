#![no_main]

use archdistill::distill::VocabMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = VocabMap::from_json_slice(data) {
        for &id in map.kept.iter().take(64) {
            assert!((map.map_id(id) as usize) < map.student_vocab);
        }
    }
});

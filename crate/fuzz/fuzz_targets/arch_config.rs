#![no_main]

use archdistill::{ArchConfig, SearchSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = ArchConfig::from_json_slice(data) {
        if SearchSpace::default_table1().validate(&cfg).is_ok() {
            let _ = archdistill::estimators::model_size(&cfg, 4);
        }
    }
});

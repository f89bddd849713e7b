#![no_main]

use libfuzzer_sys::fuzz_target;
use tvcgmm::data::read_long_dataset_from;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_long_dataset_from(data) {
        assert!(ds.validate().is_ok());
    }
});

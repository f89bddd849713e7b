#![no_main]

use libfuzzer_sys::fuzz_target;
use tvcgmm::data::{read_dataset_from, write_dataset_to};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_dataset_from(data) {
        // Anything accepted must survive a write/read cycle unchanged.
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset_from(buf.as_slice()).unwrap(), ds);
    }
});

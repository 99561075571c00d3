#![no_main]

use libfuzzer_sys::fuzz_target;
use weaksep_core::container::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        let again = c.encode();
        assert_eq!(Container::decode(&again).unwrap().encode(), again);
    }
});

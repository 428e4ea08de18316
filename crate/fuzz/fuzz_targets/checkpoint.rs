#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = crt6d::refiner::checkpoint_from_bytes(data);
});

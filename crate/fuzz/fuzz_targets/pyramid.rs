#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = crt6d::pyramid::pyramid_from_bytes(data);
});

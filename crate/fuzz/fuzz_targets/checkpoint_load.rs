//! Checkpoint deserialization must reject arbitrary bytes without panicking
//! or allocating absurdly.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = erann::checkpoint::checkpoint_from_bytes(data);
});

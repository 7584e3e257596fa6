#![no_main]

use libfuzzer_sys::fuzz_target;
use quadbench::dynamics::PhysParams;
use quadbench::trajgen::read_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(traj) = read_csv(data, &PhysParams::default(), "fuzz") {
        let _ = traj.at(traj.duration() * 0.5);
    }
});

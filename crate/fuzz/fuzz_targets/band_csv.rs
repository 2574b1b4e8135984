#![no_main]

use dkf::banded::BandProfile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(b) = BandProfile::from_csv(data) {
        let text = b.to_csv();
        let again = BandProfile::from_csv(&text).expect("serialized band parses");
        assert_eq!(again.to_csv(), text);
    }
});

#![no_main]
use cmg::cmgf::FeatureTensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = FeatureTensor::from_bytes(data) {
        // Whatever decodes must re-encode to the same bytes.
        assert_eq!(t.to_bytes(), data);
        let n: usize = t.dims().iter().product();
        assert_eq!(t.data().len(), n);
    }
});

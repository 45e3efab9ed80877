#![no_main]

use arfdx::models::TrainedModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = TrainedModel::from_checkpoint_json(text) {
        assert_eq!(model.params.0.len(), model.spec.n_params());
    }
});

mod support;

use relage_core::diffcore::FdOptions;
use support::{fd_check_model, toy_model};

#[test]
fn every_block_and_the_input_agree_with_central_differences() {
    for seed in [1, 8, 11] {
        let (params, graphs, x) = toy_model(seed);
        let reports = fd_check_model(&params, &graphs, &x, &FdOptions::new(1e-5, 1e-4));
        assert_eq!(reports.len(), 25);
        for (name, r) in &reports {
            assert!(r.checked > 0, "{name}: every coordinate skipped");
            assert!(r.passed, "seed {seed} {name}: max rel {:e} at {:?}", r.max_rel_error, r.worst);
        }
    }
}

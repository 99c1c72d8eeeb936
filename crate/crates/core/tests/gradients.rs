mod common;

use common::{micro_model_gradient_error, op_gradient_error, OPS};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[test]
fn every_op_matches_central_differences() {
    for op in OPS {
        for seed in 0..100 {
            let err = op_gradient_error(op, seed);
            assert!(err < 1e-6, "{op} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn micro_model_matches_central_differences() {
    for seed in 0..8 {
        let err = micro_model_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

mod common;

use common::suite::{layers, primitives, Maker};
use common::{check_many, REL_TOL};

const INSTANCES: usize = 20;

fn run(list: Vec<(&'static str, Maker)>, only: &str) {
    let (name, make) = list
        .into_iter()
        .find(|(n, _)| *n == only)
        .expect("known primitive");
    let worst = check_many(name, INSTANCES, make);
    assert!(worst < REL_TOL, "{name}: worst relative error {worst:e}");
}

macro_rules! grad_tests {
    ($list:ident: $($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                run($list(), stringify!($name));
            }
        )*
    };
}

grad_tests!(primitives:
    matmul, add_last, channel_bias, add, sub, mul, scale, sigmoid, tanh, softplus, square, relu,
    concat, slice, reshape, normalize_last, softmax_last, batched_dot, weighted_sum, conv2d, mean,
    sum, mse,
);

grad_tests!(layers:
    linear, conv2d_layer, lstm_step, convlstm_step, summary_head, mlp_mixing, ame_location,
    ame_hidden, saliency_fcn,
);

#[test]
fn suite_is_fully_covered() {
    assert_eq!(primitives().len(), 23);
    assert_eq!(layers().len(), 9);
}

#[test]
fn oracle_flags_a_detached_path() {
    use fovcast_core::neural::Tensor;
    let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    // The second factor re-enters as a constant, so the tape sees half the slope.
    let f: Box<common::Program> = Box::new(|g, v| {
        let copy = g.constant(g.value(v[0]).clone());
        g.mul(v[0], copy)
    });
    let err = common::max_rel_error(&[x], f.as_ref(), 1);
    assert!(err > 0.4, "{err}");
}

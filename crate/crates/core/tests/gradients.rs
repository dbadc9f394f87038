mod common;

use std::time::Instant;

use common::{grad_check, param_grad_check, project, uniform};
use flowcast::autodiff::conv;
use flowcast::flownet::{FlowNet, FlowNetConfig};
use flowcast::loss::{seg_loss, smooth_l1, SmoothL1Mode};
use flowcast::lstm::{ConvLstm, FlowHead};
use flowcast::autodiff::Var;
use flowcast::params::{Binder, ParamBuilder, ParamStore};
use flowcast::segmap::{LabelMap, VOID};
use flowcast::warp::warp;
use flowcast::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Flow component whose fractional part stays in [0.15, 0.85], away from
/// the integer lattice where bilinear sampling has kinks.
fn off_lattice(rng: &mut ChaCha8Rng, reach: i32) -> f64 {
    let whole = rng.gen_range(-reach..=reach) as f64;
    whole + rng.gen_range(0.15..0.85)
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(rng, &shape, -scale, scale)).unwrap();
    }
}

#[test]
fn warp_matches_central_differences_on_random_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=6);
        let w = rng.gen_range(3..=6);
        let features = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let mut flow = Tensor::zeros(&[1, 2, h, w]);
        for v in flow.data_mut() {
            *v = off_lattice(&mut rng, 2);
        }
        let r = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let err = grad_check(&[features, flow], 1e-6, |_, v| project(warp(v[0], v[1]).unwrap().0, &r));
        worst = worst.max(err);
    }
    assert!(worst < TOL, "worst relative error {worst:e}");
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn conv_gradients_and_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = uniform(&mut rng, &[1, 2, 7, 5], -1.0, 1.0);
        let wt = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[3], -1.0, 1.0);
        let geom = conv::ConvGeometry { stride, pad };
        let y = conv::forward(&x, &wt, &b, geom).unwrap();
        let (_, co, ho, wo) = y.dims4().unwrap();
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let yi = (i * stride + ki) as i64 - pad as i64;
                                let xj = (j * stride + kj) as i64 - pad as i64;
                                if yi < 0 || xj < 0 || yi >= 7 || xj >= 5 {
                                    continue;
                                }
                                acc += wt.at4(o, ci, ki, kj) * x.at4(0, ci, yi as usize, xj as usize);
                            }
                        }
                    }
                    assert!((y.at4(0, o, i, j) - acc).abs() < 1e-12);
                }
            }
        }
        let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
        let err = grad_check(&[x, wt, b], 1e-6, |_, v| project(v[0].conv2d(v[1], v[2], stride, pad).unwrap(), &r));
        assert!(err < TOL, "stride {stride} pad {pad}: {err:e}");
    }
}

#[test]
fn seg_loss_gradient_through_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = uniform(&mut rng, &[1, 4, 3, 5], -2.0, 2.0);
    let mut labels: Vec<u8> = (0..15).map(|_| rng.gen_range(0..4)).collect();
    labels[3] = VOID;
    let gt = LabelMap::new(3, 5, labels).unwrap();
    let err = grad_check(&[logits], 1e-6, |_, v| seg_loss(v[0].softmax_channels().unwrap(), &gt).unwrap().loss);
    assert!(err < TOL, "{err:e}");
}

#[test]
fn smooth_l1_gradient_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = uniform(&mut rng, &[1, 2, 3, 3], -3.0, 3.0);
    let mut b = a.clone();
    for v in b.data_mut() {
        // keep |d| away from the branch point at 1
        let d: f64 = if rng.gen_bool(0.5) {
            rng.gen_range(0.05..0.8)
        } else {
            rng.gen_range(1.2..2.5)
        };
        *v += if rng.gen_bool(0.5) { d } else { -d };
    }
    for mode in [SmoothL1Mode::PerElement, SmoothL1Mode::SummedDistance] {
        let err = grad_check(&[a.clone(), b.clone()], 1e-6, |_, v| smooth_l1(v[0], v[1], mode).unwrap());
        assert!(err < TOL, "{mode:?}: {err:e}");
    }
}

#[test]
fn flow_network_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let net = FlowNet::build(
        &mut ParamBuilder::fresh(&mut store, ChaCha8Rng::seed_from_u64(1)),
        FlowNetConfig {
            width1: 2,
            width2: 2,
            features: 2,
        },
    )
    .unwrap();
    randomize(&mut store, &mut rng, 0.6);
    let a = uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let b = uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let r = uniform(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
    let err = param_grad_check(&store, 1e-6, |p| {
        let t = p.tape();
        let out = net.forward(p, t.constant(a.clone()), t.constant(b.clone())).unwrap();
        project(out.flow, &r)
    });
    assert!(err < TOL, "{err:e}");
}

#[test]
fn three_step_lstm_backpropagation_through_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let (lstm, head) = {
        let mut b = ParamBuilder::fresh(&mut store, ChaCha8Rng::seed_from_u64(2));
        (ConvLstm::build(&mut b, 2, 2).unwrap(), FlowHead::build(&mut b, 2).unwrap())
    };
    randomize(&mut store, &mut rng, 0.8);
    let xs: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)).collect();
    let r = uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    fn run<'t>(lstm: &ConvLstm, head: &FlowHead, p: &Binder<'t, '_>, inputs: &[Var<'t>]) -> Var<'t> {
        let mut state = None;
        for &x in inputs {
            state = Some(lstm.step(p, x, state).unwrap());
        }
        head.forward(p, state.unwrap().hidden).unwrap()
    }
    let err = param_grad_check(&store, 1e-6, |p| {
        let t = p.tape();
        let inputs: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
        project(run(&lstm, &head, p, &inputs), &r)
    });
    assert!(err < TOL, "parameters: {err:e}");

    let err = grad_check(&xs, 1e-6, |t, v| {
        let p = Binder::frozen(t, &store);
        project(run(&lstm, &head, &p, v), &r)
    });
    assert!(err < TOL, "inputs: {err:e}");
}

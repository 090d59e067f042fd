//! Tape gradients of the training losses against central finite differences.

use ecm_core::datagen::{generate_dataset, GenOptions};
use ecm_core::nn::{Network, NetworkSpec, SplitConvNet, ToyMlp, WeightHead};
use ecm_core::params::{ParamStore, Tensor};
use ecm_core::tape::{Gradients, Graph};
use ecm_core::training::{
    consistency_channels, pretrain_loss, stage1_loss, stage2_loss_with_teacher, Physics, SAWeights, Stage2Batch,
    TrainConfig,
};
use ecm_core::{ConsistencyModel, Grid2D, ManifoldSpec, PdeKind, Phase};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Picks `count` (param, flat index) pairs among trainable parameters.
fn probes(store: &ParamStore, rng: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize)> {
    let trainable: Vec<usize> = store.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect();
    (0..count)
        .map(|_| {
            let i = trainable[rng.random_range(0..trainable.len())];
            (i, rng.random_range(0..store.get(i).value.len()))
        })
        .collect()
}

/// Worst relative error between tape and central-difference derivatives.
fn compare(
    grads: &Gradients,
    base: &ParamStore,
    probes: &[(usize, usize)],
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(i, k) in probes {
        let analytic = grads.param(base.key(i)).map_or(0.0, |g| g.as_slice().unwrap()[k]);
        let mut shifted = |d: f64| {
            let mut s = base.clone();
            s.value_mut(i).as_slice_mut().unwrap()[k] += d;
            eval(&s)
        };
        let fd = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
        num += (analytic - fd).powi(2);
        den += fd.powi(2);
    }
    (num / den).sqrt()
}

#[test]
fn stage2_toy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = ManifoldSpec::circle();
    let model = ConsistencyModel::new(ToyMlp::build(&NetworkSpec::toy_default(2)).unwrap(), 1.0);
    let teacher = ConsistencyModel::new(model.net.clone(), 1.0);
    let cfg = TrainConfig::for_phase(Phase::Stage2);
    let sa = SAWeights::new([0.5, -0.3, 0.2]);
    let x0 = spec.sample(&mut rng, 6);
    let batch = Stage2Batch::draw(&mut rng, x0, 1.0, &cfg);
    let physics = Physics::Manifold(spec);
    let channels = consistency_channels(&model.net, cfg.phase);
    let g = Graph::new();
    let terms = stage2_loss_with_teacher(&g, &model, &teacher, &sa, &batch, &physics, channels, &cfg).unwrap();
    let grads = g.backward(terms.total);
    let picks = probes(model.net.store(), &mut rng, 24);
    let rel = compare(&grads, model.net.store(), &picks, |s| {
        let mut m = ConsistencyModel::new(model.net.clone(), 1.0);
        *m.net.store_mut() = s.clone();
        let g = Graph::no_grad();
        stage2_loss_with_teacher(&g, &m, &teacher, &sa, &batch, &physics, channels, &cfg)
            .unwrap()
            .total
            .item()
    });
    assert!(rel < 1e-3, "relative error {rel:.2e}");
}

#[test]
fn stage2_darcy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 8;
    let data = generate_dataset(PdeKind::Darcy, 4, Grid2D::new(n).unwrap(), 3, &GenOptions::default()).unwrap();
    let x0 = data.batch(&[0, 1], &data.norm_stats);
    let mut net = SplitConvNet::build(&NetworkSpec::SplitConv {
        n,
        widths: [4, 8, 8],
        temb_dim: 8,
        seed: 5,
    })
    .unwrap();
    net.activate_split();
    net.freeze_backbone();
    let model = ConsistencyModel::new(net, 1.0);
    let teacher = ConsistencyModel::new(model.net.clone(), 1.0);
    let cfg = TrainConfig::for_phase(Phase::Stage2);
    let sa = SAWeights::new([0.1, 0.4, -0.2]);
    let batch = Stage2Batch::draw(&mut rng, x0, 1.0, &cfg);
    let physics = Physics::Pde {
        kind: PdeKind::Darcy,
        stats: data.norm_stats,
        n,
    };
    let channels = consistency_channels(&model.net, cfg.phase);
    let g = Graph::new();
    let terms = stage2_loss_with_teacher(&g, &model, &teacher, &sa, &batch, &physics, channels, &cfg).unwrap();
    let grads = g.backward(terms.total);
    let picks = probes(model.net.store(), &mut rng, 24);
    let rel = compare(&grads, model.net.store(), &picks, |s| {
        let mut m = ConsistencyModel::new(model.net.clone(), 1.0);
        *m.net.store_mut() = s.clone();
        let g = Graph::no_grad();
        stage2_loss_with_teacher(&g, &m, &teacher, &sa, &batch, &physics, channels, &cfg)
            .unwrap()
            .total
            .item()
    });
    assert!(rel < 1e-3, "relative error {rel:.2e}");
}

#[test]
fn pretrain_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = ConsistencyModel::new(ToyMlp::build(&NetworkSpec::toy_default(4)).unwrap(), 1.0);
    let x0 = randn(&mut rng, &[5, 2]);
    let z = randn(&mut rng, &[5, 2]);
    let t: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.5)).collect();
    let g = Graph::new();
    let grads = g.backward(pretrain_loss(&g, &model, &x0, &z, &t).unwrap());
    let picks = probes(model.net.store(), &mut rng, 24);
    let rel = compare(&grads, model.net.store(), &picks, |s| {
        let mut m = ConsistencyModel::new(model.net.clone(), 1.0);
        *m.net.store_mut() = s.clone();
        let g = Graph::no_grad();
        pretrain_loss(&g, &m, &x0, &z, &t).unwrap().item()
    });
    assert!(rel < 1e-3, "relative error {rel:.2e}");
}

#[test]
fn stage1_weight_head_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let model = ConsistencyModel::new(ToyMlp::build(&NetworkSpec::toy_default(6)).unwrap(), 1.0);
    let mut head = WeightHead::new(7);
    head.set_trainable(true);
    // move the head off its zero initialization so every path is exercised
    for i in 0..head.store().len() {
        let v = head.store_mut().value_mut(i);
        let noise = randn(&mut rng, v.shape()) * 0.3;
        *v += &noise;
    }
    let cfg = TrainConfig::for_phase(Phase::Stage1);
    let x0 = randn(&mut rng, &[6, 2]);
    let z = randn(&mut rng, &[6, 2]);
    let t: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.5)).collect();
    let g = Graph::new();
    let terms = stage1_loss(&g, &model, &head, &x0, &z, &t, &cfg).unwrap().unwrap();
    let grads = g.backward(terms.total);
    let picks = probes(head.store(), &mut rng, 16);
    let rel = compare(&grads, head.store(), &picks, |s| {
        let mut h = head.clone();
        *h.store_mut() = s.clone();
        let g = Graph::no_grad();
        stage1_loss(&g, &model, &h, &x0, &z, &t, &cfg).unwrap().unwrap().total.item()
    });
    assert!(rel < 1e-3, "relative error {rel:.2e}");
}

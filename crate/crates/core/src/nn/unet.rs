//! Two-level convolutional encoder/decoder with a shared encoder and two
//! structurally identical decoders.
//!
//! The `a` decoder produces both output channels while the net is unified
//! (pretraining and the first consistency stage). After
//! [`SplitConvNet::activate_split`] the `u` decoder is a copy of the `a`
//! decoder and the output becomes `[a-channel of D_a, u-channel of D_u]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{add_linear, fourier_features, init_uniform, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Graph, Var};

type Pair = (usize, usize);

fn groups_for(c: usize) -> usize {
    let mut g = 8.min(c);
    while c % g != 0 {
        g -= 1;
    }
    g
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Pair,
    conv1: Pair,
    temb: Pair,
    norm2: Pair,
    conv2: Pair,
    skip: Option<Pair>,
    cin: usize,
    cout: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    tdim: usize,
}

impl Builder<'_> {
    fn norm(&mut self, name: &str, group: ParamGroup, c: usize) -> Pair {
        let g = self.store.add(format!("{name}.g"), group, ndarray::ArrayD::ones(vec![c]));
        let b = self.store.add(format!("{name}.b"), group, ndarray::ArrayD::zeros(vec![c]));
        (g, b)
    }

    fn conv(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize, gain: f64) -> Pair {
        let fan = cin * 9;
        let w = self.store.add(format!("{name}.w"), group, init_uniform(self.rng, &[cout, cin, 3, 3], fan, gain));
        let b = self.store.add(format!("{name}.b"), group, init_uniform(self.rng, &[cout], fan, gain));
        (w, b)
    }

    fn res(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.n1"), group, cin),
            conv1: self.conv(&format!("{name}.c1"), group, cin, cout, 1.0),
            temb: add_linear(self.store, self.rng, &format!("{name}.t"), group, self.tdim, cout, 1.0),
            norm2: self.norm(&format!("{name}.n2"), group, cout),
            conv2: self.conv(&format!("{name}.c2"), group, cout, cout, 1.0),
            skip: (cin != cout).then(|| add_linear(self.store, self.rng, &format!("{name}.s"), group, cin, cout, 1.0)),
            cin,
            cout,
        }
    }
}

impl ResBlock {
    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>, temb: Var<'g>) -> Var<'g> {
        let p = |i: usize| g.param(s, i);
        let h = x
            .group_norm(p(self.norm1.0), p(self.norm1.1), groups_for(self.cin))
            .silu()
            .conv3x3(p(self.conv1.0), p(self.conv1.1));
        let h = h.add_channel_bias(temb.linear(p(self.temb.0), p(self.temb.1)));
        let h = h
            .group_norm(p(self.norm2.0), p(self.norm2.1), groups_for(self.cout))
            .silu()
            .conv3x3(p(self.conv2.0), p(self.conv2.1));
        let skip = match self.skip {
            Some((w, b)) => x.conv1x1(p(w), p(b)),
            None => x,
        };
        h.add(skip)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    mid: ResBlock,
    up2: ResBlock,
    up1: ResBlock,
    out_norm: Pair,
    out_conv: Pair,
    c1: usize,
}

impl Decoder {
    fn build(b: &mut Builder<'_>, prefix: &str, group: ParamGroup, w: [usize; 3]) -> Self {
        let [c1, c2, c3] = w;
        Decoder {
            mid: b.res(&format!("{prefix}.mid"), group, c3, c3),
            up2: b.res(&format!("{prefix}.up2"), group, c3 + c2, c2),
            up1: b.res(&format!("{prefix}.up1"), group, c2 + c1, c1),
            out_norm: b.norm(&format!("{prefix}.out_n"), group, c1),
            out_conv: b.conv(&format!("{prefix}.out_c"), group, c1, 2, 0.1),
            c1,
        }
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, enc: &Encoded<'g>) -> Var<'g> {
        let h = self.mid.forward(g, s, enc.h3, enc.temb);
        let h = Var::concat(&[h.upsample2(), enc.s2]);
        let h = self.up2.forward(g, s, h, enc.temb);
        let h = Var::concat(&[h.upsample2(), enc.s1]);
        let h = self.up1.forward(g, s, h, enc.temb);
        h.group_norm(g.param(s, self.out_norm.0), g.param(s, self.out_norm.1), groups_for(self.c1))
            .silu()
            .conv3x3(g.param(s, self.out_conv.0), g.param(s, self.out_conv.1))
    }
}

struct Encoded<'g> {
    temb: Var<'g>,
    s1: Var<'g>,
    s2: Var<'g>,
    h3: Var<'g>,
}

/// Split-decoder U-Net on `[B, 2, n, n]` states.
#[derive(Debug, Clone)]
pub struct SplitConvNet {
    spec: NetworkSpec,
    store: ParamStore,
    n: usize,
    freqs: Vec<f64>,
    t1: Pair,
    t2: Pair,
    in_conv: Pair,
    rb1: ResBlock,
    rb2: ResBlock,
    rb3: ResBlock,
    dec_a: Decoder,
    dec_u: Decoder,
    split: bool,
    frozen_checksum: Option<String>,
}

const FROZEN: [ParamGroup; 2] = [ParamGroup::Encoder, ParamGroup::DecoderA];

impl SplitConvNet {
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let NetworkSpec::SplitConv { n, widths, temb_dim, seed } = *spec else {
            return Err(Error::Network("not a split_conv spec".into()));
        };
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tdim = 2 * widths[0];
        let half = temb_dim / 2;
        // geometric frequencies from 1 to 50 rad per unit time
        let freqs: Vec<f64> = (0..half)
            .map(|k| 50f64.powf(k as f64 / (half.max(2) - 1) as f64))
            .collect();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            tdim,
        };
        let enc = ParamGroup::Encoder;
        let t1 = add_linear(b.store, b.rng, "enc.t1", enc, temb_dim, tdim, 1.0);
        let t2 = add_linear(b.store, b.rng, "enc.t2", enc, tdim, tdim, 1.0);
        let in_conv = b.conv("enc.in", enc, 2, widths[0], 1.0);
        let rb1 = b.res("enc.rb1", enc, widths[0], widths[0]);
        let rb2 = b.res("enc.rb2", enc, widths[0], widths[1]);
        let rb3 = b.res("enc.rb3", enc, widths[1], widths[2]);
        let dec_a = Decoder::build(&mut b, "dec_a", ParamGroup::DecoderA, widths);
        let dec_u = Decoder::build(&mut b, "dec_u", ParamGroup::DecoderU, widths);
        let mut net = Self {
            spec: spec.clone(),
            store,
            n,
            freqs,
            t1,
            t2,
            in_conv,
            rb1,
            rb2,
            rb3,
            dec_a,
            dec_u,
            split: false,
            frozen_checksum: None,
        };
        net.copy_decoder();
        net.store.set_group_trainable(ParamGroup::DecoderU, false);
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn is_split(&self) -> bool {
        self.split
    }

    /// Overwrites every `dec_u` parameter with its `dec_a` counterpart.
    pub fn copy_decoder(&mut self) {
        let pairs: Vec<(usize, usize)> = self
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::DecoderU)
            .map(|(i, p)| {
                let src = p.name.replacen("dec_u", "dec_a", 1);
                (i, self.store.find(&src).expect("decoders are built identically"))
            })
            .collect();
        for (dst, src) in pairs {
            let v = (**self.store.value(src)).clone();
            *self.store.value_mut(dst) = v;
        }
    }

    /// Copies `D_a` into `D_u` and switches to the partitioned output.
    pub fn activate_split(&mut self) {
        if !self.split {
            self.copy_decoder();
            self.split = true;
        }
        self.store.set_group_trainable(ParamGroup::DecoderU, true);
    }

    /// Restores the partition flag when loading a checkpoint.
    pub(crate) fn set_split_flag(&mut self, split: bool) {
        self.split = split;
    }

    /// Marks encoder and `D_a` non-trainable and records their checksum.
    pub fn freeze_backbone(&mut self) {
        for gr in FROZEN {
            self.store.set_group_trainable(gr, false);
        }
        if self.frozen_checksum.is_none() {
            self.frozen_checksum = Some(self.backbone_checksum());
        }
    }

    /// Re-enables training of every group (joint-training ablation only).
    pub fn unfreeze_all(&mut self) {
        log::info!("unfreezing encoder and coefficient decoder for the joint ablation");
        for gr in FROZEN {
            self.store.set_group_trainable(gr, true);
        }
        if self.split {
            self.store.set_group_trainable(ParamGroup::DecoderU, true);
        }
        self.frozen_checksum = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_checksum.is_some()
    }

    pub fn backbone_checksum(&self) -> String {
        self.store.checksum(&FROZEN)
    }

    pub fn frozen_checksum(&self) -> Option<&str> {
        self.frozen_checksum.as_deref()
    }

    pub(crate) fn set_frozen_checksum(&mut self, c: Option<String>) {
        self.frozen_checksum = c;
    }

    /// Names of parameters the optimizer may update.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut v: Vec<ParamGroup> = self
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.group)
            .collect();
        v.dedup();
        v
    }

    fn encode<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Encoded<'g> {
        let s = &self.store;
        let p = |i: usize| g.param(s, i);
        let temb = g
            .constant(fourier_features(t, &self.freqs))
            .linear(p(self.t1.0), p(self.t1.1))
            .silu()
            .linear(p(self.t2.0), p(self.t2.1))
            .silu();
        let h0 = x.conv3x3(p(self.in_conv.0), p(self.in_conv.1));
        let s1 = self.rb1.forward(g, s, h0, temb);
        let s2 = self.rb2.forward(g, s, s1.avg_pool2(), temb);
        let h3 = self.rb3.forward(g, s, s2.avg_pool2(), temb);
        Encoded { temb, s1, s2, h3 }
    }

    /// Full two-channel outputs of both decoders (diagnostics and tests).
    pub fn branch_outputs<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> (Var<'g>, Var<'g>) {
        let e = self.encode(g, x, t);
        (self.dec_a.forward(g, &self.store, &e), self.dec_u.forward(g, &self.store, &e))
    }

    /// Encoder once, both decoders, then `[a of D_a, u of D_u]`.
    pub fn partition_forward<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Var<'g> {
        let (fa, fu) = self.branch_outputs(g, x, t);
        Var::concat(&[fa.narrow(0, 1), fu.narrow(1, 1)])
    }

    pub fn grid_n(&self) -> usize {
        self.n
    }
}

impl Network for SplitConvNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn state_shape(&self) -> Vec<usize> {
        vec![2, self.n, self.n]
    }

    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Var<'g> {
        if self.split {
            self.partition_forward(g, x, t)
        } else {
            let e = self.encode(g, x, t);
            self.dec_a.forward(g, &self.store, &e)
        }
    }

    fn frozen_audit(&self) -> Option<bool> {
        self.frozen_checksum().map(|c| c == self.backbone_checksum())
    }

    fn is_partitioned(&self) -> bool {
        self.split
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn spec() -> NetworkSpec {
        NetworkSpec::SplitConv {
            n: 8,
            widths: [4, 8, 8],
            temb_dim: 8,
            seed: 2,
        }
    }

    fn input(b: usize, n: usize) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ArrayD::from_shape_fn(IxDyn(&[b, 2, n, n]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn fresh_branches_agree_and_shapes() {
        let mut net = SplitConvNet::build(&spec()).unwrap();
        net.activate_split();
        let x = input(2, 8);
        let g = Graph::no_grad();
        let (fa, fu) = net.branch_outputs(&g, g.constant(x.clone()), &[0.2, 1.0]);
        assert_eq!(*fa.value(), *fu.value());
        assert_eq!(fa.shape(), vec![2, 2, 8, 8]);
        let y = net.eval(&x, &[0.2, 1.0]);
        assert_eq!(y, *fa.value());
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(net.store.count(ParamGroup::DecoderA), net.store.count(ParamGroup::DecoderU));
    }

    #[test]
    fn perturbing_active_decoder_only_moves_u_channel() {
        let mut net = SplitConvNet::build(&spec()).unwrap();
        net.activate_split();
        let x = input(1, 8);
        let before = net.eval(&x, &[0.5]);
        let idx = net.store.find("dec_u.out_c.b").unwrap();
        net.store.value_mut(idx).mapv_inplace(|v| v + 0.3);
        let after = net.eval(&x, &[0.5]);
        let m = 64;
        let (a0, a1) = (before.as_slice().unwrap(), after.as_slice().unwrap());
        assert_eq!(&a0[..m], &a1[..m]);
        assert!(a0[m..].iter().zip(&a1[m..]).all(|(p, q)| (q - p - 0.3).abs() < 1e-12));
    }

    #[test]
    fn a_channel_has_zero_gradient_wrt_active_decoder() {
        let mut net = SplitConvNet::build(&spec()).unwrap();
        net.activate_split();
        let g = Graph::new();
        let y = net.forward(&g, g.constant(input(1, 8)), &[0.7]);
        let loss = y.narrow(0, 1).sum_sq_rows().sum();
        let grads = g.backward(loss);
        for (i, p) in net.store.iter() {
            if p.group == ParamGroup::DecoderU {
                if let Some(gr) = grads.param(net.store.key(i)) {
                    assert!(gr.iter().all(|v| *v == 0.0), "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn freeze_is_idempotent_and_excludes_backbone() {
        let mut net = SplitConvNet::build(&spec()).unwrap();
        net.activate_split();
        net.freeze_backbone();
        let c = net.frozen_checksum().unwrap().to_string();
        net.freeze_backbone();
        assert_eq!(net.frozen_checksum().unwrap(), c);
        assert_eq!(net.trainable_groups(), vec![ParamGroup::DecoderU]);
        let g = Graph::new();
        let y = net.forward(&g, g.constant(input(1, 8)), &[0.7]).sum_sq_rows().sum();
        let grads = g.backward(y);
        for k in grads.param_keys() {
            assert_eq!(net.store.get(k.index).group, ParamGroup::DecoderU);
        }
    }

    #[test]
    fn rejects_incompatible_grid() {
        let bad = NetworkSpec::SplitConv {
            n: 10,
            widths: [4, 8, 8],
            temb_dim: 8,
            seed: 0,
        };
        assert!(SplitConvNet::build(&bad).is_err());
    }
}

//! U-Net building blocks shared by the flow predictor and the segmenter.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Parameters of a [`ParamStore`] bound to graph variables, addressed by name.
pub struct Bound<'a, F> {
    store: &'a ParamStore<F>,
    vars: Vec<Var>,
}

impl<'a, F: Scalar> Bound<'a, F> {
    pub fn new(store: &'a ParamStore<F>, g: &mut Graph<F>, trainable: bool) -> Self {
        let vars = store.bind(g, trainable);
        Bound { store, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .names()
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        self.vars[i]
    }

    pub fn conv(&self, g: &mut Graph<F>, name: &str, x: Var) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        g.conv2d(x, w, b)
    }

    pub fn conv_act(&self, g: &mut Graph<F>, name: &str, x: Var) -> Var {
        let y = self.conv(g, name, x);
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Channel width at resolution level `level`.
pub fn level_width(base: usize, level: usize) -> usize {
    base << level
}

pub fn register_encoder<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    in_ch: usize,
    levels: usize,
    base: usize,
    rng: &mut impl Rng,
) {
    let mut cin = in_ch;
    for l in 0..levels {
        let w = level_width(base, l);
        store.push_conv(&format!("{prefix}.l{l}.a"), cin, w, 3, rng);
        store.push_conv(&format!("{prefix}.l{l}.b"), w, w, 3, rng);
        cin = w;
    }
}

/// Features at every level, finest first; the last entry is the bottleneck.
pub fn encode<F: Scalar>(b: &Bound<'_, F>, g: &mut Graph<F>, prefix: &str, x: Var, levels: usize) -> Vec<Var> {
    let mut feats = Vec::with_capacity(levels);
    let mut h = x;
    for l in 0..levels {
        if l > 0 {
            h = g.avg_pool2(h);
        }
        h = b.conv_act(g, &format!("{prefix}.l{l}.a"), h);
        h = b.conv_act(g, &format!("{prefix}.l{l}.b"), h);
        feats.push(h);
    }
    feats
}

/// `skip_extra[l]` is the channel count concatenated at level `l` on top of
/// the upsampled features.
pub fn register_decoder<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    levels: usize,
    base: usize,
    skip_channels: &[usize],
    rng: &mut impl Rng,
) {
    let mut cin = level_width(base, levels - 1);
    for l in (0..levels - 1).rev() {
        let w = level_width(base, l);
        store.push_conv(&format!("{prefix}.l{l}.a"), cin + skip_channels[l], w, 3, rng);
        store.push_conv(&format!("{prefix}.l{l}.b"), w, w, 3, rng);
        cin = w;
    }
}

pub fn decode<F: Scalar>(b: &Bound<'_, F>, g: &mut Graph<F>, prefix: &str, bottleneck: Var, skips: &[Var]) -> Var {
    let levels = skips.len() + 1;
    let mut h = bottleneck;
    for l in (0..levels - 1).rev() {
        h = g.upsample2(h);
        h = g.concat(h, skips[l]);
        h = b.conv_act(g, &format!("{prefix}.l{l}.a"), h);
        h = b.conv_act(g, &format!("{prefix}.l{l}.b"), h);
    }
    h
}

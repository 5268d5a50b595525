//! Prompt injection at a skip connection.
//!
//! The fused prompt is channel-wise concatenated with the skip feature, a
//! 3x3x3 convolution restores the channel count, then a transformer block
//! refines the result: multi-head transposed attention (attention over
//! channel tokens per head, with a learnable per-head temperature in place
//! of `1/sqrt(d_k)`) followed by a gated feedforward layer, each with a
//! pre-norm and a residual.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_init, dwconv_init, linear_init, norm_init, ones, Conv3, DwConv, FeatureMap, Linear, Norm,
};
use crate::tensor::{Conv3dSpec, Elem, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Attention heads; must divide the channel count.
    pub heads: usize,
    /// Feedforward expansion factor gamma (hidden width `2 * gamma * c`
    /// before the gate halves it).
    pub expansion: usize,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            heads: 2,
            expansion: 2,
        }
    }
}

/// Multi-head transposed attention parameters.
#[derive(Debug, Clone)]
pub struct MhtaParams<T> {
    pub norm: Norm<T>,
    pub q_conv: Linear<T>,
    pub q_dw: DwConv<T>,
    pub k_conv: Linear<T>,
    pub k_dw: DwConv<T>,
    pub v_conv: Linear<T>,
    pub v_dw: DwConv<T>,
    /// `[heads]` learnable temperatures.
    pub temperature: T,
    pub out_conv: Linear<T>,
}

impl<T> MhtaParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.norm.for_each(&format!("{prefix}.norm"), f);
        self.q_conv.for_each(&format!("{prefix}.q_conv"), f);
        self.q_dw.for_each(&format!("{prefix}.q_dw"), f);
        self.k_conv.for_each(&format!("{prefix}.k_conv"), f);
        self.k_dw.for_each(&format!("{prefix}.k_dw"), f);
        self.v_conv.for_each(&format!("{prefix}.v_conv"), f);
        self.v_dw.for_each(&format!("{prefix}.v_dw"), f);
        f(format!("{prefix}.temperature"), &self.temperature);
        self.out_conv.for_each(&format!("{prefix}.out_conv"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.norm.for_each_mut(&format!("{prefix}.norm"), f);
        self.q_conv.for_each_mut(&format!("{prefix}.q_conv"), f);
        self.q_dw.for_each_mut(&format!("{prefix}.q_dw"), f);
        self.k_conv.for_each_mut(&format!("{prefix}.k_conv"), f);
        self.k_dw.for_each_mut(&format!("{prefix}.k_dw"), f);
        self.v_conv.for_each_mut(&format!("{prefix}.v_conv"), f);
        self.v_dw.for_each_mut(&format!("{prefix}.v_dw"), f);
        f(format!("{prefix}.temperature"), &mut self.temperature);
        self.out_conv.for_each_mut(&format!("{prefix}.out_conv"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MhtaParams<U> {
        MhtaParams {
            norm: self.norm.map(f),
            q_conv: self.q_conv.map(f),
            q_dw: self.q_dw.map(f),
            k_conv: self.k_conv.map(f),
            k_dw: self.k_dw.map(f),
            v_conv: self.v_conv.map(f),
            v_dw: self.v_dw.map(f),
            temperature: f(&self.temperature),
            out_conv: self.out_conv.map(f),
        }
    }
}

impl<E: Elem> MhtaParams<ArrayD<E>> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, heads: usize) -> Self {
        MhtaParams {
            norm: norm_init(channels),
            q_conv: linear_init(rng, channels, channels),
            q_dw: dwconv_init(rng, channels),
            k_conv: linear_init(rng, channels, channels),
            k_dw: dwconv_init(rng, channels),
            v_conv: linear_init(rng, channels, channels),
            v_dw: dwconv_init(rng, channels),
            temperature: ones(&[heads]),
            out_conv: linear_init(rng, channels, channels),
        }
    }

    pub fn heads(&self) -> usize {
        self.temperature.len()
    }
}

/// Gated feedforward parameters.
#[derive(Debug, Clone)]
pub struct GflParams<T> {
    pub norm: Norm<T>,
    /// 1x1 expansion `c -> 2 * gamma * c`.
    pub expand: Linear<T>,
    /// Depthwise 3x3x3 over the expanded channels.
    pub dw: DwConv<T>,
    /// 1x1 projection `gamma * c -> c` after the gate.
    pub project: Linear<T>,
}

impl<T> GflParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.norm.for_each(&format!("{prefix}.norm"), f);
        self.expand.for_each(&format!("{prefix}.expand"), f);
        self.dw.for_each(&format!("{prefix}.dw"), f);
        self.project.for_each(&format!("{prefix}.project"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.norm.for_each_mut(&format!("{prefix}.norm"), f);
        self.expand.for_each_mut(&format!("{prefix}.expand"), f);
        self.dw.for_each_mut(&format!("{prefix}.dw"), f);
        self.project.for_each_mut(&format!("{prefix}.project"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GflParams<U> {
        GflParams {
            norm: self.norm.map(f),
            expand: self.expand.map(f),
            dw: self.dw.map(f),
            project: self.project.map(f),
        }
    }
}

impl<E: Elem> GflParams<ArrayD<E>> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, expansion: usize) -> Self {
        let hidden = expansion * channels;
        GflParams {
            norm: norm_init(channels),
            expand: linear_init(rng, 2 * hidden, channels),
            dw: dwconv_init(rng, 2 * hidden),
            project: linear_init(rng, channels, hidden),
        }
    }
}

/// Full injection-site parameters: channel reduction plus one transformer
/// block.
#[derive(Debug, Clone)]
pub struct InjectionParams<T> {
    /// 3x3x3 convolution `2c -> c` applied after the concat.
    pub reduce: Conv3<T>,
    pub mhta: MhtaParams<T>,
    pub gfl: GflParams<T>,
}

impl<T> InjectionParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.reduce.for_each(&format!("{prefix}.reduce"), f);
        self.mhta.for_each(&format!("{prefix}.mhta"), f);
        self.gfl.for_each(&format!("{prefix}.gfl"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.reduce.for_each_mut(&format!("{prefix}.reduce"), f);
        self.mhta.for_each_mut(&format!("{prefix}.mhta"), f);
        self.gfl.for_each_mut(&format!("{prefix}.gfl"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> InjectionParams<U> {
        InjectionParams {
            reduce: self.reduce.map(f),
            mhta: self.mhta.map(f),
            gfl: self.gfl.map(f),
        }
    }
}

impl<E: Elem> InjectionParams<ArrayD<E>> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, cfg: &InjectionConfig) -> Self {
        InjectionParams {
            reduce: conv_init(rng, channels, 2 * channels, 3),
            mhta: MhtaParams::init(rng, channels, cfg.heads),
            gfl: GflParams::init(rng, channels, cfg.expansion),
        }
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Config(format!(
            "attention heads ({heads}) must divide channels ({channels})"
        )));
    }
    Ok(())
}

/// Tape-level MHTA block (pre-norm, residual). Returns the output and the
/// per-head attention matrices.
pub fn mhta_graph<E: Elem>(
    t: &mut Tape<E>,
    x: NodeId,
    p: &MhtaParams<NodeId>,
    heads: usize,
) -> (NodeId, Vec<NodeId>) {
    let (c, h, w, d) = {
        let s = t.value(x).shape();
        (s[0], s[1], s[2], s[3])
    };
    let n = h * w * d;
    let ch = c / heads;

    let ln = t.layernorm_chan(x, p.norm.gamma, p.norm.beta);
    let q = t.conv1x1(ln, p.q_conv.weight, p.q_conv.bias);
    let q = t.dwconv3(q, p.q_dw.weight, p.q_dw.bias);
    let k = t.conv1x1(ln, p.k_conv.weight, p.k_conv.bias);
    let k = t.dwconv3(k, p.k_dw.weight, p.k_dw.bias);
    let v = t.conv1x1(ln, p.v_conv.weight, p.v_conv.bias);
    let v = t.dwconv3(v, p.v_dw.weight, p.v_dw.bias);
    let q = t.reshape(q, &[c, n]);
    let k = t.reshape(k, &[c, n]);
    let v = t.reshape(v, &[c, n]);

    let mut head_outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = t.narrow_channels(q, hd * ch, ch);
        let kh = t.narrow_channels(k, hd * ch, ch);
        let vh = t.narrow_channels(v, hd * ch, ch);
        let scores = t.matmul_nt(qh, kh);
        let scaled = t.mul_scalar_elem(scores, p.temperature, hd);
        let attn = t.softmax_rows(scaled);
        attns.push(attn);
        head_outs.push(t.matmul(attn, vh));
    }
    let merged = if heads == 1 {
        head_outs[0]
    } else {
        t.concat_channels(&head_outs)
    };
    let merged = t.reshape(merged, &[c, h, w, d]);
    let projected = t.conv1x1(merged, p.out_conv.weight, p.out_conv.bias);
    (t.add(x, projected), attns)
}

/// Tape-level GFL block (pre-norm, residual).
pub fn gfl_graph<E: Elem>(t: &mut Tape<E>, x: NodeId, p: &GflParams<NodeId>) -> NodeId {
    let hidden2 = t.value(p.expand.weight).shape()[0];
    let hidden = hidden2 / 2;
    let ln = t.layernorm_chan(x, p.norm.gamma, p.norm.beta);
    let e = t.conv1x1(ln, p.expand.weight, p.expand.bias);
    let e = t.dwconv3(e, p.dw.weight, p.dw.bias);
    let gate = t.narrow_channels(e, 0, hidden);
    let val = t.narrow_channels(e, hidden, hidden);
    let gate = t.silu(gate);
    let gated = t.mul(gate, val);
    let projected = t.conv1x1(gated, p.project.weight, p.project.bias);
    t.add(x, projected)
}

/// Tape-level injection: concat -> reduce conv -> MHTA -> GFL.
pub fn inject_graph<E: Elem>(
    t: &mut Tape<E>,
    feature: NodeId,
    prompt: NodeId,
    p: &InjectionParams<NodeId>,
    heads: usize,
) -> NodeId {
    let cat = t.concat_channels(&[feature, prompt]);
    let x = t.conv3d(cat, p.reduce.weight, p.reduce.bias, Conv3dSpec::SAME3);
    let (x, _) = mhta_graph(t, x, &p.mhta, heads);
    gfl_graph(t, x, &p.gfl)
}

/// Apply the MHTA block to a feature map.
pub fn mhta_forward<E: Elem>(
    feature: &FeatureMap<E>,
    params: &MhtaParams<ArrayD<E>>,
) -> Result<FeatureMap<E>> {
    let heads = params.heads();
    check_heads(feature.channels(), heads)?;
    let mut t: Tape<E> = Tape::new();
    let ids = params.map(&mut |a| t.constant(a.clone()));
    let x = t.constant(feature.to_dyn());
    let (y, _) = mhta_graph(&mut t, x, &ids, heads);
    FeatureMap::from_dyn(t.value(y).clone())
}

/// Apply the GFL block to a feature map.
pub fn gfl_forward<E: Elem>(
    feature: &FeatureMap<E>,
    params: &GflParams<ArrayD<E>>,
) -> Result<FeatureMap<E>> {
    if params.expand.weight.shape()[1] != feature.channels() {
        return Err(Error::Shape(format!(
            "feedforward expects {} channels, feature has {}",
            params.expand.weight.shape()[1],
            feature.channels()
        )));
    }
    let mut t: Tape<E> = Tape::new();
    let ids = params.map(&mut |a| t.constant(a.clone()));
    let x = t.constant(feature.to_dyn());
    let y = gfl_graph(&mut t, x, &ids);
    FeatureMap::from_dyn(t.value(y).clone())
}

/// Inject a prompt into a skip feature. Output shape equals the feature's.
pub fn inject<E: Elem>(
    feature: &FeatureMap<E>,
    prompt: &FeatureMap<E>,
    params: &InjectionParams<ArrayD<E>>,
) -> Result<FeatureMap<E>> {
    if feature.channels() != prompt.channels()
        || feature.spatial_dims() != prompt.spatial_dims()
    {
        return Err(Error::Shape(format!(
            "feature {:?}x{:?} and prompt {:?}x{:?} must share shape",
            feature.channels(),
            feature.spatial_dims(),
            prompt.channels(),
            prompt.spatial_dims()
        )));
    }
    let heads = params.mhta.heads();
    check_heads(feature.channels(), heads)?;
    let mut t: Tape<E> = Tape::new();
    let ids = params.map(&mut |a| t.constant(a.clone()));
    let f = t.constant(feature.to_dyn());
    let pr = t.constant(prompt.to_dyn());
    let y = inject_graph(&mut t, f, pr, &ids, heads);
    FeatureMap::from_dyn(t.value(y).clone())
}

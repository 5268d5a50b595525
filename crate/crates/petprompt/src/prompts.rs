//! Dual prompt mechanisms.
//!
//! Three differentiable pieces, one per subsection of the method:
//! - the count-level prior prompt: a three-layer MLP mapping the scalar count
//!   level to an M-dimensional vector,
//! - the general denoising prompt: a feature-conditioned convex combination
//!   of N learnable components (`w = softmax(conv1x1(GAP(F)))`, `P_G =
//!   conv3x3x3(sum_n w_n P_G^n)` resized to the feature grid),
//! - their fusion by transposed (channel-token) cross-attention: the general
//!   prompt queries the count-level prompt, `P = softmax(Q K^T / sqrt(d_k)) V`
//!   with `d_k` the number of spatial positions.
//!
//! Channel-token attention keeps the attention matrix `c x c`, independent of
//! volume size.

use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::verify::gradcheck_prompts;

use crate::data::CountLevel;
use crate::error::{Error, Result};
use crate::nn::{
    conv_init, dwconv_init, gaussian, linear_init, norm_init, Conv3, DwConv, FeatureMap, Linear,
    Norm,
};
use crate::tensor::{Conv3dSpec, Elem, NodeId, Tape};

/// Count-level prior prompt configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClpConfig {
    /// Hidden width of the two interior layers.
    pub hidden: usize,
    /// Output dimension M of the prompt vector.
    pub m: usize,
}

impl Default for ClpConfig {
    fn default() -> Self {
        ClpConfig { hidden: 64, m: 64 }
    }
}

/// Three fully connected layers mapping `1 -> hidden -> hidden -> M`,
/// rectified-linear between layers, linear output.
#[derive(Debug, Clone)]
pub struct ClpParams<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
}

impl<T> ClpParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.fc1.for_each(&format!("{prefix}.fc1"), f);
        self.fc2.for_each(&format!("{prefix}.fc2"), f);
        self.fc3.for_each(&format!("{prefix}.fc3"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.fc1.for_each_mut(&format!("{prefix}.fc1"), f);
        self.fc2.for_each_mut(&format!("{prefix}.fc2"), f);
        self.fc3.for_each_mut(&format!("{prefix}.fc3"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ClpParams<U> {
        ClpParams {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
            fc3: self.fc3.map(f),
        }
    }
}

impl<E: Elem> ClpParams<ArrayD<E>> {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ClpConfig) -> Self {
        ClpParams {
            fc1: linear_init(rng, cfg.hidden, 1),
            fc2: linear_init(rng, cfg.hidden, cfg.hidden),
            fc3: linear_init(rng, cfg.m, cfg.hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc3.weight.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let h1 = self.fc1.weight.shape()[0];
        let h2 = self.fc2.weight.shape()[0];
        if self.fc1.weight.shape()[1] != 1
            || self.fc2.weight.shape()[1] != h1
            || self.fc3.weight.shape()[1] != h2
        {
            return Err(Error::Shape(
                "count-level MLP layer widths are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

/// Tape-level CLP forward. `delta` enters as an input, not a parameter.
pub fn clp_graph<E: Elem>(t: &mut Tape<E>, delta: f64, p: &ClpParams<NodeId>) -> NodeId {
    let d = t.constant(ArrayD::from_elem(IxDyn(&[1]), E::f(delta)));
    let h1 = t.linear(d, p.fc1.weight, p.fc1.bias);
    let h1 = t.relu(h1);
    let h2 = t.linear(h1, p.fc2.weight, p.fc2.bias);
    let h2 = t.relu(h2);
    t.linear(h2, p.fc3.weight, p.fc3.bias)
}

/// Map a count level to its M-dimensional prompt vector.
pub fn clp_forward<E: Elem>(
    delta: CountLevel,
    params: &ClpParams<ArrayD<E>>,
) -> Result<Array1<E>> {
    params.validate()?;
    let mut t: Tape<E> = Tape::new();
    let ids = params.map(&mut |a| t.constant(a.clone()));
    let out = clp_graph(&mut t, delta.value(), &ids);
    Ok(t.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap())
}

/// General denoising prompt configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpdConfig {
    /// Number of learnable prompt components.
    pub n: usize,
    /// Base spatial shape the components are stored at; they are resized to
    /// the feature grid at forward time.
    pub base_dims: (usize, usize, usize),
}

impl Default for GpdConfig {
    fn default() -> Self {
        GpdConfig {
            n: 3,
            base_dims: (8, 8, 8),
        }
    }
}

/// N learnable components plus the attention-weight head and output conv.
#[derive(Debug, Clone)]
pub struct GpdParams<T> {
    /// `[c, bh, bw, bd]` each.
    pub components: Vec<T>,
    /// Pointwise head mapping the pooled `[c]` vector to N logits.
    pub weight_head: Linear<T>,
    /// 3x3x3 output convolution `c -> c`.
    pub out_conv: Conv3<T>,
}

impl<T> GpdParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, comp) in self.components.iter().enumerate() {
            f(format!("{prefix}.component{i}"), comp);
        }
        self.weight_head
            .for_each(&format!("{prefix}.weight_head"), f);
        self.out_conv.for_each(&format!("{prefix}.out_conv"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, comp) in self.components.iter_mut().enumerate() {
            f(format!("{prefix}.component{i}"), comp);
        }
        self.weight_head
            .for_each_mut(&format!("{prefix}.weight_head"), f);
        self.out_conv.for_each_mut(&format!("{prefix}.out_conv"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GpdParams<U> {
        GpdParams {
            components: self.components.iter().map(|c| f(c)).collect(),
            weight_head: self.weight_head.map(f),
            out_conv: self.out_conv.map(f),
        }
    }
}

impl<E: Elem> GpdParams<ArrayD<E>> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, cfg: &GpdConfig) -> Self {
        assert!(cfg.n >= 1, "need at least one prompt component");
        let (bh, bw, bd) = cfg.base_dims;
        GpdParams {
            components: (0..cfg.n)
                .map(|_| gaussian(rng, &[channels, bh, bw, bd], 0.02))
                .collect(),
            weight_head: linear_init(rng, cfg.n, channels),
            out_conv: conv_init(rng, channels, channels, 3),
        }
    }

    pub fn channels(&self) -> usize {
        self.components[0].shape()[0]
    }

    fn validate(&self, feature_channels: usize) -> Result<()> {
        let c = self.channels();
        if c != feature_channels {
            return Err(Error::Shape(format!(
                "prompt components have {c} channels but the feature has {feature_channels}"
            )));
        }
        if self.weight_head.weight.shape() != [self.components.len(), c] {
            return Err(Error::Shape(
                "weight head shape inconsistent with component count".into(),
            ));
        }
        if self.out_conv.weight.shape() != [c, c, 3, 3, 3] {
            return Err(Error::Shape("output conv must be c -> c, 3x3x3".into()));
        }
        Ok(())
    }
}

/// Tape-level GPD forward: returns the prompt map (at the feature's spatial
/// dims) and the softmax component weights.
pub fn gpd_graph<E: Elem>(
    t: &mut Tape<E>,
    feature: NodeId,
    p: &GpdParams<NodeId>,
) -> (NodeId, NodeId) {
    let dims = {
        let s = t.value(feature).shape();
        (s[1], s[2], s[3])
    };
    let pooled = t.gap(feature);
    let logits = t.linear(pooled, p.weight_head.weight, p.weight_head.bias);
    let w = t.softmax_1d(logits);
    let base = t.lincomb(&p.components, w);
    let resized = t.resize_trilinear(base, dims);
    let pg = t.conv3d(resized, p.out_conv.weight, p.out_conv.bias, Conv3dSpec::SAME3);
    (pg, w)
}

/// Generate the general denoising prompt for a feature map. Returns the
/// prompt (same spatial dims as the feature) and the simplex weights.
pub fn gpd_forward<E: Elem>(
    feature: &FeatureMap<E>,
    params: &GpdParams<ArrayD<E>>,
) -> Result<(FeatureMap<E>, Array1<E>)> {
    params.validate(feature.channels())?;
    let mut t: Tape<E> = Tape::new();
    let ids = params.map(&mut |a| t.constant(a.clone()));
    let f_id = t.constant(feature.to_dyn());
    let (pg, w) = gpd_graph(&mut t, f_id, &ids);
    Ok((
        FeatureMap::from_dyn(t.value(pg).clone())?,
        t.value(w)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap(),
    ))
}

/// Cross-attention fusion parameters.
#[derive(Debug, Clone)]
pub struct FusionParams<T> {
    /// Layer norm over channels on the query path.
    pub query_norm: Norm<T>,
    /// 1x1 query convolution `c -> c`.
    pub query_conv: Linear<T>,
    /// Learned projection `M -> c` applied to the count-level prompt before
    /// broadcasting it across the grid.
    pub clp_proj: Linear<T>,
    /// 1x1 key convolution `c -> c`.
    pub key_conv: Linear<T>,
    /// 3x3x3 depthwise value convolution.
    pub value_dw: DwConv<T>,
}

impl<T> FusionParams<T> {
    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.query_norm.for_each(&format!("{prefix}.query_norm"), f);
        self.query_conv.for_each(&format!("{prefix}.query_conv"), f);
        self.clp_proj.for_each(&format!("{prefix}.clp_proj"), f);
        self.key_conv.for_each(&format!("{prefix}.key_conv"), f);
        self.value_dw.for_each(&format!("{prefix}.value_dw"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.query_norm
            .for_each_mut(&format!("{prefix}.query_norm"), f);
        self.query_conv
            .for_each_mut(&format!("{prefix}.query_conv"), f);
        self.clp_proj.for_each_mut(&format!("{prefix}.clp_proj"), f);
        self.key_conv.for_each_mut(&format!("{prefix}.key_conv"), f);
        self.value_dw.for_each_mut(&format!("{prefix}.value_dw"), f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> FusionParams<U> {
        FusionParams {
            query_norm: self.query_norm.map(f),
            query_conv: self.query_conv.map(f),
            clp_proj: self.clp_proj.map(f),
            key_conv: self.key_conv.map(f),
            value_dw: self.value_dw.map(f),
        }
    }
}

impl<E: Elem> FusionParams<ArrayD<E>> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, m: usize) -> Self {
        FusionParams {
            query_norm: norm_init(channels),
            query_conv: linear_init(rng, channels, channels),
            clp_proj: linear_init(rng, channels, m),
            key_conv: linear_init(rng, channels, channels),
            value_dw: dwconv_init(rng, channels),
        }
    }

    fn validate(&self, channels: usize, m: usize) -> Result<()> {
        if self.query_conv.weight.shape() != [channels, channels]
            || self.key_conv.weight.shape() != [channels, channels]
        {
            return Err(Error::Shape(
                "query/key convolutions must map c -> c".into(),
            ));
        }
        if self.clp_proj.weight.shape() != [channels, m] {
            return Err(Error::Shape(format!(
                "count-level projection must map {m} -> {channels}, got {:?}",
                self.clp_proj.weight.shape()
            )));
        }
        Ok(())
    }
}

/// Tape-level fusion: returns the fused prompt and the `c x c` attention
/// matrix (rows sum to one).
pub fn fuse_graph<E: Elem>(
    t: &mut Tape<E>,
    pg: NodeId,
    pc: NodeId,
    p: &FusionParams<NodeId>,
) -> (NodeId, NodeId) {
    let (c, h, w, d) = {
        let s = t.value(pg).shape();
        (s[0], s[1], s[2], s[3])
    };
    let n = h * w * d;

    let qsrc = t.layernorm_chan(pg, p.query_norm.gamma, p.query_norm.beta);
    let q4 = t.conv1x1(qsrc, p.query_conv.weight, p.query_conv.bias);
    let q = t.reshape(q4, &[c, n]);

    let kv_vec = t.linear(pc, p.clp_proj.weight, p.clp_proj.bias);
    let kv_map = t.broadcast_spatial(kv_vec, (h, w, d));
    let k4 = t.conv1x1(kv_map, p.key_conv.weight, p.key_conv.bias);
    let k = t.reshape(k4, &[c, n]);
    let v4 = t.dwconv3(kv_map, p.value_dw.weight, p.value_dw.bias);
    let v = t.reshape(v4, &[c, n]);

    // d_k = number of spatial positions
    let scores = t.matmul_nt(q, k);
    let scaled = t.scale(scores, 1.0 / (n as f64).sqrt());
    let attn = t.softmax_rows(scaled);
    let fused = t.matmul(attn, v);
    (t.reshape(fused, &[c, h, w, d]), attn)
}

/// Fuse the general and count-level prompts into one spatial prompt map.
pub fn fuse_prompts<E: Elem>(
    pg: &FeatureMap<E>,
    pc: &Array1<E>,
    params: &FusionParams<ArrayD<E>>,
) -> Result<FeatureMap<E>> {
    Ok(fuse_prompts_with_attention(pg, pc, params)?.0)
}

/// Like [`fuse_prompts`], also returning the attention matrix.
pub fn fuse_prompts_with_attention<E: Elem>(
    pg: &FeatureMap<E>,
    pc: &Array1<E>,
    params: &FusionParams<ArrayD<E>>,
) -> Result<(FeatureMap<E>, ndarray::Array2<E>)> {
    params.validate(pg.channels(), pc.len())?;
    let mut t: Tape<E> = Tape::new();
    let ids = params.map(&mut |a| t.constant(a.clone()));
    let pg_id = t.constant(pg.to_dyn());
    let pc_id = t.constant(pc.clone().into_dyn());
    let (fused, attn) = fuse_graph(&mut t, pg_id, pc_id, &ids);
    Ok((
        FeatureMap::from_dyn(t.value(fused).clone())?,
        t.value(attn)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
    ))
}

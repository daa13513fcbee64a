//! Conditional feature extraction: a convolutional backbone tapped at
//! stride 8, a 1×1 channel compression with per-channel standardization and
//! ReLU, and residual multi-head self-attention over the flattened
//! positions. The maps of all readable images are averaged into one static
//! condition.

use fundus_nn::{Conv2d, Graph, Linear, ParamStore, Tensor, Var};
use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::image::ImageTensor;

pub const NORM_EPS: f64 = 1e-5;
/// Array name of the pooled condition inside a restorer checkpoint.
pub const POOLED_NAME: &str = "condition/pooled";
const PREFIX: &str = "cond";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// patch embedding only, no convolutional trunk
    SelfAttentionOnly,
    AlexnetLike,
    Res18,
    #[default]
    Res34,
    Res50,
    VggLike,
    ResnextLike,
    MobilenetLike,
    /// a single stride-1 convolution; used for hand-checkable tests
    SingleConv,
}

impl ExtractorKind {
    /// The eight compared variants, in table order.
    pub const COMPARED: [ExtractorKind; 8] = [
        ExtractorKind::SelfAttentionOnly,
        ExtractorKind::AlexnetLike,
        ExtractorKind::Res18,
        ExtractorKind::Res34,
        ExtractorKind::Res50,
        ExtractorKind::VggLike,
        ExtractorKind::ResnextLike,
        ExtractorKind::MobilenetLike,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ExtractorKind::SelfAttentionOnly => "self_attention_only",
            ExtractorKind::AlexnetLike => "alexnet_like",
            ExtractorKind::Res18 => "res18",
            ExtractorKind::Res34 => "res34",
            ExtractorKind::Res50 => "res50",
            ExtractorKind::VggLike => "vgg_like",
            ExtractorKind::ResnextLike => "resnext_like",
            ExtractorKind::MobilenetLike => "mobilenet_like",
            ExtractorKind::SingleConv => "single_conv",
        }
    }

    /// Row label in comparison tables, e.g. `self_attention+res34`.
    pub fn label(self) -> String {
        match self {
            ExtractorKind::SelfAttentionOnly => "self_attention".to_string(),
            k => format!("self_attention+{}", k.key()),
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        if key == "self_attention" {
            return Ok(ExtractorKind::SelfAttentionOnly);
        }
        let key = key.strip_prefix("self_attention+").unwrap_or(key);
        Self::COMPARED
            .into_iter()
            .chain([ExtractorKind::SingleConv])
            .find(|k| k.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown feature extractor {key:?}")))
    }

    /// Downsampling factor between the image and the tapped map.
    pub fn total_stride(self) -> usize {
        match self {
            ExtractorKind::SingleConv => 1,
            _ => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Res34Layout {
    /// [3, 4, 6] basic blocks in the three tapped stages
    Full34,
    /// one block per stage, plus one more in the last
    #[default]
    Reduced10,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { embed_dim: 256, heads: 8 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// channels of the first stage; the tapped map has `4 * width`
    pub width: usize,
    pub attention: AttentionConfig,
    pub res34_layout: Res34Layout,
    /// keep the backbone at its initialization during restorer training
    pub freeze: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            kind: ExtractorKind::Res34,
            width: 64,
            attention: AttentionConfig::default(),
            res34_layout: Res34Layout::Reduced10,
            freeze: false,
        }
    }
}

/// A (channels, h, w) map and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Array3<f64>,
    /// source image id, or "pooled"
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFeature {
    pub map: FeatureMap,
    pub n_sources: usize,
}

impl ConditionalFeature {
    /// (1, C, h, w) for use as a graph input.
    pub fn batched(&self) -> Tensor {
        self.map.tensor.clone().insert_axis(Axis(0)).into_dyn()
    }

    pub fn from_batched(t: &Tensor, n_sources: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(invalid(format!("pooled condition must be (1, C, h, w), got {s:?}")));
        }
        let tensor = t
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("checked rank");
        Ok(ConditionalFeature {
            map: FeatureMap {
                tensor,
                provenance: "pooled".into(),
            },
            n_sources,
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Conv(Conv2d),
    MaxPool,
    /// relu(c2(relu(c1 x)) + skip x)
    Basic(Conv2d, Conv2d, Option<Conv2d>),
    /// relu(c3(relu(c2(relu(c1 x)))) + skip x)
    Bottleneck(Conv2d, Conv2d, Conv2d, Option<Conv2d>),
}

fn conv(name: String, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d {
    Conv2d::new(name, cin, cout, k).stride(stride)
}

fn skip(name: String, cin: usize, cout: usize, stride: usize) -> Option<Conv2d> {
    (cin != cout || stride != 1).then(|| conv(name, cin, cout, 1, stride).pad(0))
}

fn groups_for(ch: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| ch % g == 0).expect("1 divides")
}

/// Backbone, compression and attention of one feature extractor. Parameters
/// are named `cond/...`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        config.attention.validate()?;
        if config.width == 0 {
            return Err(Error::Config("extractor width must be >= 1".into()));
        }
        if 4 * config.width < config.attention.embed_dim {
            return Err(Error::Config(format!(
                "backbone gives {} channels, fewer than embed_dim {}",
                4 * config.width,
                config.attention.embed_dim
            )));
        }
        Ok(FeatureExtractor { config })
    }

    pub fn tapped_channels(&self) -> usize {
        4 * self.config.width
    }

    /// Side length of the feature map for a square input of `size`.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let s = self.config.kind.total_stride();
        if size == 0 || size % s != 0 {
            return Err(invalid(format!("input size {size} is not a multiple of the total stride {s}")));
        }
        Ok(size / s)
    }

    fn ops(&self) -> Vec<Op> {
        let w = self.config.width;
        let n = |s: String| format!("{PREFIX}/{s}");
        let mut ops = Vec::new();
        let basic_stages = |ops: &mut Vec<Op>, blocks: [usize; 3]| {
            ops.push(Op::Conv(conv(n("stem".into()), 3, w, 3, 2)));
            let mut cin = w;
            for (si, (&nb, cout)) in blocks.iter().zip([w, 2 * w, 4 * w]).enumerate() {
                for b in 0..nb {
                    let stride = if si > 0 && b == 0 { 2 } else { 1 };
                    let p = |s: &str| n(format!("s{si}b{b}/{s}"));
                    ops.push(Op::Basic(
                        conv(p("c1"), cin, cout, 3, stride),
                        conv(p("c2"), cout, cout, 3, 1),
                        skip(p("skip"), cin, cout, stride),
                    ));
                    cin = cout;
                }
            }
        };
        match self.config.kind {
            ExtractorKind::SingleConv => ops.push(Op::Conv(conv(n("c0".into()), 3, 4 * w, 3, 1))),
            ExtractorKind::SelfAttentionOnly => ops.push(Op::Conv(conv(n("patch".into()), 3, 4 * w, 8, 8).pad(0))),
            ExtractorKind::AlexnetLike => {
                ops.push(Op::Conv(conv(n("c0".into()), 3, w, 5, 2)));
                ops.push(Op::MaxPool);
                ops.push(Op::Conv(conv(n("c1".into()), w, 2 * w, 3, 1)));
                ops.push(Op::Conv(conv(n("c2".into()), 2 * w, 4 * w, 3, 2)));
                ops.push(Op::Conv(conv(n("c3".into()), 4 * w, 4 * w, 3, 1)));
            }
            ExtractorKind::VggLike => {
                let mut cin = 3;
                for (si, cout) in [w, 2 * w, 4 * w].into_iter().enumerate() {
                    for j in 0..2 {
                        ops.push(Op::Conv(conv(n(format!("s{si}c{j}")), cin, cout, 3, 1)));
                        cin = cout;
                    }
                    ops.push(Op::MaxPool);
                }
            }
            ExtractorKind::Res18 => basic_stages(&mut ops, [2, 2, 2]),
            ExtractorKind::Res34 => basic_stages(
                &mut ops,
                match self.config.res34_layout {
                    Res34Layout::Full34 => [3, 4, 6],
                    Res34Layout::Reduced10 => [1, 1, 2],
                },
            ),
            ExtractorKind::Res50 | ExtractorKind::ResnextLike => {
                let grouped = self.config.kind == ExtractorKind::ResnextLike;
                ops.push(Op::Conv(conv(n("stem".into()), 3, w, 3, 2)));
                let mut cin = w;
                for (si, cout) in [w, 2 * w, 4 * w].into_iter().enumerate() {
                    let stride = if si > 0 { 2 } else { 1 };
                    // ResNet-style blocks squeeze to a quarter, ResNeXt-style
                    // to half with grouped 3×3 convolutions
                    let mid = if grouped { (cout / 2).max(1) } else { (cout / 4).max(1) };
                    let groups = if grouped { groups_for(mid) } else { 1 };
                    let p = |s: &str| n(format!("s{si}/{s}"));
                    ops.push(Op::Bottleneck(
                        conv(p("reduce"), cin, mid, 1, 1),
                        conv(p("conv"), mid, mid, 3, stride).groups(groups),
                        conv(p("expand"), mid, cout, 1, 1),
                        skip(p("skip"), cin, cout, stride),
                    ));
                    cin = cout;
                }
            }
            ExtractorKind::MobilenetLike => {
                ops.push(Op::Conv(conv(n("stem".into()), 3, w, 3, 2)));
                let mut cin = w;
                for (si, (cout, stride)) in [(2 * w, 2), (4 * w, 2), (4 * w, 1)].into_iter().enumerate() {
                    ops.push(Op::Conv(conv(n(format!("s{si}/dw")), cin, cin, 3, stride).groups(cin)));
                    ops.push(Op::Conv(conv(n(format!("s{si}/pw")), cin, cout, 1, 1)));
                    cin = cout;
                }
            }
        }
        ops
    }

    fn compress(&self) -> Conv2d {
        Conv2d::new(format!("{PREFIX}/compress"), self.tapped_channels(), self.config.attention.embed_dim, 1)
    }

    fn attn(&self, which: &str) -> Linear {
        let e = self.config.attention.embed_dim;
        Linear::new(format!("{PREFIX}/attn/{which}"), e, e)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for op in self.ops() {
            match op {
                Op::Conv(c) => {
                    c.init(store, rng);
                }
                Op::MaxPool => {}
                Op::Basic(c1, c2, s) => {
                    c1.init(store, rng);
                    c2.init_scaled(store, rng, 0.5);
                    if let Some(s) = s {
                        s.init(store, rng);
                    }
                }
                Op::Bottleneck(c1, c2, c3, s) => {
                    c1.init(store, rng);
                    c2.init(store, rng);
                    c3.init_scaled(store, rng, 0.5);
                    if let Some(s) = s {
                        s.init(store, rng);
                    }
                }
            }
        }
        self.compress().init(store, rng);
        for which in ["q", "k", "v", "out"] {
            self.attn(which).init(store, rng);
        }
    }

    /// Backbone feature map at the tap, (N, 4w, S/8, S/8), after ReLU.
    pub fn backbone_graph(&self, g: &Graph, x: Var) -> Var {
        let mut h = x;
        for op in self.ops() {
            h = match op {
                Op::Conv(c) => g.relu(c.forward(g, h)),
                Op::MaxPool => g.max_pool2d(h, 2, 2),
                Op::Basic(c1, c2, s) => {
                    let r = c2.forward(g, g.relu(c1.forward(g, h)));
                    let id = s.map_or(h, |s| s.forward(g, h));
                    g.relu(g.add(r, id))
                }
                Op::Bottleneck(c1, c2, c3, s) => {
                    let r = c3.forward(g, g.relu(c2.forward(g, g.relu(c1.forward(g, h)))));
                    let id = s.map_or(h, |s| s.forward(g, h));
                    g.relu(g.add(r, id))
                }
            };
        }
        h
    }

    /// 1×1 convolution to `embed_dim`, per-channel standardization, ReLU.
    pub fn compress_graph(&self, g: &Graph, fmap: Var) -> Result<Var> {
        let c = g.shape(fmap)[1];
        if c < self.config.attention.embed_dim || c != self.tapped_channels() {
            return Err(invalid(format!(
                "compression expects {} channels (>= embed_dim {}), got {c}",
                self.tapped_channels(),
                self.config.attention.embed_dim
            )));
        }
        Ok(g.relu(g.channel_norm(self.compress().forward(g, fmap), NORM_EPS)))
    }

    pub fn attention_graph(&self, g: &Graph, fmap: Var) -> Result<AttentionOutput> {
        let names = ["q", "k", "v", "out"].map(|w| self.attn(w));
        self_attention_graph(g, fmap, &self.config.attention, &names)
    }

    /// Attention-enhanced maps (N, embed_dim, S/8, S/8) for a batch of
    /// images (N, 3, S, S).
    pub fn features_graph(&self, g: &Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(invalid(format!("extractor expects square (N, 3, S, S) input, got {s:?}")));
        }
        self.output_size(s[2])?;
        let f = self.compress_graph(g, self.backbone_graph(g, x))?;
        Ok(self.attention_graph(g, f)?.out)
    }

    pub fn features(&self, store: &ParamStore, image: &ImageTensor, id: &str) -> Result<FeatureMap> {
        let g = Graph::new(store);
        let out = self.features_graph(&g, g.input(ImageTensor::batch(&[image])?))?;
        let v = g.value(out);
        ensure_finite("feature map", v.iter())?;
        Ok(FeatureMap {
            tensor: v.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("4-D"),
            provenance: id.to_string(),
        })
    }

    /// Pooled condition over readable images given as `(id, image)` pairs.
    pub fn static_condition(&self, store: &ParamStore, images: &[(&str, &ImageTensor)]) -> Result<ConditionalFeature> {
        let maps = images
            .iter()
            .map(|(id, im)| self.features(store, im, id))
            .collect::<Result<Vec<_>>>()?;
        build_static_condition(&maps)
    }
}

pub struct AttentionOutput {
    /// input plus attention output, same shape as the input
    pub out: Var,
    /// (N * heads, L, L), rows sum to one
    pub weights: Var,
}

/// Multi-head scaled dot-product self-attention over the `h * w` positions
/// of an (N, E, h, w) map with a residual connection. `proj` names the
/// query, key, value and output projections.
pub fn self_attention_graph(g: &Graph, fmap: Var, cfg: &AttentionConfig, proj: &[Linear; 4]) -> Result<AttentionOutput> {
    cfg.validate()?;
    let s = g.shape(fmap);
    if s.len() != 4 || s[1] != cfg.embed_dim {
        return Err(invalid(format!("attention expects (N, {}, h, w), got {s:?}", cfg.embed_dim)));
    }
    let (n, e, hh, ww) = (s[0], s[1], s[2], s[3]);
    let (l, heads, d) = (hh * ww, cfg.heads, cfg.head_dim());
    let tokens = g.reshape(g.permute(g.reshape(fmap, &[n, e, l]), &[0, 2, 1]), &[n * l, e]);
    let split = |v: Var| {
        let v = g.reshape(v, &[n, l, heads, d]);
        g.reshape(g.permute(v, &[0, 2, 1, 3]), &[n * heads, l, d])
    };
    let q = split(proj[0].forward(g, tokens));
    let k = split(proj[1].forward(g, tokens));
    let v = split(proj[2].forward(g, tokens));
    let scores = g.scale(g.bmm(q, g.permute(k, &[0, 2, 1])), 1.0 / (d as f64).sqrt());
    let weights = g.softmax_last(scores);
    let o = g.bmm(weights, v);
    let o = g.reshape(g.permute(g.reshape(o, &[n, heads, l, d]), &[0, 2, 1, 3]), &[n * l, e]);
    let o = proj[3].forward(g, o);
    let o = g.reshape(g.permute(g.reshape(o, &[n, l, e]), &[0, 2, 1]), &[n, e, hh, ww]);
    Ok(AttentionOutput {
        out: g.add(fmap, o),
        weights,
    })
}

/// Elementwise mean of the maps. The maps are summed in a canonical order
/// (by provenance, then by contents), so the result does not depend on the
/// order they are given in.
pub fn build_static_condition(maps: &[FeatureMap]) -> Result<ConditionalFeature> {
    let first = maps.first().ok_or_else(|| invalid("no readable images to pool"))?;
    if maps.iter().any(|m| m.tensor.dim() != first.tensor.dim()) {
        return Err(invalid("feature maps differ in shape"));
    }
    let mut order: Vec<&FeatureMap> = maps.iter().collect();
    order.sort_by(|a, b| {
        a.provenance.cmp(&b.provenance).then_with(|| {
            a.tensor
                .iter()
                .zip(b.tensor.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut sum = Array3::zeros(first.tensor.raw_dim());
    for m in order {
        sum += &m.tensor;
    }
    Ok(ConditionalFeature {
        map: FeatureMap {
            tensor: sum / maps.len() as f64,
            provenance: "pooled".into(),
        },
        n_sources: maps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fundus_nn::Graph;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk(kind: ExtractorKind) -> FeatureExtractor {
        FeatureExtractor::new(ExtractorConfig {
            kind,
            width: 4,
            attention: AttentionConfig { embed_dim: 8, heads: 2 },
            ..ExtractorConfig::default()
        })
        .unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
        ImageTensor::from_array(Array3::from_shape_simple_fn((size, size, 3), || rng.random::<f64>())).unwrap()
    }

    #[test]
    fn keys_and_labels() {
        for k in ExtractorKind::COMPARED {
            assert_eq!(ExtractorKind::from_key(k.key()).unwrap(), k);
            assert_eq!(ExtractorKind::from_key(&k.label()).unwrap(), k);
        }
        assert_eq!(ExtractorKind::Res34.label(), "self_attention+res34");
        assert!(ExtractorKind::from_key("res101").is_err());
    }

    #[test]
    fn default_embedding_width() {
        let fx = FeatureExtractor::new(ExtractorConfig {
            res34_layout: Res34Layout::Reduced10,
            ..ExtractorConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::new();
        fx.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::new(&store);
        let x = g.input(Tensor::from_elem(IxDyn(&[1, 3, 16, 16]), 0.5));
        assert_eq!(g.shape(fx.features_graph(&g, x).unwrap()), vec![1, 256, 2, 2]);
    }

    #[test]
    fn every_extractor_has_stride_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 32);
        for k in ExtractorKind::COMPARED {
            let fx = desk(k);
            let mut store = ParamStore::new();
            fx.init(&mut store, &mut rng);
            let a = fx.features(&store, &img, "a").unwrap();
            assert_eq!(a.tensor.dim(), (8, 4, 4), "{k:?}");
            assert_eq!(a, fx.features(&store, &img, "a").unwrap());
            let g = Graph::new(&store);
            let tap = fx.backbone_graph(&g, g.input(ImageTensor::batch(&[&img]).unwrap()));
            assert_eq!(g.shape(tap), vec![1, 16, 4, 4], "{k:?}");
        }
        let full = FeatureExtractor::new(ExtractorConfig {
            res34_layout: Res34Layout::Full34,
            ..desk(ExtractorKind::Res34).config
        })
        .unwrap();
        let mut store = ParamStore::new();
        full.init(&mut store, &mut rng);
        assert_eq!(full.features(&store, &img, "a").unwrap().tensor.dim(), (8, 4, 4));
        assert!(desk(ExtractorKind::Res18).output_size(30).is_err());
    }

    #[test]
    fn single_conv_zero_weights_give_bias() {
        let fx = desk(ExtractorKind::SingleConv);
        let mut store = ParamStore::new();
        fx.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        store.value_mut("cond/c0/weight").unwrap().fill(0.0);
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
        store
            .value_mut("cond/c0/bias")
            .unwrap()
            .assign(&Tensor::from_shape_vec(IxDyn(&[16]), bias.clone()).unwrap());
        let g = Graph::new(&store);
        let out = g.value(fx.backbone_graph(&g, g.input(Tensor::zeros(IxDyn(&[1, 3, 6, 6])))));
        assert_eq!(out.shape(), &[1, 16, 6, 6]);
        for c in 0..16 {
            let b = bias[c].max(0.0);
            assert!(out.index_axis(Axis(1), c).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn compression_is_nonnegative_and_checks_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = desk(ExtractorKind::Res18);
        let mut store = ParamStore::new();
        fx.init(&mut store, &mut rng);
        let g = Graph::new(&store);
        let f = g.input(Tensor::from_shape_simple_fn(IxDyn(&[2, 16, 3, 3]), || rng.random_range(-1.0..1.0)));
        let out = fx.compress_graph(&g, f).unwrap();
        assert_eq!(g.shape(out), vec![2, 8, 3, 3]);
        assert!(g.value(out).iter().all(|&v| v >= 0.0));
        let narrow = g.input(Tensor::zeros(IxDyn(&[1, 4, 3, 3])));
        assert!(fx.compress_graph(&g, narrow).is_err());
        assert!(FeatureExtractor::new(ExtractorConfig {
            width: 1,
            ..desk(ExtractorKind::Res18).config
        })
        .is_err());
    }

    #[test]
    fn identity_compression_is_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fx = FeatureExtractor::new(ExtractorConfig {
            kind: ExtractorKind::Res18,
            width: 2,
            attention: AttentionConfig { embed_dim: 8, heads: 2 },
            ..ExtractorConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::new();
        fx.init(&mut store, &mut rng);
        let w = store.value_mut("cond/compress/weight").unwrap();
        w.fill(0.0);
        for c in 0..8 {
            w[[c, c, 0, 0]] = 1.0;
        }
        let x = Tensor::from_shape_simple_fn(IxDyn(&[1, 8, 3, 4]), || rng.random_range(-2.0..2.0));
        let g = Graph::new(&store);
        let out = g.value(fx.compress_graph(&g, g.input(x.clone())).unwrap());
        for c in 0..8 {
            let plane: Vec<f64> = x.index_axis(Axis(1), c).iter().copied().collect();
            let mean = plane.iter().sum::<f64>() / 12.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            for (i, v) in plane.iter().enumerate() {
                let expected = ((v - mean) / (var + NORM_EPS).sqrt()).max(0.0);
                assert!((out[[0, c, i / 4, i % 4]] - expected).abs() < 1e-12);
            }
        }
    }

    fn attn_names() -> [Linear; 4] {
        ["q", "k", "v", "out"].map(|w| Linear::new(format!("t/{w}"), 0, 0))
    }

    fn set(store: &mut ParamStore, name: &str, t: Tensor) {
        store.insert(name.to_string(), t);
    }

    #[test]
    fn attention_rows_sum_to_one_and_uniform_for_equal_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig { embed_dim: 4, heads: 2 };
        let mut store = ParamStore::new();
        for w in ["q", "k", "v", "out"] {
            Linear::new(format!("t/{w}"), 4, 4).init(&mut store, &mut rng);
        }
        let g = Graph::new(&store);
        let x = g.input(Tensor::from_shape_simple_fn(IxDyn(&[2, 4, 3, 3]), || rng.random_range(-3.0..3.0)));
        let a = self_attention_graph(&g, x, &cfg, &attn_names()).unwrap();
        assert_eq!(g.shape(a.out), vec![2, 4, 3, 3]);
        let w = g.value(a.weights);
        assert_eq!(w.shape(), &[4, 9, 9]);
        for row in w.lanes(Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let same = g.input(Tensor::from_elem(IxDyn(&[1, 4, 2, 3]), 0.7));
        let u = g.value(self_attention_graph(&g, same, &cfg, &attn_names()).unwrap().weights);
        assert!(u.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
        let bad = AttentionConfig { embed_dim: 4, heads: 3 };
        assert!(matches!(self_attention_graph(&g, x, &bad, &attn_names()), Err(Error::Config(_))));
    }

    #[test]
    fn two_token_attention_oracle() {
        let mut store = ParamStore::new();
        let eye = Tensor::from_shape_fn(IxDyn(&[2, 2]), |d| if d[0] == d[1] { 1.0 } else { 0.0 });
        for w in ["q", "k", "v", "out"] {
            set(&mut store, &format!("t/{w}/weight"), eye.clone());
            set(&mut store, &format!("t/{w}/bias"), Tensor::zeros(IxDyn(&[2])));
        }
        // q_w = 2 * identity
        set(&mut store, "t/q/weight", &eye * 2.0);
        let tokens = [[0.3, -1.1], [0.8, 0.4]];
        let x = Tensor::from_shape_fn(IxDyn(&[1, 2, 1, 2]), |d| tokens[d[3]][d[1]]);
        let g = Graph::new(&store);
        let cfg = AttentionConfig { embed_dim: 2, heads: 1 };
        let out = g.value(self_attention_graph(&g, g.input(x), &cfg, &attn_names()).unwrap().out);
        for i in 0..2 {
            let scores: Vec<f64> = (0..2)
                .map(|j| 2.0 * (tokens[i][0] * tokens[j][0] + tokens[i][1] * tokens[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..2 {
                let att: f64 = (0..2).map(|j| scores[j].exp() / z * tokens[j][c]).sum();
                assert!((out[[0, c, 0, i]] - (tokens[i][c] + att)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_storage_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AttentionConfig { embed_dim: 6, heads: 3 };
        let mut store = ParamStore::new();
        for w in ["q", "k", "v", "out"] {
            Linear::new(format!("t/{w}"), 6, 6).init(&mut store, &mut rng);
        }
        // rotate head blocks: rows of q, k, v and columns of out
        let perm: Vec<usize> = (0..6).map(|i| (i + 2) % 6).collect();
        let mut swapped = store.clone();
        for w in ["q", "k", "v"] {
            let wt = store.value(&format!("t/{w}/weight")).unwrap().clone();
            let b = store.value(&format!("t/{w}/bias")).unwrap().clone();
            *swapped.value_mut(&format!("t/{w}/weight")).unwrap() = Tensor::from_shape_fn(IxDyn(&[6, 6]), |d| wt[[perm[d[0]], d[1]]]);
            *swapped.value_mut(&format!("t/{w}/bias")).unwrap() = Tensor::from_shape_fn(IxDyn(&[6]), |d| b[[perm[d[0]]]]);
        }
        let o = store.value("t/out/weight").unwrap().clone();
        *swapped.value_mut("t/out/weight").unwrap() = Tensor::from_shape_fn(IxDyn(&[6, 6]), |d| o[[d[0], perm[d[1]]]]);
        let x = Tensor::from_shape_simple_fn(IxDyn(&[1, 6, 2, 2]), || rng.random_range(-1.0..1.0));
        let run = |s: &ParamStore| {
            let g = Graph::new(s);
            let out = self_attention_graph(&g, g.input(x.clone()), &cfg, &attn_names()).unwrap().out;
            (*g.value(out)).clone()
        };
        let (a, b) = (run(&store), run(&swapped));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn pooling_is_mean_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(build_static_condition(&[]).is_err());
        let maps: Vec<FeatureMap> = (0..10)
            .map(|i| FeatureMap {
                tensor: Array3::from_shape_simple_fn((3, 2, 2), || rng.random_range(-1.0..1.0)),
                provenance: format!("img{i}"),
            })
            .collect();
        let single = build_static_condition(&maps[..1]).unwrap();
        assert_eq!(single.map.tensor, maps[0].tensor);
        assert_eq!(single.n_sources, 1);
        let two = build_static_condition(&maps[..2]).unwrap();
        let half = (&maps[0].tensor + &maps[1].tensor) / 2.0;
        assert!(two.map.tensor.iter().zip(half.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        let pooled = build_static_condition(&maps).unwrap();
        let mut shuffled = maps.clone();
        for k in 0..20 {
            shuffled.swap(k % 10, (k * 7 + 3) % 10);
            assert_eq!(build_static_condition(&shuffled).unwrap(), pooled);
        }
        let back = ConditionalFeature::from_batched(&pooled.batched(), 10).unwrap();
        assert_eq!(back.map.tensor, pooled.map.tensor);
    }

    #[test]
    fn static_condition_from_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fx = desk(ExtractorKind::MobilenetLike);
        let mut store = ParamStore::new();
        fx.init(&mut store, &mut rng);
        let imgs: Vec<ImageTensor> = (0..3).map(|_| rand_image(&mut rng, 16)).collect();
        let pairs: Vec<(&str, &ImageTensor)> = ["a", "b", "c"].into_iter().zip(imgs.iter()).collect();
        let c = fx.static_condition(&store, &pairs).unwrap();
        assert_eq!(c.n_sources, 3);
        let mean = imgs
            .iter()
            .zip(["a", "b", "c"])
            .map(|(im, id)| fx.features(&store, im, id).unwrap().tensor)
            .fold(Array3::<f64>::zeros((8, 2, 2)), |acc, t| acc + t)
            / 3.0;
        assert!(c.map.tensor.iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-7));
    }
}

//! Per-modality encoders.
//!
//! Each modality gets its own backbone: a flatten + MLP or a small
//! conv/avgpool network followed by a dense layer. The backbone output is
//! the *representation* used downstream; an optional projection head maps it
//! to the *embedding* fed to the contrastive loss during pre-training only.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::rng;
use crate::tensor::{ParamSet, Tensor};

/// Shape of one sensor modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub id: usize,
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModalitySpec {
    pub fn new(id: usize, name: &str, channels: usize, height: usize, width: usize) -> Self {
        ModalitySpec { id, name: name.into(), channels, height, width }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderKind {
    /// Flatten, then dense + ReLU per hidden size, then a dense output layer.
    Mlp { hidden: Vec<usize> },
    /// conv → ReLU → 2×2 average pool per stage, then a dense output layer.
    SmallCnn { stages: Vec<ConvStage> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHead {
    pub enabled: bool,
    pub hidden: usize,
    pub out: usize,
}

impl Default for ProjectionHead {
    fn default() -> Self {
        ProjectionHead { enabled: false, hidden: 64, out: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub output_dim: usize,
    #[serde(default)]
    pub projection: ProjectionHead,
}

impl EncoderSpec {
    pub fn mlp(hidden: &[usize], output_dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Mlp { hidden: hidden.to_vec() },
            output_dim,
            projection: ProjectionHead::default(),
        }
    }

    pub fn small_cnn(stages: &[ConvStage], output_dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::SmallCnn { stages: stages.to_vec() },
            output_dim,
            projection: ProjectionHead::default(),
        }
    }

    /// Width of the vector handed to the contrastive loss.
    pub fn embedding_dim(&self) -> usize {
        if self.projection.enabled {
            self.projection.out
        } else {
            self.output_dim
        }
    }
}

/// Default desk-scale backbone for a modality: a small CNN for the
/// highest-resolution modality, MLPs elsewhere.
pub fn default_encoder_spec(high_resolution: bool) -> EncoderSpec {
    if high_resolution {
        EncoderSpec::small_cnn(
            &[
                ConvStage { out_channels: 8, kernel: 2, stride: 2 },
                ConvStage { out_channels: 8, kernel: 3, stride: 1 },
            ],
            32,
        )
    } else {
        EncoderSpec::mlp(&[32, 32], 32)
    }
}

#[derive(Debug, Clone)]
struct ParamShape {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
}

/// Backbone architecture for one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub modality: ModalitySpec,
    pub spec: EncoderSpec,
}

/// Outputs of one forward pass over a batch of images.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOutput {
    /// Backbone output, `n × output_dim`.
    pub representation: Var,
    /// Projection-head output when the head is enabled.
    pub projection: Option<Var>,
}

impl EncodeOutput {
    /// The vector the contrastive loss sees (before normalization).
    pub fn embedding(&self) -> Var {
        self.projection.unwrap_or(self.representation)
    }
}

impl Encoder {
    pub fn new(modality: ModalitySpec, spec: EncoderSpec) -> Result<Self> {
        let enc = Encoder { modality, spec };
        enc.param_shapes()?;
        Ok(enc)
    }

    pub fn prefix(&self) -> String {
        format!("{}/", self.modality.name)
    }

    fn dense_shapes(&self, out: &mut Vec<ParamShape>, layer: &str, din: usize, dout: usize) {
        let p = &self.modality.name;
        out.push(ParamShape { name: format!("{p}/{layer}/w"), shape: vec![din, dout], fan_in: din, fan_out: dout, bias: false });
        out.push(ParamShape { name: format!("{p}/{layer}/b"), shape: vec![dout], fan_in: din, fan_out: dout, bias: true });
    }

    fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let m = &self.modality;
        if m.channels == 0 || m.height == 0 || m.width == 0 {
            return Err(Error::Config(format!("modality {} has an empty image shape", m.name)));
        }
        if self.spec.output_dim == 0 {
            return Err(Error::Config(format!("encoder for {} has output_dim 0", m.name)));
        }
        let mut out = Vec::new();
        let flat = match &self.spec.kind {
            EncoderKind::Mlp { hidden } => {
                let mut din = m.pixels();
                for (i, &h) in hidden.iter().enumerate() {
                    if h == 0 {
                        return Err(Error::Config(format!("{}: hidden layer {i} has width 0", m.name)));
                    }
                    self.dense_shapes(&mut out, &format!("fc{i}"), din, h);
                    din = h;
                }
                din
            }
            EncoderKind::SmallCnn { stages } => {
                let (mut c, mut h, mut w) = (m.channels, m.height, m.width);
                for (i, st) in stages.iter().enumerate() {
                    if st.kernel == 0 || st.stride == 0 || st.out_channels == 0 {
                        return Err(Error::Config(format!("{}: conv stage {i} has a zero size", m.name)));
                    }
                    if st.kernel > h || st.kernel > w {
                        return Err(Error::Config(format!(
                            "{}: conv stage {i} kernel {} exceeds {h}×{w}",
                            m.name, st.kernel
                        )));
                    }
                    let oh = (h - st.kernel) / st.stride + 1;
                    let ow = (w - st.kernel) / st.stride + 1;
                    if oh % 2 != 0 || ow % 2 != 0 {
                        return Err(Error::Config(format!(
                            "{}: conv stage {i} produces {oh}×{ow}, which 2×2 pooling cannot halve",
                            m.name
                        )));
                    }
                    let k = st.kernel;
                    out.push(ParamShape {
                        name: format!("{}/conv{i}/k", m.name),
                        shape: vec![st.out_channels, c, k, k],
                        fan_in: c * k * k,
                        fan_out: st.out_channels * k * k,
                        bias: false,
                    });
                    c = st.out_channels;
                    h = oh / 2;
                    w = ow / 2;
                }
                c * h * w
            }
        };
        self.dense_shapes(&mut out, "out", flat, self.spec.output_dim);
        let proj = self.spec.projection;
        if proj.enabled {
            if proj.hidden == 0 || proj.out == 0 {
                return Err(Error::Config(format!("{}: projection head has a zero size", m.name)));
            }
            self.dense_shapes(&mut out, "proj/fc0", self.spec.output_dim, proj.hidden);
            self.dense_shapes(&mut out, "proj/fc1", proj.hidden, proj.out);
        }
        Ok(out)
    }

    /// Xavier-uniform weights, zero biases, one random stream per parameter name.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        for ps in self.param_shapes()? {
            let n: usize = ps.shape.iter().product();
            let values = if ps.bias {
                vec![0.0; n]
            } else {
                let a = libm::sqrt(6.0 / (ps.fan_in + ps.fan_out) as f64);
                let mut r = rng::stream(seed, &ps.name, &[]);
                (0..n).map(|_| r.random_range(-a..a)).collect()
            };
            params.insert(ps.name, Tensor::new(ps.shape, values)?)?;
        }
        Ok(params)
    }

    /// Names of the parameters owned by the projection head.
    pub fn projection_prefix(&self) -> String {
        format!("{}/proj/", self.modality.name)
    }

    /// Forward a batch `n × c × h × w` of images.
    pub fn forward(&self, g: &mut Graph, params: &Bound, images: Var) -> Result<EncodeOutput> {
        let m = &self.modality;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != m.image_shape() {
            return Err(Error::Dimension(format!(
                "{} encoder expects n×{}×{}×{} images, got {shape:?}",
                m.name, m.channels, m.height, m.width
            )));
        }
        let n = shape[0];
        let p = &m.name;
        let mut x = match &self.spec.kind {
            EncoderKind::Mlp { hidden } => {
                let mut x = g.reshape(images, vec![n, m.pixels()])?;
                for i in 0..hidden.len() {
                    let w = params.get(&format!("{p}/fc{i}/w"))?;
                    let b = params.get(&format!("{p}/fc{i}/b"))?;
                    x = g.dense(x, w, b)?;
                    x = g.relu(x)?;
                }
                x
            }
            EncoderKind::SmallCnn { stages } => {
                let mut x = images;
                for (i, st) in stages.iter().enumerate() {
                    let k = params.get(&format!("{p}/conv{i}/k"))?;
                    x = g.conv2d(x, k, st.stride)?;
                    x = g.relu(x)?;
                    x = g.avgpool2(x)?;
                }
                let flat = g.value(x).len() / n;
                g.reshape(x, vec![n, flat])?
            }
        };
        x = g.dense(x, params.get(&format!("{p}/out/w"))?, params.get(&format!("{p}/out/b"))?)?;
        let representation = x;
        let projection = if self.spec.projection.enabled {
            let h = g.dense(x, params.get(&format!("{p}/proj/fc0/w"))?, params.get(&format!("{p}/proj/fc0/b"))?)?;
            let h = g.relu(h)?;
            Some(g.dense(h, params.get(&format!("{p}/proj/fc1/w"))?, params.get(&format!("{p}/proj/fc1/b"))?)?)
        } else {
            None
        };
        Ok(EncodeOutput { representation, projection })
    }

    /// Stack images into one `n × c × h × w` tensor, checking each shape.
    pub fn stack(&self, images: &[&Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Contract(format!("no {} images to stack", self.modality.name)));
        }
        let mut values = Vec::with_capacity(images.len() * self.modality.pixels());
        for img in images {
            if img.shape() != self.modality.image_shape() {
                return Err(Error::Dimension(format!(
                    "{} image has shape {:?}, expected {:?}",
                    self.modality.name,
                    img.shape(),
                    self.modality.image_shape()
                )));
            }
            values.extend_from_slice(img.values());
        }
        let [c, h, w] = self.modality.image_shape();
        Tensor::new(vec![images.len(), c, h, w], values)
    }
}

/// One encoder per modality with a single namespaced parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBundle {
    encoders: BTreeMap<usize, Encoder>,
    pub params: ParamSet,
}

impl EncoderBundle {
    /// Fresh bundle; each modality's weights come from its own seed substream.
    pub fn init(encoders: Vec<Encoder>, seed: u64) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut params = ParamSet::new();
        for enc in encoders {
            let id = enc.modality.id;
            params.merge(enc.init(rng::derive_seed(seed, "encoder", &[id as u64]))?)?;
            if map.insert(id, enc).is_some() {
                return Err(Error::Config(format!("modality {id} listed twice")));
            }
        }
        Ok(EncoderBundle { encoders: map, params })
    }

    /// Reassemble a bundle from saved parameters, checking names and shapes.
    pub fn from_parts(encoders: Vec<Encoder>, params: ParamSet) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut expected = 0;
        for enc in encoders {
            for ps in enc.param_shapes()? {
                let t = params
                    .get(&ps.name)
                    .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {}", ps.name)))?;
                if t.shape() != ps.shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        ps.name,
                        t.shape(),
                        ps.shape
                    )));
                }
                expected += 1;
            }
            if map.insert(enc.modality.id, enc).is_some() {
                return Err(Error::Config("modality listed twice".into()));
            }
        }
        if expected != params.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, architecture expects {expected}",
                params.len()
            )));
        }
        Ok(EncoderBundle { encoders: map, params })
    }

    pub fn modalities(&self) -> Vec<usize> {
        self.encoders.keys().copied().collect()
    }

    pub fn encoders(&self) -> impl Iterator<Item = &Encoder> {
        self.encoders.values()
    }

    pub fn encoder(&self, modality: usize) -> Result<&Encoder> {
        self.encoders.get(&modality).ok_or(Error::UnknownModality(modality))
    }

    pub fn params_for(&self, modality: usize) -> Result<ParamSet> {
        Ok(self.params.with_prefix(&self.encoder(modality)?.prefix()))
    }

    /// Keep only `modalities` and drop projection heads, for downstream use.
    pub fn backbones_for(&self, modalities: &[usize]) -> Result<EncoderBundle> {
        let mut encoders = BTreeMap::new();
        let mut params = ParamSet::new();
        for &m in modalities {
            let enc = self.encoder(m)?;
            let mut p = self.params_for(m)?;
            p.remove_prefix(&enc.projection_prefix());
            params.merge(p)?;
            let mut enc = enc.clone();
            enc.spec.projection.enabled = false;
            encoders.insert(m, enc);
        }
        Ok(EncoderBundle { encoders, params })
    }

    /// Representations (no gradients) for a batch of images of one modality,
    /// returned as `n` rows of `output_dim`.
    pub fn encode_batch(&self, modality: usize, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        self.run_batch(modality, images, false)
    }

    /// L2-normalized contrastive embeddings (projection output when enabled).
    pub fn embed_batch(&self, modality: usize, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        self.run_batch(modality, images, true)
    }

    fn run_batch(&self, modality: usize, images: &[&Tensor], embed: bool) -> Result<Vec<Vec<f64>>> {
        let enc = self.encoder(modality)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params_for(modality)?, false);
        let x = g.constant(&enc.stack(images)?);
        let out = enc.forward(&mut g, &bound, x)?;
        let v = if embed {
            let e = out.embedding();
            g.l2_normalize(e)?
        } else {
            out.representation
        };
        let d = *g.shape(v).last().expect("non-empty shape");
        Ok(g.value(v).chunks(d).map(<[f64]>::to_vec).collect())
    }
}

/// Representation of a single image.
pub fn encode(bundle: &EncoderBundle, modality: usize, image: &Tensor) -> Result<Vec<f64>> {
    let mut rows = bundle.encode_batch(modality, &[image])?;
    Ok(rows.remove(0))
}

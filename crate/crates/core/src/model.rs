//! Encoder `E(·)` producing the spatial feature map `F`, projection head
//! `P(·)` producing the unit-norm embedding `f`, and reverse-mode access to
//! `∂L/∂F` and to parameter gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GrassError, Result};
use crate::nn::{relu, relu_backward, Conv2d, Linear, ParamStore};
use crate::rng::{self, tag};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    ToyConvnet,
    ResnetStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    /// Channels `D` of the final spatial map.
    pub feature_dim: usize,
    /// Input-to-feature downscale factor; a power of two.
    pub stride: usize,
    /// Channel width of each stride-2 stage; one entry per halving.
    pub widths: Vec<usize>,
    pub input_channels: usize,
    pub bias: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::ToyConvnet,
            feature_dim: 32,
            stride: 8,
            widths: vec![16, 32, 32],
            input_channels: 3,
            bias: true,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_dim >= 1, Config, "encoder.feature_dim must be >= 1");
        ensure!(
            self.stride >= 2 && self.stride.is_power_of_two(),
            Config,
            "encoder.stride must be a power of two >= 2"
        );
        ensure!(
            self.widths.len() == self.stride.trailing_zeros() as usize,
            Config,
            "encoder.widths needs one entry per stride-2 stage ({} for stride {})",
            self.stride.trailing_zeros(),
            self.stride
        );
        ensure!(self.widths.iter().all(|&w| w >= 1), Config, "encoder widths must be >= 1");
        ensure!(self.input_channels >= 1, Config, "encoder.input_channels must be >= 1");
        Ok(())
    }

    /// Spatial shape of `F` for an `h × w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            output_dim: 32,
        }
    }
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.output_dim >= 1, Config, "projector.output_dim must be >= 1");
        ensure!(
            self.hidden_dims.iter().all(|&d| d >= 1),
            Config,
            "projector hidden dims must be >= 1"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv2d),
    Relu,
    Residual(ResidualBlock),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor3),
    ReluOut(Tensor3),
    Residual {
        input: Tensor3,
        hidden: Tensor3,
        output: Tensor3,
    },
}

/// Per-sample intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    layers: Vec<LayerCache>,
    pub features: Tensor3,
    pooled: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    unnormalized: Vec<f64>,
    pub projection: Vec<f64>,
}

/// Result of a batched forward pass, tied to the model state that
/// produced it.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    model_id: u64,
    generation: u64,
    pub samples: Vec<SampleTrace>,
}

impl ForwardPass {
    pub fn features(&self) -> impl Iterator<Item = &Tensor3> {
        self.samples.iter().map(|s| &s.features)
    }

    pub fn projections(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.projection.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Spatial feature map `F` and its pooled, normalized projection `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub features: Tensor3,
    pub projection: Vec<f64>,
}

/// Upstream gradient of a scalar loss: through the projections, and
/// optionally directly on the feature maps.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub d_projection: Vec<Vec<f64>>,
    pub d_features: Option<Vec<Tensor3>>,
}

impl Upstream {
    pub fn from_projection_grad(d_projection: Vec<Vec<f64>>) -> Self {
        Self {
            d_projection,
            d_features: None,
        }
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct Model {
    pub encoder_spec: EncoderSpec,
    pub projector_spec: ProjectorSpec,
    params: ParamStore,
    encoder: Vec<Layer>,
    projector: Vec<Linear>,
    encoder_param_len: usize,
    id: u64,
    generation: u64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            encoder_spec: self.encoder_spec.clone(),
            projector_spec: self.projector_spec.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            encoder_param_len: self.encoder_param_len,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

fn conv(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    bias: bool,
) -> Conv2d {
    let weight = store.alloc(format!("{name}.weight"), out_ch * in_ch * kernel * kernel);
    let bias = bias.then(|| store.alloc(format!("{name}.bias"), out_ch));
    Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding: kernel / 2,
        weight,
        bias,
    }
}

impl Model {
    /// Builds the encoder and projector with He-normal weights drawn from
    /// `seed`; biases start at zero.
    pub fn new(encoder_spec: EncoderSpec, projector_spec: ProjectorSpec, seed: u64) -> Result<Self> {
        encoder_spec.validate()?;
        projector_spec.validate()?;
        let mut store = ParamStore::default();
        let b = encoder_spec.bias;
        let mut layers = Vec::new();
        let mut ch = encoder_spec.input_channels;
        let d = encoder_spec.feature_dim;
        match encoder_spec.architecture {
            Architecture::ToyConvnet => {
                for (s, &w) in encoder_spec.widths.iter().enumerate() {
                    layers.push(Layer::Conv(conv(&mut store, &format!("enc.stage{s}"), ch, w, 3, 2, b)));
                    layers.push(Layer::Relu);
                    ch = w;
                }
                layers.push(Layer::Conv(conv(&mut store, "enc.head", ch, d, 3, 1, b)));
                layers.push(Layer::Relu);
            }
            Architecture::ResnetStyle => {
                let w0 = encoder_spec.widths[0];
                layers.push(Layer::Conv(conv(&mut store, "enc.stem", ch, w0, 3, 2, b)));
                layers.push(Layer::Relu);
                ch = w0;
                let mut stages: Vec<(usize, usize)> =
                    encoder_spec.widths[1..].iter().map(|&w| (w, 2)).collect();
                stages.push((d, 1));
                for (s, (w, stride)) in stages.into_iter().enumerate() {
                    let name = format!("enc.block{s}");
                    let conv1 = conv(&mut store, &format!("{name}.conv1"), ch, w, 3, stride, b);
                    let conv2 = conv(&mut store, &format!("{name}.conv2"), w, w, 3, 1, b);
                    let shortcut = (stride != 1 || ch != w)
                        .then(|| conv(&mut store, &format!("{name}.shortcut"), ch, w, 1, stride, b));
                    layers.push(Layer::Residual(ResidualBlock {
                        conv1,
                        conv2,
                        shortcut,
                    }));
                    ch = w;
                }
            }
        }
        let encoder_param_len = store.len();
        let mut projector = Vec::new();
        let mut dim = d;
        let dims: Vec<usize> = projector_spec
            .hidden_dims
            .iter()
            .copied()
            .chain([projector_spec.output_dim])
            .collect();
        for (i, &out) in dims.iter().enumerate() {
            let weight = store.alloc(format!("proj.fc{i}.weight"), out * dim);
            let bias = store.alloc(format!("proj.fc{i}.bias"), out);
            projector.push(Linear {
                inputs: dim,
                outputs: out,
                weight,
                bias,
            });
            dim = out;
        }

        let mut rng = rng::stream(seed, &[tag::INIT]);
        let weights: Vec<(std::ops::Range<usize>, usize)> = layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![(c.weight.clone(), c.fan_in())],
                Layer::Relu => vec![],
                Layer::Residual(r) => [&r.conv1, &r.conv2]
                    .into_iter()
                    .chain(r.shortcut.as_ref())
                    .map(|c| (c.weight.clone(), c.fan_in()))
                    .collect(),
            })
            .chain(projector.iter().map(|l| (l.weight.clone(), l.inputs)))
            .collect();
        for (range, fan_in) in weights {
            store.init_he(range, fan_in, &mut rng);
        }

        Ok(Self {
            encoder_spec,
            projector_spec,
            params: store,
            encoder: layers,
            projector,
            encoder_param_len,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    /// Mutable access to the flat parameter buffer. Invalidates every
    /// outstanding [`ForwardPass`].
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params.data
    }

    pub fn encoder_params(&self) -> &[f64] {
        &self.params.data[..self.encoder_param_len]
    }

    pub fn encoder_param_len(&self) -> usize {
        self.encoder_param_len
    }

    pub fn encoder_hash(&self) -> String {
        crate::nn::hash_params(self.encoder_params())
    }

    pub fn param_hash(&self) -> String {
        crate::nn::hash_params(&self.params.data)
    }

    /// Replaces all parameters; the layout must match.
    pub fn load_params(&mut self, values: &[f64]) -> Result<()> {
        ensure!(
            values.len() == self.params.len(),
            Checkpoint,
            "parameter count {} does not match model ({})",
            values.len(),
            self.params.len()
        );
        self.params_mut().copy_from_slice(values);
        Ok(())
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        ensure!(
            x.channels == self.encoder_spec.input_channels && x.height > 0 && x.width > 0,
            Model,
            "input has {} channels, encoder expects {}",
            x.channels,
            self.encoder_spec.input_channels
        );
        Ok(())
    }

    fn encode_traced(&self, x: &Tensor3) -> (Tensor3, Vec<LayerCache>) {
        let p = &self.params.data;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            match layer {
                Layer::Conv(c) => {
                    let next = c.forward(p, &cur);
                    caches.push(LayerCache::Input(std::mem::replace(&mut cur, next)));
                }
                Layer::Relu => {
                    relu(&mut cur);
                    caches.push(LayerCache::ReluOut(cur.clone()));
                }
                Layer::Residual(r) => {
                    let mut hidden = r.conv1.forward(p, &cur);
                    relu(&mut hidden);
                    let mut out = r.conv2.forward(p, &hidden);
                    match &r.shortcut {
                        Some(sc) => out.add_assign(&sc.forward(p, &cur)),
                        None => out.add_assign(&cur),
                    }
                    relu(&mut out);
                    let input = std::mem::replace(&mut cur, out.clone());
                    caches.push(LayerCache::Residual {
                        input,
                        hidden,
                        output: out,
                    });
                }
            }
        }
        (cur, caches)
    }

    fn project_traced(&self, features: &Tensor3) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let p = &self.params.data;
        let hw = features.plane_len() as f64;
        let pooled: Vec<f64> = (0..features.channels)
            .map(|c| features.plane(c).iter().sum::<f64>() / hw)
            .collect();
        let mut hidden = Vec::new();
        let mut cur = pooled.clone();
        let last = self.projector.len() - 1;
        for (i, lin) in self.projector.iter().enumerate() {
            let mut next = lin.forward(p, &cur);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
                hidden.push(next.clone());
            }
            cur = next;
        }
        let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let projection = cur.iter().map(|v| v / norm).collect();
        (pooled, hidden, cur, projection)
    }

    /// `F = E(view)`.
    pub fn encode(&self, view: &Tensor3) -> Result<Tensor3> {
        self.check_input(view)?;
        let f = self.encode_traced(view).0;
        ensure!(f.is_finite(), Numeric, "non-finite feature map");
        Ok(f)
    }

    /// `f = P(F)`, L2-normalized.
    pub fn project(&self, features: &Tensor3) -> Result<Vec<f64>> {
        ensure!(
            features.channels == self.encoder_spec.feature_dim,
            Model,
            "feature map has {} channels, projector expects {}",
            features.channels,
            self.encoder_spec.feature_dim
        );
        Ok(self.project_traced(features).3)
    }

    pub fn feature_map(&self, view: &Tensor3) -> Result<FeatureMap> {
        let features = self.encode(view)?;
        let projection = self.project(&features)?;
        Ok(FeatureMap {
            features,
            projection,
        })
    }

    /// Encodes and projects every view, retaining what the backward pass
    /// needs.
    pub fn forward(&self, views: &[&Tensor3]) -> Result<ForwardPass> {
        for v in views {
            self.check_input(v)?;
        }
        let samples: Vec<SampleTrace> = views
            .par_iter()
            .map(|v| {
                let (features, layers) = self.encode_traced(v);
                let (pooled, hidden, unnormalized, projection) = self.project_traced(&features);
                SampleTrace {
                    layers,
                    features,
                    pooled,
                    hidden,
                    unnormalized,
                    projection,
                }
            })
            .collect();
        ensure!(
            samples.iter().all(|s| s.projection.iter().all(|v| v.is_finite())),
            Numeric,
            "non-finite projection"
        );
        Ok(ForwardPass {
            model_id: self.id,
            generation: self.generation,
            samples,
        })
    }

    fn check_attached(&self, pass: &ForwardPass, upstream: &Upstream) -> Result<()> {
        if pass.model_id != self.id || pass.generation != self.generation {
            return Err(GrassError::Usage(
                "forward pass is detached from this model state".into(),
            ));
        }
        ensure!(
            upstream.d_projection.len() == pass.len(),
            Usage,
            "upstream gradient has {} entries, forward pass has {}",
            upstream.d_projection.len(),
            pass.len()
        );
        if let Some(df) = &upstream.d_features {
            ensure!(df.len() == pass.len(), Usage, "feature gradient count mismatch");
        }
        Ok(())
    }

    fn projector_backward(&self, s: &SampleTrace, df: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let p = &self.params.data;
        let norm = s.unnormalized.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let dot: f64 = s.projection.iter().zip(df).map(|(a, b)| a * b).sum();
        let mut g: Vec<f64> = df
            .iter()
            .zip(&s.projection)
            .map(|(d, f)| (d - f * dot) / norm)
            .collect();
        for (i, lin) in self.projector.iter().enumerate().rev() {
            let input = if i == 0 { &s.pooled } else { &s.hidden[i - 1] };
            g = lin.backward(p, input, &g, grad.as_deref_mut());
            if i > 0 {
                for (gv, hv) in g.iter_mut().zip(&s.hidden[i - 1]) {
                    if *hv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        }
        g
    }

    fn feature_grad(&self, s: &SampleTrace, idx: usize, up: &Upstream, grad: Option<&mut [f64]>) -> Tensor3 {
        let d_pooled = self.projector_backward(s, &up.d_projection[idx], grad);
        let f = &s.features;
        let hw = f.plane_len() as f64;
        let mut d_f = Tensor3::zeros(f.channels, f.height, f.width);
        for (c, g) in d_pooled.iter().enumerate() {
            d_f.plane_mut(c).fill(g / hw);
        }
        if let Some(direct) = &up.d_features {
            d_f.add_assign(&direct[idx]);
        }
        d_f
    }

    /// Exact `∂L/∂F` for every sample of `pass`. Parameters are untouched.
    pub fn grad_wrt_feature(&self, pass: &ForwardPass, upstream: &Upstream) -> Result<Vec<Tensor3>> {
        self.check_attached(pass, upstream)?;
        Ok(pass
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.feature_grad(s, i, upstream, None))
            .collect())
    }

    /// Gradient of the loss with respect to every parameter, summed over
    /// samples in index order.
    pub fn param_grad(&self, pass: &ForwardPass, upstream: &Upstream) -> Result<Vec<f64>> {
        self.check_attached(pass, upstream)?;
        let per_sample: Vec<Vec<f64>> = pass
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut g = vec![0.0; self.params.len()];
                let d_f = self.feature_grad(s, i, upstream, Some(&mut g));
                self.encoder_backward(s, d_f, &mut g);
                g
            })
            .collect();
        let mut total = vec![0.0; self.params.len()];
        for g in per_sample {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok(total)
    }

    /// Back-propagates `d = ∂L/∂F` through the encoder into `grad`.
    fn encoder_backward(&self, s: &SampleTrace, mut d: Tensor3, grad: &mut [f64]) {
        let p = &self.params.data;
        for (li, (layer, cache)) in self.encoder.iter().zip(&s.layers).enumerate().rev() {
            let need_dx = li > 0;
            match (layer, cache) {
                (Layer::Relu, LayerCache::ReluOut(y)) => relu_backward(y, &mut d),
                (Layer::Conv(c), LayerCache::Input(x)) => {
                    match c.backward(p, x, &d, Some(grad), need_dx) {
                        Some(dx) => d = dx,
                        None => return,
                    }
                }
                (Layer::Residual(r), LayerCache::Residual { input, hidden, output }) => {
                    relu_backward(output, &mut d);
                    let mut dh = r
                        .conv2
                        .backward(p, hidden, &d, Some(grad), true)
                        .expect("dx requested");
                    relu_backward(hidden, &mut dh);
                    let mut dx = r
                        .conv1
                        .backward(p, input, &dh, Some(grad), need_dx)
                        .unwrap_or_else(|| Tensor3::zeros(0, 0, 0));
                    let d_short = match &r.shortcut {
                        Some(sc) => sc.backward(p, input, &d, Some(grad), need_dx),
                        None => need_dx.then(|| d.clone()),
                    };
                    match d_short {
                        Some(ds) => {
                            dx.add_assign(&ds);
                            d = dx;
                        }
                        None => return,
                    }
                }
                _ => unreachable!("layer/cache mismatch"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64, h: usize, w: usize) -> Tensor3 {
        use rand::Rng;
        let mut r = rng::stream(seed, &[99]);
        Tensor3::from_vec(3, h, w, (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn toy_feature_shape() {
        let m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 0).unwrap();
        let f = m.encode(&input(1, 64, 64)).unwrap();
        assert_eq!(f.shape(), (32, 8, 8));
        let f = m.encode(&input(1, 30, 17)).unwrap();
        assert_eq!((f.height, f.width), EncoderSpec::default().feature_hw(30, 17));
    }

    #[test]
    fn resnet_feature_shape() {
        let spec = EncoderSpec {
            architecture: Architecture::ResnetStyle,
            ..EncoderSpec::default()
        };
        let m = Model::new(spec, ProjectorSpec::default(), 0).unwrap();
        assert_eq!(m.encode(&input(2, 64, 64)).unwrap().shape(), (32, 8, 8));
        assert_eq!(m.encode(&input(2, 33, 40)).unwrap().shape(), (32, 5, 5));
    }

    #[test]
    fn bias_free_zero_input_gives_zero_features() {
        let spec = EncoderSpec {
            bias: false,
            ..EncoderSpec::default()
        };
        let m = Model::new(spec, ProjectorSpec::default(), 4).unwrap();
        let f = m.encode(&Tensor3::zeros(3, 64, 64)).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_forward() {
        let m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 4).unwrap();
        let x = input(5, 64, 64);
        assert_eq!(m.feature_map(&x).unwrap(), m.feature_map(&x).unwrap());
        let m2 = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 4).unwrap();
        assert_eq!(m.param_hash(), m2.param_hash());
    }

    #[test]
    fn wrong_channel_count_is_model_error() {
        let m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 4).unwrap();
        assert!(matches!(m.encode(&Tensor3::zeros(1, 64, 64)), Err(GrassError::Model(_))));
    }

    #[test]
    fn projections_are_unit_norm() {
        let m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 6).unwrap();
        for s in 0..5 {
            let f = m.feature_map(&input(s, 32, 32)).unwrap().projection;
            let n: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_of_features_has_unit_gradient() {
        let m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 6).unwrap();
        let xs = [input(1, 32, 32), input(2, 32, 32)];
        let pass = m.forward(&xs.iter().collect::<Vec<_>>()).unwrap();
        let ones: Vec<Tensor3> = pass
            .features()
            .map(|f| Tensor3::filled(f.channels, f.height, f.width, 1.0))
            .collect();
        let up = Upstream {
            d_projection: vec![vec![0.0; 32]; 2],
            d_features: Some(ones),
        };
        for g in m.grad_wrt_feature(&pass, &up).unwrap() {
            assert!(g.data.iter().all(|&v| v == 1.0));
        }
        let zero = Upstream::from_projection_grad(vec![vec![0.0; 32]; 2]);
        for g in m.grad_wrt_feature(&pass, &zero).unwrap() {
            assert!(g.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_pass_is_rejected() {
        let mut m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 6).unwrap();
        let x = input(1, 32, 32);
        let pass = m.forward(&[&x]).unwrap();
        let up = Upstream::from_projection_grad(vec![vec![0.0; 32]]);
        m.params_mut()[0] += 0.0;
        assert!(matches!(m.grad_wrt_feature(&pass, &up), Err(GrassError::Usage(_))));
        let other = m.clone();
        let pass = m.forward(&[&x]).unwrap();
        assert!(matches!(other.grad_wrt_feature(&pass, &up), Err(GrassError::Usage(_))));
    }

    #[test]
    fn grad_wrt_feature_leaves_params_alone() {
        let m = Model::new(EncoderSpec::default(), ProjectorSpec::default(), 6).unwrap();
        let before = m.param_hash();
        let x = input(1, 32, 32);
        let pass = m.forward(&[&x]).unwrap();
        let up = Upstream::from_projection_grad(vec![vec![1.0; 32]]);
        m.grad_wrt_feature(&pass, &up).unwrap();
        assert_eq!(before, m.param_hash());
    }

    fn check_param_grad(spec: EncoderSpec) {
        // loss = <r, f> over two samples
        let m = Model::new(spec, ProjectorSpec { hidden_dims: vec![8], output_dim: 5 }, 11).unwrap();
        let xs = [input(3, 16, 16), input(4, 16, 16)];
        let refs: Vec<&Tensor3> = xs.iter().collect();
        let r: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..5).map(|d| ((i * 5 + d) as f64 * 0.9).sin()).collect())
            .collect();
        let pass = m.forward(&refs).unwrap();
        let grad = m.param_grad(&pass, &Upstream::from_projection_grad(r.clone())).unwrap();
        let loss = |m: &Model| -> f64 {
            let p = m.forward(&refs).unwrap();
            p.samples
                .iter()
                .zip(&r)
                .map(|(s, r)| s.projection.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let eps = 1e-6;
        let mut probe = m.clone();
        let stride = (m.param_len() / 60).max(1);
        for i in (0..m.param_len()).step_by(stride) {
            let orig = probe.params().data[i];
            probe.params_mut()[i] = orig + eps;
            let up = loss(&probe);
            probe.params_mut()[i] = orig - eps;
            let down = loss(&probe);
            probe.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: numeric {numeric} analytic {}", grad[i]);
        }
    }

    #[test]
    fn toy_param_grad_matches_finite_differences() {
        check_param_grad(EncoderSpec {
            widths: vec![4, 6, 6],
            feature_dim: 6,
            ..EncoderSpec::default()
        });
    }

    #[test]
    fn resnet_param_grad_matches_finite_differences() {
        check_param_grad(EncoderSpec {
            architecture: Architecture::ResnetStyle,
            widths: vec![4, 6, 6],
            feature_dim: 6,
            ..EncoderSpec::default()
        });
    }
}

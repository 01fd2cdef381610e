//! Encoder-decoder streaming keyword model.
//!
//! Encoder: 4 SVDF layers, a ReLU projection and a linear projection to N
//! logits, softmaxed into per-frame sound-unit posteriors. Decoder: 3 SVDF
//! layers over the encoder posteriors and a linear projection to 2 logits
//! (column 0 = no keyword, column 1 = keyword).

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KwsError, Result};
use crate::frontend::Spectrogram;
use crate::nn::{
    projection_backward, projection_forward, softmax_backward_rows, softmax_rows, svdf_backward,
    svdf_forward, svdf_forward_cached, Activation, Matrix, ProjectionCache, ProjectionParams,
    SvdfCache, SvdfParams, SvdfState,
};
use crate::rng::RngKey;

pub const ENCODER_SVDF_LAYERS: usize = 4;
pub const DECODER_SVDF_LAYERS: usize = 3;
pub const KEYWORD_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub encoder_svdf: Vec<usize>,
    pub encoder_hidden: usize,
    /// N: number of encoder classes.
    pub encoder_classes: usize,
    pub decoder_svdf: Vec<usize>,
    /// Temporal kernel length K shared by every SVDF layer.
    pub memory: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: crate::frontend::N_MELS,
            encoder_svdf: vec![24; ENCODER_SVDF_LAYERS],
            encoder_hidden: 32,
            encoder_classes: 4,
            decoder_svdf: vec![24; DECODER_SVDF_LAYERS],
            memory: 8,
        }
    }
}

/// Parameter shapes of one layer, in payload order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub tensors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Svdf,
    Projection,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_svdf.len() != ENCODER_SVDF_LAYERS
            || self.decoder_svdf.len() != DECODER_SVDF_LAYERS
        {
            return Err(KwsError::Config(format!(
                "architecture needs {ENCODER_SVDF_LAYERS} encoder and {DECODER_SVDF_LAYERS} decoder SVDF layers, got {} and {}",
                self.encoder_svdf.len(),
                self.decoder_svdf.len()
            )));
        }
        if self.encoder_classes < 3 {
            return Err(KwsError::Config("encoder_classes must be >= 3".into()));
        }
        if self.memory == 0 {
            return Err(KwsError::Config("memory must be >= 1".into()));
        }
        let widths = self
            .encoder_svdf
            .iter()
            .chain(&self.decoder_svdf)
            .chain([&self.input_dim, &self.encoder_hidden]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(KwsError::Config("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let k = self.memory;
        let svdf = |c_in: usize, c_out: usize| LayerShape {
            kind: LayerKind::Svdf,
            tensors: vec![vec![c_out, c_in], vec![c_out, k], vec![c_out]],
        };
        let proj = |c_in: usize, c_out: usize| LayerShape {
            kind: LayerKind::Projection,
            tensors: vec![vec![c_out, c_in], vec![c_out]],
        };
        let mut shapes = Vec::new();
        let mut c_in = self.input_dim;
        for &c in &self.encoder_svdf {
            shapes.push(svdf(c_in, c));
            c_in = c;
        }
        shapes.push(proj(c_in, self.encoder_hidden));
        shapes.push(proj(self.encoder_hidden, self.encoder_classes));
        c_in = self.encoder_classes;
        for &c in &self.decoder_svdf {
            shapes.push(svdf(c_in, c));
            c_in = c;
        }
        shapes.push(proj(c_in, 2));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .flat_map(|l| &l.tensors)
            .map(|t| t.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Svdf(SvdfParams),
    Projection(ProjectionParams),
}

impl Layer {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Layer::Svdf(p) => vec![
                p.feature_filters.as_slice(),
                p.time_filters.as_slice(),
                &p.bias,
            ],
            Layer::Projection(p) => vec![p.weight.as_slice(), &p.bias],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Svdf(p) => vec![
                p.feature_filters.as_mut_slice(),
                p.time_filters.as_mut_slice(),
                &mut p.bias,
            ],
            Layer::Projection(p) => vec![p.weight.as_mut_slice(), &mut p.bias],
        }
    }
}

/// All layer parameters, in the fixed order given by [`ArchConfig::layer_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let k = arch.memory;
        let mut layers = Vec::new();
        let mut c_in = arch.input_dim;
        for &c in &arch.encoder_svdf {
            layers.push(Layer::Svdf(SvdfParams::zeros(c_in, c, k)));
            c_in = c;
        }
        layers.push(Layer::Projection(ProjectionParams::zeros(
            c_in,
            arch.encoder_hidden,
            Activation::Relu,
        )));
        layers.push(Layer::Projection(ProjectionParams::zeros(
            arch.encoder_hidden,
            arch.encoder_classes,
            Activation::Identity,
        )));
        c_in = arch.encoder_classes;
        for &c in &arch.decoder_svdf {
            layers.push(Layer::Svdf(SvdfParams::zeros(c_in, c, k)));
            c_in = c;
        }
        layers.push(Layer::Projection(ProjectionParams::zeros(
            c_in,
            2,
            Activation::Identity,
        )));
        Ok(ModelParams { layers })
    }

    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        Self::init_with_key(arch, RngKey::from_seed(seed))
    }

    pub fn init_with_key(arch: &ArchConfig, key: RngKey) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let root = key.derive("init");
        let shapes = arch.layer_shapes();
        for (i, (layer, shape)) in params.layers.iter_mut().zip(&shapes).enumerate() {
            let mut rng = root.derive_index("layer", i as u64).rng();
            for (tensor, dims) in layer.tensors_mut().into_iter().zip(&shape.tensors) {
                if dims.len() < 2 {
                    continue;
                }
                let a = (6.0 / (dims[0] + dims[1]) as f64).sqrt();
                for v in tensor.iter_mut() {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        Ok(params)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(|t| t.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for t in l.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn from_flat(arch: &ArchConfig, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        params.set_flat(flat)?;
        Ok(params)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(KwsError::Shape(format!(
                "flat parameter vector has {} entries, model has {n}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                let len = t.len();
                t.copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
        }
        Ok(())
    }

    /// `p <- p - lr * g` over the flat parameter vector.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        let mut flat = self.to_flat();
        crate::nn::sgd_step(&mut flat, grads, lr)?;
        self.set_flat(&flat)
    }

    /// Hex SHA-256 of the raw bits of every parameter, in payload order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for t in l.tensors() {
                for v in t {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `T x N`
    pub encoder_probs: Matrix,
    /// `T x 2`
    pub decoder_probs: Matrix,
}

impl ModelOutput {
    pub fn n_frames(&self) -> usize {
        self.encoder_probs.rows()
    }

    pub fn keyword_posteriors(&self) -> Vec<f64> {
        (0..self.decoder_probs.rows())
            .map(|t| self.decoder_probs.get(t, KEYWORD_CLASS))
            .collect()
    }
}

/// Intermediates of a batch forward pass, consumed by [`KwsModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder_svdf: Vec<SvdfCache>,
    encoder_proj: Vec<ProjectionCache>,
    decoder_svdf: Vec<SvdfCache>,
    decoder_proj: ProjectionCache,
    output: ModelOutput,
}

impl ForwardCache {
    pub fn output(&self) -> &ModelOutput {
        &self.output
    }
}

/// Per-layer SVDF memories plus the running feature sum for streaming
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    svdf: Vec<SvdfState>,
    feature_sum: Vec<f64>,
    frames_seen: u64,
}

impl StreamState {
    pub fn reset(&mut self) {
        for s in &mut self.svdf {
            s.reset();
        }
        self.feature_sum.fill(0.0);
        self.frames_seen = 0;
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsModel {
    pub arch: ArchConfig,
    pub params: ModelParams,
}

fn tag_layer(layer: usize) -> impl Fn(KwsError) -> KwsError {
    move |e| match e {
        KwsError::NonFinite(_) => KwsError::NonFiniteActivation { layer },
        other => other,
    }
}

impl KwsModel {
    pub fn new(arch: ArchConfig, params: ModelParams) -> Result<Self> {
        arch.validate()?;
        if arch.layer_shapes() != Self::shapes_of(&params) {
            return Err(KwsError::Shape(
                "parameters do not match the architecture".into(),
            ));
        }
        Ok(KwsModel { arch, params })
    }

    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&arch, seed)?;
        Ok(KwsModel { arch, params })
    }

    fn shapes_of(params: &ModelParams) -> Vec<LayerShape> {
        params
            .layers
            .iter()
            .map(|l| match l {
                Layer::Svdf(p) => LayerShape {
                    kind: LayerKind::Svdf,
                    tensors: vec![
                        vec![p.c_out(), p.c_in()],
                        vec![p.c_out(), p.memory()],
                        vec![p.bias.len()],
                    ],
                },
                Layer::Projection(p) => LayerShape {
                    kind: LayerKind::Projection,
                    tensors: vec![vec![p.c_out(), p.c_in()], vec![p.bias.len()]],
                },
            })
            .collect()
    }

    fn svdf(&self, i: usize) -> &SvdfParams {
        match &self.params.layers[i] {
            Layer::Svdf(p) => p,
            Layer::Projection(_) => unreachable!("layer {i} is a projection"),
        }
    }

    fn proj(&self, i: usize) -> &ProjectionParams {
        match &self.params.layers[i] {
            Layer::Projection(p) => p,
            Layer::Svdf(_) => unreachable!("layer {i} is an svdf"),
        }
    }

    fn n_enc(&self) -> usize {
        ENCODER_SVDF_LAYERS
    }

    fn dec_start(&self) -> usize {
        ENCODER_SVDF_LAYERS + 2
    }

    fn spec_matrix(&self, spec: &Spectrogram) -> Result<Matrix> {
        if self.arch.input_dim != spec.n_bins() {
            return Err(KwsError::Shape(format!(
                "model expects {} features, spectrogram has {}",
                self.arch.input_dim,
                spec.n_bins()
            )));
        }
        Matrix::from_vec(spec.n_frames(), spec.n_bins(), spec.as_slice().to_vec())
    }

    pub fn forward(&self, spec: &Spectrogram) -> Result<ModelOutput> {
        Ok(self.forward_cached(&self.spec_matrix(spec)?)?.output)
    }

    pub fn forward_spec_cached(&self, spec: &Spectrogram) -> Result<ForwardCache> {
        self.forward_cached(&self.spec_matrix(spec)?)
    }

    /// Batch forward over a `T x input_dim` feature matrix, keeping every
    /// intermediate needed for backpropagation.
    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.arch.input_dim {
            return Err(KwsError::Shape(format!(
                "model expects {} features, got {}",
                self.arch.input_dim,
                x.cols()
            )));
        }
        x.ensure_finite("model input")?;
        let mut h = x.clone();
        let mut encoder_svdf = Vec::with_capacity(self.n_enc());
        for i in 0..self.n_enc() {
            let (y, c) = svdf_forward_cached(&h, self.svdf(i), None).map_err(tag_layer(i))?;
            encoder_svdf.push(c);
            h = y;
        }
        let mut encoder_proj = Vec::with_capacity(2);
        for i in self.n_enc()..self.n_enc() + 2 {
            let (y, c) = projection_forward(&h, self.proj(i)).map_err(tag_layer(i))?;
            encoder_proj.push(c);
            h = y;
        }
        let encoder_probs = softmax_rows(&h).map_err(tag_layer(self.n_enc() + 1))?;
        let (decoder_probs, decoder_svdf, decoder_proj) = self.decode_cached(&encoder_probs)?;
        Ok(ForwardCache {
            encoder_svdf,
            encoder_proj,
            decoder_svdf,
            decoder_proj,
            output: ModelOutput {
                encoder_probs,
                decoder_probs,
            },
        })
    }

    fn decode_cached(
        &self,
        encoder_probs: &Matrix,
    ) -> Result<(Matrix, Vec<SvdfCache>, ProjectionCache)> {
        let start = self.dec_start();
        let mut h = encoder_probs.clone();
        let mut caches = Vec::with_capacity(DECODER_SVDF_LAYERS);
        for i in start..start + DECODER_SVDF_LAYERS {
            let (y, c) = svdf_forward_cached(&h, self.svdf(i), None).map_err(tag_layer(i))?;
            caches.push(c);
            h = y;
        }
        let last = start + DECODER_SVDF_LAYERS;
        let (logits, pc) = projection_forward(&h, self.proj(last)).map_err(tag_layer(last))?;
        let probs = softmax_rows(&logits).map_err(tag_layer(last))?;
        Ok((probs, caches, pc))
    }

    /// Runs only the decoder on given encoder posteriors.
    pub fn decode(&self, encoder_probs: &Matrix) -> Result<Matrix> {
        Ok(self.decode_cached(encoder_probs)?.0)
    }

    /// Gradient of a loss with respect to every parameter (flat, payload
    /// order), given the loss gradients with respect to the two output
    /// distributions.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_encoder_probs: &Matrix,
        d_decoder_probs: &Matrix,
    ) -> Result<Vec<f64>> {
        let out = &cache.output;
        if d_encoder_probs.shape() != out.encoder_probs.shape()
            || d_decoder_probs.shape() != out.decoder_probs.shape()
        {
            return Err(KwsError::Shape(
                "output gradient shapes do not match".into(),
            ));
        }
        let mut layer_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.params.layers.len()];

        // decoder
        let start = self.dec_start();
        let last = start + DECODER_SVDF_LAYERS;
        let d_logits = softmax_backward_rows(&out.decoder_probs, d_decoder_probs);
        let (mut dh, g) = projection_backward(&cache.decoder_proj, self.proj(last), &d_logits)?;
        layer_grads[last] = vec![g.weight.into_vec(), g.bias];
        for (j, i) in (start..last).enumerate().rev() {
            let (dx, g) = svdf_backward(&cache.decoder_svdf[j], self.svdf(i), &dh)?;
            layer_grads[i] = vec![
                g.feature_filters.into_vec(),
                g.time_filters.into_vec(),
                g.bias,
            ];
            dh = dx;
        }

        // encoder posteriors receive gradient from both heads
        let mut d_enc = d_encoder_probs.clone();
        for (a, b) in d_enc.as_mut_slice().iter_mut().zip(dh.as_slice()) {
            *a += b;
        }
        let mut dh = softmax_backward_rows(&out.encoder_probs, &d_enc);
        for (j, i) in (self.n_enc()..self.n_enc() + 2).enumerate().rev() {
            let (dx, g) = projection_backward(&cache.encoder_proj[j], self.proj(i), &dh)?;
            layer_grads[i] = vec![g.weight.into_vec(), g.bias];
            dh = dx;
        }
        for i in (0..self.n_enc()).rev() {
            let (dx, g) = svdf_backward(&cache.encoder_svdf[i], self.svdf(i), &dh)?;
            layer_grads[i] = vec![
                g.feature_filters.into_vec(),
                g.time_filters.into_vec(),
                g.bias,
            ];
            dh = dx;
        }

        let flat: Vec<f64> = layer_grads.into_iter().flatten().flatten().collect();
        debug_assert_eq!(flat.len(), self.params.param_count());
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::NonFinite("parameter gradient".into()));
        }
        Ok(flat)
    }

    pub fn stream_state(&self) -> StreamState {
        let svdf = (0..self.n_enc())
            .chain(self.dec_start()..self.dec_start() + DECODER_SVDF_LAYERS)
            .map(|i| SvdfState::zeros(self.svdf(i)))
            .collect();
        StreamState {
            svdf,
            feature_sum: vec![0.0; self.arch.input_dim],
            frames_seen: 0,
        }
    }

    /// Processes one raw (un-normalized) feature frame. The frame is
    /// normalized by the running mean of all frames seen so far, itself
    /// included.
    pub fn stream_step(
        &self,
        frame: &[f64],
        state: &mut StreamState,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if frame.len() != self.arch.input_dim {
            return Err(KwsError::Shape(format!(
                "frame has {} features, model expects {}",
                frame.len(),
                self.arch.input_dim
            )));
        }
        state.frames_seen += 1;
        let n = state.frames_seen as f64;
        let normalized: Vec<f64> = frame
            .iter()
            .zip(state.feature_sum.iter_mut())
            .map(|(v, s)| {
                *s += v;
                v - *s / n
            })
            .collect();
        self.stream_step_normalized(&normalized, state)
    }

    /// Processes one already-normalized frame.
    pub fn stream_step_normalized(
        &self,
        frame: &[f64],
        state: &mut StreamState,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if state.svdf.len() != ENCODER_SVDF_LAYERS + DECODER_SVDF_LAYERS {
            return Err(KwsError::Shape(
                "stream state does not match the model".into(),
            ));
        }
        let mut h = Matrix::from_vec(1, frame.len(), frame.to_vec())?;
        h.ensure_finite("stream input")?;
        for i in 0..self.n_enc() {
            let (y, s) =
                svdf_forward(&h, self.svdf(i), Some(&state.svdf[i])).map_err(tag_layer(i))?;
            state.svdf[i] = s;
            h = y;
        }
        for i in self.n_enc()..self.n_enc() + 2 {
            h = projection_forward(&h, self.proj(i))
                .map_err(tag_layer(i))?
                .0;
        }
        let enc = softmax_rows(&h).map_err(tag_layer(self.n_enc() + 1))?;
        let mut h = enc.clone();
        let start = self.dec_start();
        for (j, i) in (start..start + DECODER_SVDF_LAYERS).enumerate() {
            let slot = ENCODER_SVDF_LAYERS + j;
            let (y, s) =
                svdf_forward(&h, self.svdf(i), Some(&state.svdf[slot])).map_err(tag_layer(i))?;
            state.svdf[slot] = s;
            h = y;
        }
        let last = start + DECODER_SVDF_LAYERS;
        let logits = projection_forward(&h, self.proj(last))
            .map_err(tag_layer(last))?
            .0;
        let dec = softmax_rows(&logits).map_err(tag_layer(last))?;
        Ok((enc.into_vec(), dec.into_vec()))
    }
}

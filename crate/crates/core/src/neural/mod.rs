//! The collision predictor: a convolutional variational encoder compressing
//! a depth image into a latent code, and a coordinate MLP scoring 3D points
//! against that code. Training, metrics, weight serialization and the
//! double-precision constraint evaluator used by the controller live in the
//! submodules.

pub mod constraint;
pub mod io;
pub mod layers;
pub mod loss;
pub mod train;

pub use constraint::CoordMlpF64;
pub use io::{load_weights, save_weights};
pub use loss::{loss_bce, loss_bce_alt, loss_kl, BceForm};
pub use train::{classifier_metrics, train, ClassifierMetrics, TrainConfig, TrainReport};

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use layers::{
    relu_backward, relu_forward, sigmoid_f32, softplus_f32, tanh_backward, tanh_forward, AvgPool,
    Conv2d, ConvGrads, Dense, DenseGrads,
};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("weight io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weight manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("weight file corrupt: {0}")]
    Corrupt(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("training diverged at step {step}: {what} is not finite")]
    NonFinite { step: usize, what: String },
    #[error("dataset too small: {0}")]
    DataTooSmall(String),
}

/// Network shape. Fixed at construction; serialized with the weights so a
/// loaded file can refuse to attach to a different topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_v: usize,
    pub n_h: usize,
    pub conv_channels: Vec<usize>,
    pub n_z: usize,
    pub d_embed: usize,
    pub hidden: Vec<usize>,
    pub pool_k: usize,
    pub pool_s: usize,
}

impl ArchConfig {
    pub fn default_desk() -> Self {
        ArchConfig {
            n_v: 48,
            n_h: 64,
            conv_channels: vec![8, 16, 32, 64],
            n_z: 32,
            d_embed: 32,
            hidden: vec![128, 128, 128],
            pool_k: 2,
            pool_s: 1,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.hidden.len() != 3 {
            return Err(NeuralError::Config(format!(
                "exactly 3 hidden layers required, got {}",
                self.hidden.len()
            )));
        }
        if self.hidden.iter().any(|&h| h > 128) || self.d_embed > 128 || self.n_z > 128 {
            return Err(NeuralError::Config("layer widths must stay <= 128".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(NeuralError::Config("need at least one conv layer".into()));
        }
        let (h, w) = self.spatial_after_convs();
        if h < self.pool_k || w < self.pool_k {
            return Err(NeuralError::Config(format!(
                "feature map {h}x{w} smaller than pool window {}",
                self.pool_k
            )));
        }
        Ok(())
    }

    fn spatial_after_convs(&self) -> (usize, usize) {
        let mut h = self.n_v;
        let mut w = self.n_h;
        for _ in &self.conv_channels {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }

    /// Dimension of the flattened encoder feature vector feeding the heads.
    pub fn encoder_flat_dim(&self) -> usize {
        let (h, w) = self.spatial_after_convs();
        let pool = AvgPool { k: self.pool_k, s: self.pool_s };
        let (ph, pw) = pool.out_hw(h, w);
        self.conv_channels.last().unwrap() * ph * pw
    }
}

/// Convolutional encoder producing the latent distribution parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub pool: AvgPool,
    pub mu_head: Dense,
    pub sigma_head: Dense,
}

pub struct EncoderCache {
    in_dims: Vec<(usize, usize, usize)>,
    cols: Vec<Array2<f32>>,
    acts: Vec<Array3<f32>>,
    pre_pool_dim: (usize, usize, usize),
    flat: Array2<f32>,
    sigma_pre: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub convs: Vec<ConvGrads>,
    pub mu: DenseGrads,
    pub sigma: DenseGrads,
}

impl Encoder {
    fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Encoder {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c_out in &arch.conv_channels {
            convs.push(Conv2d::kaiming(c_out, c_in, 3, 2, 1, rng));
            c_in = c_out;
        }
        let flat = arch.encoder_flat_dim();
        let mut sigma_head = Dense::glorot(arch.n_z, flat, rng);
        // Start the latent spread at sigma = softplus(bias) = 1 so the KL
        // term begins at its minimum.
        sigma_head.b.fill((1f32.exp() - 1.0).ln());
        Encoder {
            convs,
            pool: AvgPool { k: arch.pool_k, s: arch.pool_s },
            mu_head: Dense::glorot(arch.n_z, flat, rng),
            sigma_head,
        }
    }

    /// img: [1, n_v, n_h] → (μ, σ) with σ > 0.
    pub fn forward(&self, img: &ArrayView3<f32>) -> (Array1<f32>, Array1<f32>, EncoderCache) {
        let mut in_dims = Vec::with_capacity(self.convs.len());
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut x = img.to_owned();
        for conv in &self.convs {
            in_dims.push(x.dim());
            let (mut y, c) = conv.forward(&x.view());
            relu_forward(&mut y);
            cols.push(c);
            acts.push(y.clone());
            x = y;
        }
        let pre_pool_dim = x.dim();
        let pooled = self.pool.forward(&x);
        let n_flat = pooled.len();
        let flat = pooled
            .into_shape_with_order((n_flat, 1))
            .unwrap();
        let mu = self.mu_head.forward(&flat).index_axis(Axis(1), 0).to_owned();
        let sigma_pre = self.sigma_head.forward(&flat).index_axis(Axis(1), 0).to_owned();
        let sigma = sigma_pre.mapv(softplus_f32);
        (mu, sigma, EncoderCache { in_dims, cols, acts, pre_pool_dim, flat, sigma_pre })
    }

    /// Accumulate parameter gradients given dL/dμ and dL/dσ (post-softplus).
    pub fn backward(
        &self,
        cache: &EncoderCache,
        dmu: &Array1<f32>,
        dsigma: &Array1<f32>,
        g: &mut EncoderGrads,
    ) {
        let dsigma_pre: Array1<f32> = dsigma
            .iter()
            .zip(cache.sigma_pre.iter())
            .map(|(&d, &t)| d * sigmoid_f32(t))
            .collect();
        let dmu2 = dmu.view().insert_axis(Axis(1)).to_owned();
        let dsig2 = dsigma_pre.view().insert_axis(Axis(1)).to_owned();
        let mut dflat = self.mu_head.backward(&cache.flat, &dmu2, &mut g.mu);
        dflat += &self.sigma_head.backward(&cache.flat, &dsig2, &mut g.sigma);

        let pool = AvgPool { k: self.pool.k, s: self.pool.s };
        let (c, ph, pw) = {
            let (c, h, w) = cache.pre_pool_dim;
            let (ph, pw) = pool.out_hw(h, w);
            (c, ph, pw)
        };
        let dpool = dflat.into_shape_with_order((c, ph, pw)).unwrap();
        let mut dx = pool.backward(cache.pre_pool_dim, &dpool);

        for i in (0..self.convs.len()).rev() {
            let dy = relu_backward(&cache.acts[i], &dx);
            let (_, h, w) = cache.in_dims[i];
            dx = self.convs[i].backward(&cache.cols[i], &dy, h, w, &mut g.convs[i]);
        }
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            convs: self.convs.iter().map(|c| c.zero_grads()).collect(),
            mu: self.mu_head.zero_grads(),
            sigma: self.sigma_head.zero_grads(),
        }
    }
}

/// z = μ + σ⊙ε.
pub fn reparameterize(mu: &Array1<f32>, sigma: &Array1<f32>, eps: &Array1<f32>) -> Array1<f32> {
    mu + &(sigma * eps)
}

/// Coordinate network: point embedding, concatenation with the latent code,
/// three tanh hidden layers, scalar output head (activation applied by the
/// consumer: sigmoid for classification, exp/2 for the controller).
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMlp {
    pub embed: Dense,
    pub hidden: Vec<Dense>,
    pub out: Dense,
}

pub struct MlpCache {
    pts: Array2<f32>,
    e_act: Array2<f32>,
    h0: Array2<f32>,
    hidden_acts: Vec<Array2<f32>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub embed: DenseGrads,
    pub hidden: Vec<DenseGrads>,
    pub out: DenseGrads,
}

impl CoordMlp {
    fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> CoordMlp {
        let mut hidden = Vec::new();
        let mut d_in = arch.d_embed + arch.n_z;
        for &h in &arch.hidden {
            hidden.push(Dense::glorot(h, d_in, rng));
            d_in = h;
        }
        CoordMlp {
            embed: Dense::glorot(arch.d_embed, 3, rng),
            hidden,
            out: Dense::glorot(1, d_in, rng),
        }
    }

    /// pts: [3, n] scaled points → pre-sigmoid logits [n].
    pub fn forward_batch(&self, z: &Array1<f32>, pts: &Array2<f32>) -> (Array1<f32>, MlpCache) {
        let n = pts.ncols();
        let mut e = self.embed.forward(pts);
        tanh_forward(&mut e);
        let d_e = e.nrows();
        let n_z = z.len();
        let mut h0 = Array2::zeros((d_e + n_z, n));
        h0.slice_mut(ndarray::s![..d_e, ..]).assign(&e);
        for j in 0..n {
            for i in 0..n_z {
                h0[[d_e + i, j]] = z[i];
            }
        }
        let mut hidden_acts = Vec::with_capacity(self.hidden.len());
        let mut x = h0.clone();
        for layer in &self.hidden {
            let mut y = layer.forward(&x);
            tanh_forward(&mut y);
            hidden_acts.push(y.clone());
            x = y;
        }
        let logits = self.out.forward(&x).index_axis(Axis(0), 0).to_owned();
        (logits, MlpCache { pts: pts.clone(), e_act: e, h0, hidden_acts })
    }

    /// Backward from dL/dlogit; returns dL/dz (summed over the batch).
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        dlogits: &Array1<f32>,
        g: &mut MlpGrads,
    ) -> Array1<f32> {
        let dy = dlogits.view().insert_axis(Axis(0)).to_owned();
        let last = cache.hidden_acts.last().unwrap();
        let mut dx = self.out.backward(last, &dy, &mut g.out);
        for i in (0..self.hidden.len()).rev() {
            let dpre = tanh_backward(&cache.hidden_acts[i], &dx);
            let input = if i == 0 { &cache.h0 } else { &cache.hidden_acts[i - 1] };
            dx = self.hidden[i].backward(input, &dpre, &mut g.hidden[i]);
        }
        let d_e = cache.e_act.nrows();
        let de = dx.slice(ndarray::s![..d_e, ..]).to_owned();
        let dz = dx.slice(ndarray::s![d_e.., ..]).sum_axis(Axis(1));
        let de_pre = tanh_backward(&cache.e_act, &de);
        let _ = self.embed.backward(&cache.pts, &de_pre, &mut g.embed);
        dz
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            embed: self.embed.zero_grads(),
            hidden: self.hidden.iter().map(|l| l.zero_grads()).collect(),
            out: self.out.zero_grads(),
        }
    }
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub mlp: CoordMlp,
    pub version: u32,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub enc: EncoderGrads,
    pub mlp: MlpGrads,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.enc.convs.iter_mut().zip(&other.enc.convs) {
            a.w += &b.w;
            a.b += &b.b;
        }
        self.enc.mu.w += &other.enc.mu.w;
        self.enc.mu.b += &other.enc.mu.b;
        self.enc.sigma.w += &other.enc.sigma.w;
        self.enc.sigma.b += &other.enc.sigma.b;
        self.mlp.embed.w += &other.mlp.embed.w;
        self.mlp.embed.b += &other.mlp.embed.b;
        for (a, b) in self.mlp.hidden.iter_mut().zip(&other.mlp.hidden) {
            a.w += &b.w;
            a.b += &b.b;
        }
        self.mlp.out.w += &other.mlp.out.w;
        self.mlp.out.b += &other.mlp.out.b;
    }
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Model, NeuralError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            encoder: Encoder::new(&arch, &mut rng),
            mlp: CoordMlp::new(&arch, &mut rng),
            arch,
            version: 1,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads { enc: self.encoder.zero_grads(), mlp: self.mlp.zero_grads() }
    }

    /// Encode a raw row-major raster into (μ, σ).
    pub fn encode_slice(&self, img: &[f32]) -> Result<(Array1<f32>, Array1<f32>), NeuralError> {
        if img.len() != self.arch.n_v * self.arch.n_h {
            return Err(NeuralError::Config(format!(
                "image has {} pixels, model expects {}x{}",
                img.len(),
                self.arch.n_v,
                self.arch.n_h
            )));
        }
        let view = ArrayView3::from_shape((1, self.arch.n_v, self.arch.n_h), img)
            .map_err(|e| NeuralError::Config(e.to_string()))?;
        let (mu, sigma, _) = self.encoder.forward(&view);
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(NeuralError::Config("encoder produced non-finite output".into()));
        }
        Ok((mu, sigma))
    }

    /// Classification probabilities sigmoid(h) for a batch of scaled points.
    pub fn predict_probs(&self, z: &Array1<f32>, pts: &Array2<f32>) -> Array1<f32> {
        let (logits, _) = self.mlp.forward_batch(z, pts);
        logits.mapv(sigmoid_f32)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// Visit every parameter in a fixed canonical order.
    pub fn visit_params(&self, f: &mut impl FnMut(f32)) {
        for c in &self.encoder.convs {
            c.w.iter().for_each(|&v| f(v));
            c.b.iter().for_each(|&v| f(v));
        }
        for d in [&self.encoder.mu_head, &self.encoder.sigma_head, &self.mlp.embed] {
            d.w.iter().for_each(|&v| f(v));
            d.b.iter().for_each(|&v| f(v));
        }
        for d in &self.mlp.hidden {
            d.w.iter().for_each(|&v| f(v));
            d.b.iter().for_each(|&v| f(v));
        }
        self.mlp.out.w.iter().for_each(|&v| f(v));
        self.mlp.out.b.iter().for_each(|&v| f(v));
    }

    /// Visit (parameter, gradient) pairs in the same canonical order.
    pub fn visit_params_mut(&mut self, g: &ModelGrads, f: &mut impl FnMut(&mut f32, f32)) {
        for (c, cg) in self.encoder.convs.iter_mut().zip(&g.enc.convs) {
            c.w.iter_mut().zip(cg.w.iter()).for_each(|(p, &gv)| f(p, gv));
            c.b.iter_mut().zip(cg.b.iter()).for_each(|(p, &gv)| f(p, gv));
        }
        let head_pairs: [(&mut Dense, &DenseGrads); 3] = [
            (&mut self.encoder.mu_head, &g.enc.mu),
            (&mut self.encoder.sigma_head, &g.enc.sigma),
            (&mut self.mlp.embed, &g.mlp.embed),
        ];
        for (d, dg) in head_pairs {
            d.w.iter_mut().zip(dg.w.iter()).for_each(|(p, &gv)| f(p, gv));
            d.b.iter_mut().zip(dg.b.iter()).for_each(|(p, &gv)| f(p, gv));
        }
        for (d, dg) in self.mlp.hidden.iter_mut().zip(&g.mlp.hidden) {
            d.w.iter_mut().zip(dg.w.iter()).for_each(|(p, &gv)| f(p, gv));
            d.b.iter_mut().zip(dg.b.iter()).for_each(|(p, &gv)| f(p, gv));
        }
        self.mlp.out.w.iter_mut().zip(g.mlp.out.w.iter()).for_each(|(p, &gv)| f(p, gv));
        self.mlp.out.b.iter_mut().zip(g.mlp.out.b.iter()).for_each(|(p, &gv)| f(p, gv));
    }

    /// Overwrite all parameters from a flat slice (canonical order).
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::Corrupt(format!(
                "blob holds {} parameters, architecture needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let zeros = self.zero_grads();
        let mut it = flat.iter();
        self.visit_params_mut(&zeros, &mut |p, _| *p = *it.next().unwrap());
        Ok(())
    }
}

//! Base and TL network variants.

use deepssm_nn::{Graph, LayerSpec, Mode, ParamId, ParamStore, Sequential, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::shape::CorrespondenceSet;
use crate::shape_stats::ShapeModel;
use crate::volume::{Grid, Volume};

/// Slope of the leaky ReLU between autoencoder layers.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Convolutional encoder layout: conv layers (each followed by batch norm and
/// PReLU), max-pooling by 2 after the listed convs, then fully connected layers
/// (each followed by PReLU) and a final linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRepr")]
pub struct Architecture {
    pub conv_channels: Vec<usize>,
    /// 1-based indices of the conv layers followed by pooling.
    pub pool_after: Vec<usize>,
    pub fc_features: Vec<usize>,
    pub kernel: usize,
}

/// Configuration form: a preset name or an explicit layout.
#[derive(Deserialize)]
#[serde(untagged)]
enum ArchitectureRepr {
    Preset(String),
    Layout { conv_channels: Vec<usize>, pool_after: Vec<usize>, fc_features: Vec<usize>, kernel: usize },
}

impl TryFrom<ArchitectureRepr> for Architecture {
    type Error = CoreError;

    fn try_from(repr: ArchitectureRepr) -> Result<Self> {
        match repr {
            ArchitectureRepr::Preset(name) => Self::preset(&name),
            ArchitectureRepr::Layout { conv_channels, pool_after, fc_features, kernel } => {
                Ok(Self { conv_channels, pool_after, fc_features, kernel })
            }
        }
    }
}

impl Architecture {
    /// Full-width encoder: five convs of 12..192 channels, FC 384 and 96.
    pub fn full() -> Self {
        Self { conv_channels: vec![12, 24, 48, 96, 192], pool_after: vec![1, 3, 5], fc_features: vec![384, 96], kernel: 3 }
    }

    /// Same topology at one third of the width, sized for single-core training.
    pub fn desk() -> Self {
        Self { conv_channels: vec![4, 8, 16, 32, 64], pool_after: vec![1, 3, 5], fc_features: vec![128, 32], kernel: 3 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(CoreError::Invalid(format!("unknown architecture preset {other:?} (full, desk)"))),
        }
    }

    /// Layer specs mapping a `[B, 1, nz, ny, nx]` volume batch to `[B, outputs]`.
    pub fn encoder_specs(&self, grid: &Grid, outputs: usize) -> Result<Vec<LayerSpec>> {
        if self.conv_channels.is_empty() {
            return Err(CoreError::Invalid("architecture needs at least one conv layer".into()));
        }
        let mut dims = grid.tensor_shape();
        let mut specs = Vec::new();
        let mut cin = 1;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            specs.push(LayerSpec::Conv3d { in_channels: cin, out_channels: c, kernel: self.kernel });
            specs.push(LayerSpec::BatchNorm { channels: c });
            specs.push(LayerSpec::Prelu { channels: c });
            if self.pool_after.contains(&(i + 1)) {
                if dims.iter().any(|d| d % 2 != 0) {
                    return Err(CoreError::Invalid(format!(
                        "grid {:?} cannot be pooled by 2 after conv {}",
                        grid.dims,
                        i + 1
                    )));
                }
                dims = dims.map(|d| d / 2);
                specs.push(LayerSpec::MaxPool3d { factor: 2 });
            }
            cin = c;
        }
        specs.push(LayerSpec::Flatten);
        let mut fin = cin * dims.iter().product::<usize>();
        for &f in &self.fc_features {
            specs.push(LayerSpec::FullyConnected { in_features: fin, out_features: f });
            specs.push(LayerSpec::Prelu { channels: f });
            fin = f;
        }
        specs.push(LayerSpec::FullyConnected { in_features: fin, out_features: outputs });
        Ok(specs)
    }
}

/// Stacks volumes into a standardized `[B, 1, nz, ny, nx]` batch.
pub fn volume_batch(grid: &Grid, volumes: &[&Volume]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(volumes.len() * grid.len());
    for v in volumes {
        if v.grid.dims != grid.dims {
            return Err(CoreError::Dimension(format!("volume grid {:?} vs model input {:?}", v.grid.dims, grid.dims)));
        }
        data.extend(v.standardized());
    }
    let [d, h, w] = grid.tensor_shape();
    Ok(Tensor::new(vec![volumes.len(), 1, d, h, w], data)?)
}

/// Base variant: encoder to normalized PCA scores, a fixed per-mode scale by
/// `sqrt(eigenvalue)`, and a frozen linear layer `C = U z + C̄`.
#[derive(Debug, Clone)]
pub struct BaseDeepSsm {
    pub store: ParamStore,
    pub encoder: Sequential,
    pub fixed: Sequential,
    scale: ParamId,
    pub grid: Grid,
    pub architecture: Architecture,
}

impl BaseDeepSsm {
    /// Builds the network with zero fixed layer; call [`BaseDeepSsm::set_shape_model`].
    pub fn build(architecture: Architecture, grid: Grid, num_points: usize, num_modes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Sequential::build("encoder", architecture.encoder_specs(&grid, num_modes)?, &mut store, seed)?;
        let spec = LayerSpec::FixedLinear { in_features: num_modes, out_features: 3 * num_points };
        let fixed = Sequential::build("pca", vec![spec], &mut store, seed)?;
        let scale = store.add_buffer("pca.score_scale", Tensor::full(&[num_modes], 1.0));
        Ok(Self { store, encoder, fixed, scale, grid, architecture })
    }

    pub fn new(architecture: Architecture, grid: Grid, shape_model: &ShapeModel, seed: u64) -> Result<Self> {
        let mut m = Self::build(architecture, grid, shape_model.num_points(), shape_model.num_modes(), seed)?;
        m.set_shape_model(shape_model)?;
        Ok(m)
    }

    pub fn set_shape_model(&mut self, model: &ShapeModel) -> Result<()> {
        let (w, b) = self.fixed.linear_ids(0).expect("fixed layer is linear");
        let (d, l) = (model.dim(), model.num_modes());
        if self.store.value(w).shape() != [d, l] {
            return Err(CoreError::Dimension(format!(
                "shape model {d}x{l} vs fixed layer {:?}",
                self.store.value(w).shape()
            )));
        }
        let u = model.basis_values();
        let mut wv = vec![0.0; d * l];
        for r in 0..d {
            for k in 0..l {
                wv[r * l + k] = u[k * d + r];
            }
        }
        self.store.get_mut(w).value = Tensor::new(vec![d, l], wv)?;
        self.store.get_mut(b).value = Tensor::new(vec![d], model.mean.clone())?;
        let scale = model.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        self.store.get_mut(self.scale).value = Tensor::new(vec![l], scale)?;
        Ok(())
    }

    pub fn num_modes(&self) -> usize {
        self.store.value(self.scale).len()
    }

    pub fn num_points(&self) -> usize {
        self.store.value(self.fixed.linear_ids(0).expect("linear").1).len() / 3
    }

    /// Ids of the frozen reconstruction layer (weight, bias).
    pub fn fixed_ids(&self) -> Vec<ParamId> {
        self.fixed.all_ids()
    }

    /// The PCA model embedded in the fixed layer (eigenvalues from the score scale).
    pub fn shape_model(&self) -> Result<ShapeModel> {
        let (w, b) = self.fixed.linear_ids(0).expect("linear");
        let (d, l) = (self.store.value(w).shape()[0], self.num_modes());
        let wv = self.store.value(w).data();
        let mut basis = vec![0.0; d * l];
        for r in 0..d {
            for k in 0..l {
                basis[k * d + r] = wv[r * l + k];
            }
        }
        let eig: Vec<f64> = self.store.value(self.scale).data().iter().map(|s| s * s).collect();
        let total = eig.iter().sum();
        ShapeModel::from_parts(self.store.value(b).data().to_vec(), basis, eig, total, 0)
    }

    fn head(&self, g: &mut Graph, enc: Var) -> Result<(Var, Var)> {
        let s = g.constant(self.store.value(self.scale).clone())?;
        let scores = g.mul_row(enc, s)?;
        let corr = self.fixed.forward_eval(g, scores, &self.store)?;
        Ok((scores, corr))
    }

    /// Training-capable forward pass: `(scores [B, L], correspondences [B, 3M])`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let enc = self.encoder.forward(g, x, &mut self.store, mode)?;
        self.head(g, enc)
    }

    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let enc = self.encoder.forward_eval(g, x, &self.store)?;
        self.head(g, enc)
    }

    /// The frozen layer alone, `r(z) = U z + C̄`, on a `[B, L]` score batch.
    pub fn reconstruct(&self, g: &mut Graph, scores: Var) -> Result<Var> {
        Ok(self.fixed.forward_eval(g, scores, &self.store)?)
    }
}

/// TL variant: a correspondence autoencoder `h(g(C))` and an image encoder
/// (T-flank) regressing the autoencoder's latent code.
#[derive(Debug, Clone)]
pub struct TlDeepSsm {
    pub store: ParamStore,
    pub ae_encoder: Sequential,
    pub ae_decoder: Sequential,
    pub t_flank: Sequential,
    shape_mean: ParamId,
    shape_scale: ParamId,
    pub grid: Grid,
    pub architecture: Architecture,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl TlDeepSsm {
    pub fn build(
        architecture: Architecture,
        grid: Grid,
        num_points: usize,
        latent_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 {
            return Err(CoreError::Invalid("latent and hidden sizes must be positive".into()));
        }
        let d = 3 * num_points;
        let mut store = ParamStore::new();
        let enc = vec![
            LayerSpec::FullyConnected { in_features: d, out_features: hidden },
            LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            LayerSpec::FullyConnected { in_features: hidden, out_features: latent_dim },
        ];
        let dec = vec![
            LayerSpec::FullyConnected { in_features: latent_dim, out_features: hidden },
            LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            LayerSpec::FullyConnected { in_features: hidden, out_features: d },
        ];
        let ae_encoder = Sequential::build("ae_encoder", enc, &mut store, seed)?;
        let ae_decoder = Sequential::build("ae_decoder", dec, &mut store, seed.wrapping_add(1))?;
        let t_flank =
            Sequential::build("t_flank", architecture.encoder_specs(&grid, latent_dim)?, &mut store, seed.wrapping_add(2))?;
        let shape_mean = store.add_buffer("ae.shape_mean", Tensor::zeros(&[d]));
        let shape_scale = store.add_buffer("ae.shape_scale", Tensor::full(&[1], 1.0));
        Ok(Self { store, ae_encoder, ae_decoder, t_flank, shape_mean, shape_scale, grid, architecture, latent_dim, hidden })
    }

    /// Sets the fixed shape normalization: mean shape and the RMS coordinate deviation.
    pub fn set_normalization(&mut self, shapes: &[Vec<f64>]) -> Result<()> {
        let d = self.store.value(self.shape_mean).len();
        if shapes.is_empty() || shapes.iter().any(|s| s.len() != d) {
            return Err(CoreError::Dimension(format!("normalization needs shapes with {d} coordinates")));
        }
        let n = shapes.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| shapes.iter().map(|s| s[k]).sum::<f64>() / n).collect();
        let var = shapes.iter().flat_map(|s| s.iter().zip(&mean).map(|(a, b)| (a - b).powi(2))).sum::<f64>() / (n * d as f64);
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        self.store.get_mut(self.shape_mean).value = Tensor::new(vec![d], mean)?;
        self.store.get_mut(self.shape_scale).value = Tensor::full(&[1], scale);
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.store.value(self.shape_mean).len() / 3
    }

    pub fn autoencoder_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ae_encoder.all_ids();
        ids.extend(self.ae_decoder.all_ids());
        ids
    }

    pub fn t_flank_ids(&self) -> Vec<ParamId> {
        self.t_flank.all_ids()
    }

    fn scale(&self) -> f64 {
        self.store.value(self.shape_scale).data()[0]
    }

    /// `g(C)` on a `[B, 3M]` batch.
    pub fn encode(&self, g: &mut Graph, c: Var) -> Result<Var> {
        let neg: Vec<f64> = self.store.value(self.shape_mean).data().iter().map(|v| -v).collect();
        let neg = g.constant(Tensor::from_vec(neg))?;
        let centred = g.add_row(c, neg)?;
        let x = g.scale(centred, 1.0 / self.scale())?;
        Ok(self.ae_encoder.forward_eval(g, x, &self.store)?)
    }

    /// `h(S)` on a `[B, latent]` batch.
    pub fn decode(&self, g: &mut Graph, s: Var) -> Result<Var> {
        let y = self.ae_decoder.forward_eval(g, s, &self.store)?;
        let y = g.scale(y, self.scale())?;
        let mean = g.constant(self.store.value(self.shape_mean).clone())?;
        Ok(g.add_row(y, mean)?)
    }

    /// `f(I)` on a volume batch; training mode updates batch-norm statistics.
    pub fn image_latent(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.t_flank.forward(g, x, &mut self.store, mode)?)
    }

    pub fn image_latent_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.t_flank.forward_eval(g, x, &self.store)?)
    }
}

/// Either trained network variant.
#[derive(Debug, Clone)]
pub enum DeepSsm {
    Base(BaseDeepSsm),
    Tl(TlDeepSsm),
}

/// Output of single-volume inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub correspondences: CorrespondenceSet,
    /// PCA scores (Base) or latent code (TL).
    pub descriptor: Vec<f64>,
}

impl DeepSsm {
    pub fn store(&self) -> &ParamStore {
        match self {
            DeepSsm::Base(m) => &m.store,
            DeepSsm::Tl(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            DeepSsm::Base(m) => &mut m.store,
            DeepSsm::Tl(m) => &mut m.store,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            DeepSsm::Base(m) => &m.grid,
            DeepSsm::Tl(m) => &m.grid,
        }
    }

    pub fn num_points(&self) -> usize {
        match self {
            DeepSsm::Base(m) => m.num_points(),
            DeepSsm::Tl(m) => m.num_points(),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        match self {
            DeepSsm::Base(m) => m.num_modes(),
            DeepSsm::Tl(m) => m.latent_dim,
        }
    }

    /// Eval-mode forward on a volume batch: `(descriptors [B, K], correspondences [B, 3M])`.
    pub fn predict_batch(&self, volumes: &[&Volume]) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(volume_batch(self.grid(), volumes)?)?;
        let (desc, corr) = match self {
            DeepSsm::Base(m) => m.forward_eval(&mut g, x)?,
            DeepSsm::Tl(m) => {
                let s = m.image_latent_eval(&mut g, x)?;
                (s, m.decode(&mut g, s)?)
            }
        };
        Ok((g.value(desc).clone(), g.value(corr).clone()))
    }

    pub fn infer(&self, volume: &Volume, sample_id: impl Into<String>) -> Result<Inference> {
        let (desc, corr) = self.predict_batch(&[volume])?;
        Ok(Inference {
            correspondences: CorrespondenceSet::from_flat(sample_id, corr.data())?,
            descriptor: desc.into_data(),
        })
    }
}

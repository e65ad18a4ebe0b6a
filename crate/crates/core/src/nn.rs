//! Small neural-network toolkit on top of candle: a named parameter store
//! with seeded initialization, a few layers, spectral normalization and
//! Adam with inspectable moments.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::Result;
pub use crate::im2col::conv2d;

/// Named trainable parameters plus non-trainable buffers (running
/// statistics, power-iteration vectors).
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self { dtype, device: device.clone(), params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Builder rooted at `prefix`, drawing initial values from `rng`.
    pub fn builder<'a>(&'a mut self, prefix: &str, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder { store: self, rng, prefix: prefix.to_string() }
    }

    /// SHA-256 over names and raw little-endian values of every parameter
    /// and buffer.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, var) in map {
                hasher.update(kind.as_bytes());
                hasher.update(name.as_bytes());
                for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Every parameter and buffer under `param/` and `buffer/` prefixes.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len() + self.buffers.len());
        out.extend(self.params.iter().map(|(k, v)| (format!("param/{k}"), v.as_tensor().clone())));
        out.extend(self.buffers.iter().map(|(k, v)| (format!("buffer/{k}"), v.as_tensor().clone())));
        out
    }

    /// Overwrite values from a map produced by [`Self::named_tensors`].
    pub fn load_named(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (prefix, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, var) in map {
                let key = format!("{prefix}/{name}");
                let t = tensors.get(&key).ok_or_else(|| {
                    crate::Error::BadCheckpoint(format!("missing tensor {key}"))
                })?;
                if t.dims() != var.dims() {
                    return Err(crate::Error::BadCheckpoint(format!(
                        "tensor {key} has shape {:?}, expected {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            }
        }
        Ok(())
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    fn tensor_from(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| mean + std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        let t = self.tensor_from(values, shape)?;
        self.insert_param(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = self.tensor_from(values, shape)?;
        self.insert_param(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        let t = self.tensor_from(vec![value; n], shape)?;
        self.insert_param(name, t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        let t = self.tensor_from(vec![value; n], shape)?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(self.key(name), var.clone());
        Ok(var)
    }

    pub fn random_unit_buffer(&mut self, name: &str, len: usize) -> Result<Var> {
        let mut values: Vec<f64> = (0..len).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        values.iter_mut().for_each(|v| *v /= norm);
        let t = self.tensor_from(values, &[len])?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(self.key(name), var.clone());
        Ok(var)
    }

    fn insert_param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.store.params.insert(self.key(name), var.clone());
        Ok(var)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `(N, C, H, W) + (C,)`.
fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    /// He-style uniform init.
    pub fn new(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = b.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = Some(b.uniform("bias", &[out_dim], bound)?);
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Var, bias: Option<Var>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut ParamBuilder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = b.uniform("weight", &[out_c, in_c, kernel, kernel], bound)?;
        let bias = Some(b.uniform("bias", &[out_c], bound)?);
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn from_parts(weight: Var, bias: Option<Var>) -> Self {
        let padding = weight.dims()[2] / 2;
        Self { weight, bias, padding }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.padding)?;
        Ok(match &self.bias {
            Some(b) => add_channel_bias(&y, b.as_tensor())?,
            None => y,
        })
    }
}

/// Weight normalized by its largest singular value, estimated with one
/// step of power iteration per [`SpectralWeight::power_iteration`] call.
#[derive(Clone, Debug)]
pub struct SpectralWeight {
    weight: Var,
    u: Var,
}

impl SpectralWeight {
    pub fn new(b: &mut ParamBuilder, weight: Var) -> Result<Self> {
        let rows = weight.dims()[0];
        let u = b.random_unit_buffer("sn_u", rows)?;
        Ok(Self { weight, u })
    }

    fn matrix(&self) -> Result<Tensor> {
        let rows = self.weight.dims()[0];
        Ok(self.weight.as_tensor().reshape((rows, ()))?)
    }

    fn right_vector(&self, w: &Tensor) -> Result<Tensor> {
        let u = self.u.as_tensor().detach();
        let v = u.unsqueeze(0)?.matmul(&w.detach())?.squeeze(0)?;
        let norm = v.sqr()?.sum_all()?.sqrt()?.maximum(1e-12)?;
        Ok(v.broadcast_div(&norm)?)
    }

    /// Refresh the stored left singular vector estimate.
    pub fn power_iteration(&self) -> Result<()> {
        let w = self.matrix()?;
        let v = self.right_vector(&w)?;
        let u = w.detach().matmul(&v.unsqueeze(1)?)?.squeeze(1)?;
        let norm = u.sqr()?.sum_all()?.sqrt()?.maximum(1e-12)?;
        self.u.set(&u.broadcast_div(&norm)?)?;
        Ok(())
    }

    /// `W / sigma`, differentiable in `W` with `u`, `v` held fixed.
    pub fn normalized(&self) -> Result<Tensor> {
        let w = self.matrix()?;
        let v = self.right_vector(&w)?;
        let u = self.u.as_tensor().detach();
        let sigma = u.unsqueeze(0)?.matmul(&w.matmul(&v.unsqueeze(1)?)?)?.reshape(())?;
        Ok(self.weight.as_tensor().broadcast_div(&sigma)?)
    }
}

#[derive(Clone, Debug)]
pub struct SnConv2d {
    weight: SpectralWeight,
    bias: Var,
    padding: usize,
}

impl SnConv2d {
    pub fn new(b: &mut ParamBuilder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = b.uniform("weight", &[out_c, in_c, kernel, kernel], bound)?;
        let bias = b.constant("bias", &[out_c], 0.0)?;
        let weight = SpectralWeight::new(b, w)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn power_iteration(&self) -> Result<()> {
        self.weight.power_iteration()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight.normalized()?, self.padding)?;
        add_channel_bias(&y, self.bias.as_tensor())
    }
}

#[derive(Clone, Debug)]
pub struct SnLinear {
    weight: SpectralWeight,
    bias: Var,
}

impl SnLinear {
    pub fn new(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = b.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = b.constant("bias", &[out_dim], 0.0)?;
        let weight = SpectralWeight::new(b, w)?;
        Ok(Self { weight, bias })
    }

    pub fn power_iteration(&self) -> Result<()> {
        self.weight.power_iteration()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.normalized()?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Embedding table lookup: `(N,)` u32 ids -> `(N, dim)`.
pub fn embed(table: &Var, ids: &Tensor) -> Result<Tensor> {
    Ok(table.as_tensor().index_select(ids, 0)?)
}

/// Area-average `(N, C, H, W)` down to `(h, w)`; nearest upsampling when
/// growing. Sides must divide evenly.
pub fn resample_area(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    if xh >= h && xw >= w {
        if xh % h != 0 || xw % w != 0 {
            return Err(crate::Error::ShapeMismatch(format!("cannot area-resample {xh}x{xw} to {h}x{w}")));
        }
        return Ok(x.avg_pool2d((xh / h, xw / w))?);
    }
    Ok(x.upsample_nearest2d(h, w)?)
}

/// Mean over every element except dim 0 for `(N, ...)`.
pub fn mean_per_sample(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.reshape((n, ()))?.mean(D::Minus1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed set of named variables. Moments are kept by name so
/// they can be checkpointed.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, vars: Vec<(String, Var)>) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in &vars {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { config, vars, first, second, steps: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// Apply one update from the gradients in `grads`; variables without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.vars {
            let grad = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            let m = ((&self.first[name] * beta1)? + (&grad * (1.0 - beta1))?)?;
            let v = ((&self.second[name] * beta2)? + (grad.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn named_moments(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in &self.first {
            out.push((format!("{prefix}/m/{name}"), t.clone()));
        }
        for (name, t) in &self.second {
            out.push((format!("{prefix}/v/{name}"), t.clone()));
        }
        out
    }

    pub fn load_moments(
        &mut self,
        prefix: &str,
        tensors: &std::collections::HashMap<String, Tensor>,
        steps: u64,
    ) -> Result<()> {
        for (name, var) in &self.vars {
            for (tag, map) in [("m", &mut self.first), ("v", &mut self.second)] {
                let key = format!("{prefix}/{tag}/{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| crate::Error::BadCheckpoint(format!("missing tensor {key}")))?;
                map.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.steps = steps;
        Ok(())
    }
}

/// Deterministic RNG with a checkpointable position.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Standard normal tensor.
    pub fn normal(&mut self, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
    }
}

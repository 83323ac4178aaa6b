//! Small neural-network toolkit on top of candle tensors: a named,
//! deterministically initialized parameter store and the layers the concept
//! models and the policy are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    Normal(f64),
}

/// Named trainable tensors. Names are unique and iteration order is sorted,
/// so optimizer state and checkpoints line up across runs.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::validation(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..=a)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat f32 copies of every parameter, keyed by name.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                Ok((k.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }

    /// Overwrites parameters in place. Every registered name must be present
    /// with a matching shape.
    pub fn import(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::validation(format!("missing parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::validation(format!(
                    "parameter {name}: shape {shape:?} != {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Converts host data into a tensor of the store's dtype.
    pub fn tensor(&self, data: &[f32], shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_slice(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// `in_dim -> out_dim` with uniform(±1/sqrt(in_dim)) weights and zero bias.
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let a = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: ps.add(&format!("{name}.weight"), &[in_dim, out_dim], Init::Uniform(a))?,
            bias: ps.add(&format!("{name}.bias"), &[out_dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap();
        let rows = x.elem_count() / in_dim;
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight)?;
        let y = kernels::add_row(&y, &self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Linear layers with GELU between them (none after the last).
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.fc{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = kernels::gelu(&h)?;
            }
        }
        Ok(h)
    }
}

pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.add(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: ps.add(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = kernels::standardize_last(x, 1e-5)?;
        kernels::add_row(&kernels::mul_row(&normed, &self.gain)?, &self.bias)
    }
}

pub use crate::kernels::softmax_last;

/// Scales each vector along the last dimension to unit Euclidean norm,
/// flooring the norm at 1e-12.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

pub struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::validation(format!(
                "width {width} is not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.query"), width, width)?,
            key: Linear::new(ps, &format!("{name}.key"), width, width)?,
            value: Linear::new(ps, &format!("{name}.value"), width, width)?,
            out: Linear::new(ps, &format!("{name}.out"), width, width)?,
            heads,
        })
    }

    /// `x`: `(batch, time, width)`. `mask`, when given, is added to the
    /// `(time, time)` attention logits.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, w) = x.dims3()?;
        let dh = w / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            logits = logits.broadcast_add(m)?;
        }
        let attn = softmax_last(&logits)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, w))?;
        self.out.forward(&y)
    }
}

/// Additive mask that blocks attention from position `i` to any `j > i`.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), device)?.to_dtype(dtype)?)
}

/// Pre-norm transformer block.
pub struct Block {
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), width)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), width, heads)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), width)?,
            ff: Mlp::new(ps, &format!("{name}.ff"), &[width, 4 * width, width])?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln_attn.forward(x)?, mask)?)?;
        Ok((&x + self.ff.forward(&self.ln_ff.forward(&x)?)?)?)
    }
}

pub struct Transformer {
    name: String,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    causal: bool,
}

impl Transformer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        depth: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::validation("transformer depth must be at least 1"));
        }
        let blocks = (0..depth)
            .map(|i| Block::new(ps, &format!("{name}.block{i}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            blocks,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), width)?,
            causal,
        })
    }

    /// Runs every block and the output norm, failing with the block index if
    /// activations stop being finite.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mask = if self.causal {
            Some(causal_mask(x.dim(1)?, x.dtype(), x.device())?)
        } else {
            None
        };
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, mask.as_ref())?;
            ensure_finite(&h, || format!("{}.block{i}", self.name))?;
        }
        self.ln_out.forward(&h)
    }
}

pub fn ensure_finite(t: &Tensor, location: impl FnOnce() -> String) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(location(), format!("activation sum is {s}")))
    }
}

/// Reads a scalar tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

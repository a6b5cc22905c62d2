//! Parameter storage, seeded initialization and the small set of layers the
//! model is assembled from. Everything is built from differentiable tensor
//! primitives so gradients flow through every layer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Optimizer group a parameter belongs to (they use separate learning rates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Rest,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Named trainable parameters, kept in lexicographic order so iteration (and
/// therefore optimizer updates and checkpoints) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, init: Tensor, group: ParamGroup) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::Value(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&init.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.params.insert(name, Param { var, group });
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Overwrites a parameter in place; every layer holding it sees the update.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Value(format!("unknown parameter `{name}`")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }
}

/// Hierarchical initializer: `init.pp("stage1").pp("attn")` scopes names.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
            group: ParamGroup::Rest,
        }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
            group: self.group,
        }
    }

    pub fn with_group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn from_values(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        let full = self.full_name(name);
        self.store.insert(full, t, self.group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.from_values(name, vec![0.0; n], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.from_values(name, vec![1.0; n], shape)
    }

    /// Glorot-uniform with the given fan sizes.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.from_values(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                z * std
            })
            .collect();
        self.from_values(name, values, shape)
    }
}

/// Affine map over the last axis: `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = init.pp(name);
        let weight = s.xavier("weight", &[d_in, d_out], d_in, d_out)?;
        let bias = Some(s.zeros("bias", &[d_out])?);
        Ok(Linear { weight, bias })
    }

    /// Gaussian weights with the given std and a constant bias.
    pub fn normal(init: &mut Init, name: &str, d_in: usize, d_out: usize, std: f64, bias: f64) -> Result<Self> {
        let mut s = init.pp(name);
        let weight = s.normal("weight", &[d_in, d_out], std)?;
        let bias = Some(s.from_values("bias", vec![bias; d_out], &[d_out])?);
        Ok(Linear { weight, bias })
    }

    pub fn no_bias_normal(init: &mut Init, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        let weight = init.pp(name).normal("weight", &[d_in, d_out], std)?;
        Ok(Linear { weight, bias: None })
    }

    pub fn no_bias(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = init.pp(name).xavier("weight", &[d_in, d_out], d_in, d_out)?;
        Ok(Linear { weight, bias: None })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if last != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim(),
                dims
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, last))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.pp(name);
        Ok(LayerNorm {
            gamma: s.ones("gamma", &[dim])?,
            beta: s.zeros("beta", &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Stack of linear layers with GELU between consecutive layers and no
/// activation after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`, one linear layer per consecutive pair.
    pub fn new(init: &mut Init, name: &str, dims: &[usize]) -> Result<Self> {
        let mut s = init.pp(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut s, &format!("l{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    /// Like [`Mlp::new`] but the last layer is drawn with a small std, so a
    /// following sigmoid or softmax starts unsaturated.
    pub fn small_head(init: &mut Init, name: &str, dims: &[usize], std: f64) -> Result<Self> {
        let mut s = init.pp(name);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let n = format!("l{i}");
                if i == last {
                    Linear::normal(&mut s, &n, w[0], w[1], std, 0.0)
                } else {
                    Linear::new(&mut s, &n, w[0], w[1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = gelu(&h)?;
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/output maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide dim {dim}")));
        }
        let mut s = init.pp(name);
        Ok(MultiHeadAttention {
            q: Linear::new(&mut s, "q", dim, dim)?,
            k: Linear::new(&mut s, "k", dim, dim)?,
            v: Linear::new(&mut s, "v", dim, dim)?,
            out: Linear::new(&mut s, "out", dim, dim)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query: [B, Lq, D]`, `key`/`value`: `[B, Lk, D]` -> `[B, Lq, D]`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let (bk, lk, dk) = key.dims3()?;
        if bk != b || dk != d || value.dims3()? != (bk, lk, dk) {
            return Err(Error::Shape(format!(
                "attention shapes q {:?} k {:?} v {:?}",
                query.dims(),
                key.dims(),
                value.dims()
            )));
        }
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let weights = softmax(&scores, 3)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block: `x + SA(LN x)` then `x + FFN(LN x)`.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl SelfAttentionLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let mut s = init.pp(name);
        Ok(SelfAttentionLayer {
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
            ffn: Mlp::new(&mut s, "ffn", &[dim, dim * ffn_mult, dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Numerically stable softmax along `dim`. The subtracted maximum is detached;
/// softmax is shift invariant so the gradient is unchanged.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Exact GELU `x (1 + erf(x / sqrt 2)) / 2`, composed from `erf` so the
/// backward pass uses the exact derivative.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok((x * cdf)?.affine(0.5, 0.0)?)
}

/// `sigmoid(x) = (1 + tanh(x / 2)) / 2`, stable for large |x|.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Reads a tensor of any rank into a flat `Vec<f64>`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Builds a constant tensor of the store's dtype from f64 values.
pub fn constant(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

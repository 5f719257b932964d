//! Transformer building blocks on plain tensor ops, so every path has a
//! backward pass and runs in either `f32` or `f64`.

use candle_core::{DType, Tensor, D};

use super::params::{Builder, Init};
use crate::error::Result;

/// Additive bias for masked attention logits.
pub(crate) const NEG_INF: f64 = -1e9;

/// Row softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `(B, 1, 1, T)` bias that hides padded key positions.
pub(crate) fn key_padding_bias(lens: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(lens.len() * t);
    for &len in lens {
        data.extend((0..t).map(|j| if j < len { 0.0 } else { NEG_INF }));
    }
    Ok(Tensor::from_vec(data, (lens.len(), 1, 1, t), &super::ParamStore::device())?.to_dtype(dtype)?)
}

/// `(1, 1, T, T)` bias that hides future positions.
pub(crate) fn causal_bias(t: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..t * t)
        .map(|k| if k % t > k / t { NEG_INF } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, t, t), &super::ParamStore::device())?.to_dtype(dtype)?)
}

/// `(B, T)` with 1 at real positions and 0 at padding.
pub(crate) fn length_mask(lens: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(lens.len() * t);
    for &len in lens {
        data.extend((0..t).map(|j| if j < len { 1.0 } else { 0.0 }));
    }
    Ok(Tensor::from_vec(data, (lens.len(), t), &super::ParamStore::device())?.to_dtype(dtype)?)
}

fn normal_std(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(vb: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: vb.param(&format!("{name}.w"), &[d_in, d_out], normal_std(d_in))?,
            b: vb.param(&format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn zero_init(vb: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: vb.param(&format!("{name}.w"), &[d_in, d_out], Init::Zeros)?,
            b: vb.param(&format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank ≥ 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.w)?.broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().expect("rank ≥ 1") = self.w.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(vb: &mut Builder, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: vb.param(&format!("{name}.g"), &[d], Init::Ones)?,
            bias: vb.param(&format!("{name}.b"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Keys and values already split into heads: `(B, h, T, dh)`.
#[derive(Debug, Clone)]
pub(crate) struct KeyValue {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(vb: &mut Builder, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(vb, &format!("{name}.q"), d, d)?,
            k: Linear::new(vb, &format!("{name}.k"), d, d)?,
            v: Linear::new(vb, &format!("{name}.v"), d, d)?,
            o: Linear::new(vb, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    pub fn key_value(&self, mem: &Tensor) -> Result<KeyValue> {
        Ok(KeyValue {
            k: self.split(&self.k.forward(mem)?)?,
            v: self.split(&self.v.forward(mem)?)?,
        })
    }

    /// Attends from `x` `(B, Tq, d)` to precomputed keys and values.
    pub fn attend(&self, x: &Tensor, kv: &KeyValue, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = x.dims3()?;
        let dh = d / self.heads;
        let q = self.split(&self.q.forward(x)?)?;
        let mut scores = (q.matmul(&kv.k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let ctx = softmax_last(&scores)?.matmul(&kv.v)?;
        let ctx = ctx.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&ctx)
    }

    pub fn forward(&self, x: &Tensor, mem: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        self.attend(x, &self.key_value(mem)?, bias)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(vb: &mut Builder, name: &str, d: usize, ff: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(vb, &format!("{name}.up"), d, ff)?,
            down: Linear::new(vb, &format!("{name}.down"), ff, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub(crate) struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(vb: &mut Builder, name: &str, d: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(vb, &format!("{name}.ln1"), d)?,
            attn: Attention::new(vb, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(vb, &format!("{name}.ln2"), d)?,
            ff: FeedForward::new(vb, &format!("{name}.ff"), d, ff)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// A stack of [`EncoderBlock`]s with a final layer norm.
#[derive(Debug, Clone)]
pub(crate) struct Stack {
    blocks: Vec<EncoderBlock>,
    ln: LayerNorm,
}

impl Stack {
    pub fn new(
        vb: &mut Builder,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(vb, &format!("{name}.{i}"), d, heads, ff))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln: LayerNorm::new(vb, &format!("{name}.ln"), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x, bias)?;
        }
        self.ln.forward(&x)
    }
}

/// Cached self-attention keys and values of one decoder layer.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    kv: Option<KeyValue>,
}

/// Pre-norm block with causal self-attention and cross-attention.
#[derive(Debug, Clone)]
pub(crate) struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(vb: &mut Builder, name: &str, d: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(vb, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(vb, &format!("{name}.self"), d, heads)?,
            ln2: LayerNorm::new(vb, &format!("{name}.ln2"), d)?,
            cross: Attention::new(vb, &format!("{name}.cross"), d, heads)?,
            ln3: LayerNorm::new(vb, &format!("{name}.ln3"), d)?,
            ff: FeedForward::new(vb, &format!("{name}.ff"), d, ff)?,
        })
    }

    pub fn memory(&self, mem: &Tensor) -> Result<KeyValue> {
        self.cross.key_value(mem)
    }

    fn tail(&self, x: &Tensor, mem: &KeyValue, mem_bias: &Tensor) -> Result<Tensor> {
        let h = self.ln2.forward(x)?;
        let x = (x + self.cross.attend(&h, mem, Some(mem_bias))?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        causal: &Tensor,
        mem: &KeyValue,
        mem_bias: &Tensor,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(causal))?)?;
        self.tail(&x, mem, mem_bias)
    }

    /// One incremental position `(B, 1, d)`, extending `cache`.
    pub fn step(
        &self,
        x: &Tensor,
        cache: &mut LayerCache,
        mem: &KeyValue,
        mem_bias: &Tensor,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let new = self.self_attn.key_value(&h)?;
        let kv = match cache.kv.take() {
            None => new,
            Some(old) => KeyValue {
                k: Tensor::cat(&[&old.k, &new.k], 2)?,
                v: Tensor::cat(&[&old.v, &new.v], 2)?,
            },
        };
        let x = (x + self.self_attn.attend(&h, &kv, None)?)?;
        cache.kv = Some(kv);
        self.tail(&x, mem, mem_bias)
    }
}

/// Decoder layers, final norm and vocabulary projection. Token embeddings
/// are owned by the enclosing model.
#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    blocks: Vec<DecoderBlock>,
    ln: LayerNorm,
    out: Linear,
}

/// Memory projected once per decoding call.
pub(crate) struct Memory {
    kv: Vec<KeyValue>,
    bias: Tensor,
}

impl Decoder {
    pub fn new(
        vb: &mut Builder,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ff: usize,
        vocab: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| DecoderBlock::new(vb, &format!("{name}.{i}"), d, heads, ff))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln: LayerNorm::new(vb, &format!("{name}.ln"), d)?,
            out: Linear::new(vb, &format!("{name}.out"), d, vocab)?,
        })
    }

    pub fn memory(&self, mem: &Tensor, mem_lens: &[usize]) -> Result<Memory> {
        let t = mem.dim(1)?;
        Ok(Memory {
            kv: self.blocks.iter().map(|b| b.memory(mem)).collect::<Result<_>>()?,
            bias: key_padding_bias(mem_lens, t, mem.dtype())?,
        })
    }

    /// Teacher-forced logits `(B, T, V)` for embedded inputs `(B, T, d)`.
    pub fn forward(&self, x: &Tensor, mem: &Memory) -> Result<Tensor> {
        let causal = causal_bias(x.dim(1)?, x.dtype())?;
        let mut x = x.clone();
        for (b, kv) in self.blocks.iter().zip(&mem.kv) {
            x = b.forward(&x, &causal, kv, &mem.bias)?;
        }
        self.out.forward(&self.ln.forward(&x)?)
    }

    pub fn new_cache(&self) -> Vec<LayerCache> {
        vec![LayerCache::default(); self.blocks.len()]
    }

    /// Logits `(B, 1, V)` for one new embedded position.
    pub fn step(&self, x: &Tensor, cache: &mut [LayerCache], mem: &Memory) -> Result<Tensor> {
        let mut x = x.clone();
        for ((b, c), kv) in self.blocks.iter().zip(cache.iter_mut()).zip(&mem.kv) {
            x = b.step(&x, c, kv, &mem.bias)?;
        }
        self.out.forward(&self.ln.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax() {
        let x = Tensor::new(&[[1.0f64, 0.0, -3.0], [1000.0, 1000.0, 1000.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((p[1][0] - 1.0 / 3.0).abs() < 1e-12);
        let lp = log_softmax_last(&x).unwrap().exp().unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in p.iter().flatten().zip(lp.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_has_a_gradient() {
        let v = candle_core::Var::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let p = softmax_last(v.as_tensor()).unwrap();
        let loss = p.narrow(0, 0, 1).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let grad = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let p0 = 1.0 / (1.0 + 1f64.exp());
        assert!((grad[0] - p0 * (1.0 - p0)).abs() < 1e-12);
        assert!((grad[1] + p0 * (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn attention_over_a_single_slot_with_identity_maps_returns_it() {
        let mut store = ParamStore::new(DType::F64);
        let mut vb = Builder::new(&mut store, 0);
        let attn = Attention::new(&mut vb, "a", 4, 1).unwrap();
        let eye = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        store.var("a.v.w").unwrap().set(&eye).unwrap();
        store.var("a.o.w").unwrap().set(&eye).unwrap();
        let s = Tensor::new(&[[[0.3f64, -1.0, 2.0, 0.5]]], &Device::Cpu).unwrap();
        let out = attn.forward(&s, &s, None).unwrap();
        assert_eq!(out.to_vec3::<f64>().unwrap(), s.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut Builder::new(&mut store, 0), "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing() {
        let mut store = ParamStore::new(DType::F64);
        let mut vb = Builder::new(&mut store, 3);
        let dec = Decoder::new(&mut vb, "dec", 2, 8, 2, 16, 11).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let mem = Tensor::randn(0.0f64, 1.0, (2, 3, 8), &Device::Cpu).unwrap();
        let m = dec.memory(&mem, &[3, 2]).unwrap();
        let full = dec.forward(&x, &m).unwrap();
        let mut cache = dec.new_cache();
        for t in 0..5 {
            let step = dec.step(&x.narrow(1, t, 1).unwrap(), &mut cache, &m).unwrap();
            let diff = (step - full.narrow(1, t, 1).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-10, "step {t} differs by {diff}");
        }
    }
}

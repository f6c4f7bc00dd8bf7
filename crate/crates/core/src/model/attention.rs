use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Pre-norm transformer block with multi-head self-attention restricted to
/// non-overlapping `window × window` windows, followed by a GELU MLP. Both
/// sublayers are residual.
#[derive(Clone, Debug)]
pub struct WindowAttentionBlock {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl WindowAttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        if window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        let hidden = channels * mlp_ratio;
        Ok(WindowAttentionBlock {
            channels,
            heads,
            window,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, x)?.0)
    }

    /// Output plus the attention weights `[windows·heads, T, T]`.
    pub fn forward_with_attention<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let (b, h, w, c) = g.value(x).nhwc()?;
        if c != self.channels {
            return Err(Error::shape("window_attention_block", g.shape(x), &[b, h, w, self.channels]));
        }
        let ws = self.window;
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        let heads = self.heads;
        let d = c / heads;
        let tokens = ws * ws;

        let y = self.norm1.forward(g, x)?;
        let y = if (hp, wp) != (h, w) { g.resize_canvas(y, hp, wp)? } else { y };
        let win = g.window_partition(y, ws)?;
        let n = g.shape(win)[0];
        let qkv = self.qkv.forward(g, win)?;

        let split = |g: &mut Graph<T>, start: usize| -> Result<Var> {
            let part = g.slice_lastdim(qkv, start, c)?;
            let part = g.reshape(part, &[n, tokens, heads, d])?;
            let part = g.permute(part, &[0, 2, 1, 3])?;
            g.reshape(part, &[n * heads, tokens, d])
        };
        let q = split(g, 0)?;
        let k = split(g, c)?;
        let v = split(g, 2 * c)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = g.softmax_lastdim(scores)?;
        let o = g.matmul(attn, v)?;
        let o = g.reshape(o, &[n, heads, tokens, d])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[n, tokens, c])?;
        let o = self.proj.forward(g, o)?;
        let o = g.window_merge(o, ws, b, hp, wp)?;
        let o = if (hp, wp) != (h, w) { g.resize_canvas(o, h, w)? } else { o };
        let x = g.add(x, o)?;

        let m = self.norm2.forward(g, x)?;
        let m = self.fc1.forward(g, m)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, m)?;
        Ok((g.add(x, m)?, attn))
    }
}

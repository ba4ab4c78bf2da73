use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::dim_err;
use crate::nn::{Conv, LayerNorm};
use crate::params::ParamStore;
use crate::Result;

/// One cross-attention + gated depthwise feed-forward layer.
///
/// `x ← x + m` with `a = W_o·Attn(W_q·LN(x), W_k·LN(ctx), W_v·LN(ctx))` and
/// `m = a + GDFN(LN(a))`. Every bias starts at zero, so a zero context
/// yields `m = 0` and the layer is the identity.
#[derive(Clone, Debug)]
pub struct FfbLayer {
    norm_q: LayerNorm,
    norm_c: LayerNorm,
    wq: Conv,
    wk: Conv,
    wv: Conv,
    wo: Conv,
    norm_f: LayerNorm,
    ffn_in: Conv,
    ffn_dw: Conv,
    ffn_out: Conv,
    hidden: usize,
}

impl FfbLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        context: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), channels)?,
            norm_c: LayerNorm::new(store, &format!("{name}.norm_c"), context)?,
            wq: Conv::new(store, rng, &format!("{name}.q"), channels, channels, 1, 1)?,
            wk: Conv::new(store, rng, &format!("{name}.k"), context, channels, 1, 1)?,
            wv: Conv::new(store, rng, &format!("{name}.v"), context, channels, 1, 1)?,
            wo: Conv::new(store, rng, &format!("{name}.o"), channels, channels, 1, 1)?,
            norm_f: LayerNorm::new(store, &format!("{name}.norm_f"), channels)?,
            ffn_in: Conv::new(store, rng, &format!("{name}.ffn_in"), channels, 2 * hidden, 1, 1)?,
            ffn_dw: Conv::new(store, rng, &format!("{name}.ffn_dw"), 2 * hidden, 2 * hidden, 3, 2 * hidden)?,
            ffn_out: Conv::new(store, rng, &format!("{name}.ffn_out"), hidden, channels, 1, 1)?,
            hidden,
        })
    }

    /// The value projection, exposed so tests can zero it.
    pub fn value_projection(&self) -> &Conv {
        &self.wv
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: Var, heads: usize) -> Result<Var> {
        let qn = self.norm_q.forward(tape, store, x)?;
        let cn = self.norm_c.forward(tape, store, ctx)?;
        let q = self.wq.forward(tape, store, qn)?;
        let k = self.wk.forward(tape, store, cn)?;
        let v = self.wv.forward(tape, store, cn)?;
        let att = tape.attention(q, k, v, heads)?;
        let a = self.wo.forward(tape, store, att)?;

        let f = self.norm_f.forward(tape, store, a)?;
        let u = self.ffn_in.forward(tape, store, f)?;
        let u = self.ffn_dw.forward(tape, store, u)?;
        let u1 = tape.slice(u, 0, self.hidden)?;
        let u2 = tape.slice(u, self.hidden, self.hidden)?;
        let g = tape.gelu(u1);
        let g = tape.mul(g, u2)?;
        let g = self.ffn_out.forward(tape, store, g)?;
        let m = tape.add(a, g)?;
        tape.add(x, m)
    }
}

/// Feature Fuse Block: a stack of [`FfbLayer`]s sharing one context.
#[derive(Clone, Debug)]
pub struct Ffb {
    layers: Vec<FfbLayer>,
    heads: usize,
}

impl Ffb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        context: usize,
        hidden: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| FfbLayer::new(store, rng, &format!("{name}.{i}"), channels, context, hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, heads })
    }

    pub fn layers(&self) -> &[FfbLayer] {
        &self.layers
    }

    /// Fuse `ctx` into `query`; the output has `query`'s shape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, ctx: Var) -> Result<Var> {
        let qs = tape.value(query).spatial();
        let cs = tape.value(ctx).spatial();
        if qs != cs {
            return Err(dim_err!("FFB query grid {qs:?} differs from context grid {cs:?}"));
        }
        let mut x = query;
        for layer in &self.layers {
            x = layer.forward(tape, store, x, ctx, self.heads)?;
        }
        Ok(x)
    }
}

//! Side transfer network.
//!
//! ```text
//! E_i^e = W_i^t(E_i)   E_s^e = W_s^t(E_s)   E_m^e = R(W_m^t(E_m))
//! F^c = W_c^h(E_i^e)
//! E^m = FFB₁(E_i^e ⊙ W_c^g(F^c), E_s^e)        F^m = W_m^h(E^m)
//! E^f = FFB₂(E^m ⊙ W_m^g(F^m), E_m^e)          F^f = W_f^h(E^f)
//! F̈^m = W_m^a([F^m, F^c])   F̈^f = W_f^a([F^f, F̈^m])
//! Ŷ^c = H(F^c)  Ŷ^m = H(F̈^m)  Ŷ^f = H(F̈^f)  Ŷ^u = H(W_u^a([F^c, F̈^m, F̈^f]))
//! ```
//!
//! `H` is one shared head: a 3×3 convolution, two transposed-convolution
//! upsampling stages and a sigmoid, resized to the provider frame and
//! cropped to the source image.

mod ffb;

pub use ffb::{Ffb, FfbLayer};

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{FeatureBundle, ToyBackbone};
use crate::error::{cfg_err, dim_err};
use crate::nn::{Conv, Upsample};
use crate::params::ParamStore;
use crate::{Map, Result, Tensor};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StnConfig {
    /// `C_s` of the provider's shallow features.
    pub shallow_channels: usize,
    /// `C_i` of the provider's image embedding.
    pub image_channels: usize,
    /// `C_m` of each prompt's mask embedding.
    pub mask_channels: usize,
    /// Number of prompt points.
    pub prompts: usize,
    pub c1: usize,
    pub c2: usize,
    /// `C_h`, channels of the granularity features.
    pub hidden: usize,
    pub heads: usize,
    /// Layers per feature fuse block.
    pub ffb_depth: usize,
    /// Hidden width of the gated feed-forward network.
    pub ffn_hidden: usize,
    /// Kernel of `W_i^t` and `W_s^t`.
    pub proj_kernel: usize,
    /// Kernel of the `W^h` and `W^a` convolutions.
    pub mix_kernel: usize,
    /// Upsampling factors of the two head stages.
    pub head_up: [usize; 2],
    pub head_mid: usize,
    /// Seed of the weight initialisation.
    pub seed: u64,
}

impl StnConfig {
    /// Default configuration for a ViT-B style provider: 768-channel
    /// shallow features, 256-channel embedding, 32-channel decoder
    /// embeddings for an 8×8 prompt grid.
    pub fn base() -> Self {
        Self {
            shallow_channels: 768,
            image_channels: 256,
            mask_channels: 32,
            prompts: 64,
            c1: 64,
            c2: 2,
            hidden: 32,
            heads: 4,
            ffb_depth: 4,
            ffn_hidden: 170,
            proj_kernel: 3,
            mix_kernel: 3,
            head_up: [4, 4],
            head_mid: 16,
            seed: 0,
        }
    }

    /// Small network sized for a toy provider.
    pub fn for_toy(toy: &ToyBackbone, grid_side: usize) -> Self {
        let half = toy.stride() / 2;
        Self {
            shallow_channels: toy.shallow_channels(),
            image_channels: toy.image_channels(),
            mask_channels: toy.mask_channels(),
            prompts: grid_side * grid_side,
            c1: 16,
            c2: 2,
            hidden: 8,
            heads: 2,
            ffb_depth: 1,
            ffn_hidden: 16,
            proj_kernel: 3,
            mix_kernel: 3,
            head_up: if half >= 1 { [half, 2] } else { [1, 1] },
            head_mid: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("shallow_channels", self.shallow_channels),
            ("image_channels", self.image_channels),
            ("mask_channels", self.mask_channels),
            ("prompts", self.prompts),
            ("c1", self.c1),
            ("c2", self.c2),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffb_depth", self.ffb_depth),
            ("ffn_hidden", self.ffn_hidden),
            ("head_mid", self.head_mid),
            ("head_up", self.head_up[0].min(self.head_up[1])),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(cfg_err!("{name} must be positive"));
            }
        }
        if !self.c1.is_multiple_of(self.heads) {
            return Err(cfg_err!("c1 = {} is not divisible by {} heads", self.c1, self.heads));
        }
        if self.proj_kernel.is_multiple_of(2) || self.mix_kernel.is_multiple_of(2) {
            return Err(cfg_err!("kernels must be odd"));
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("shallow_channels", self.shallow_channels.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("mask_channels", self.mask_channels.to_string()),
            ("prompts", self.prompts.to_string()),
            ("c1", self.c1.to_string()),
            ("c2", self.c2.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("ffb_depth", self.ffb_depth.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("proj_kernel", self.proj_kernel.to_string()),
            ("mix_kernel", self.mix_kernel.to_string()),
            ("head_up", format!("{},{}", self.head_up[0], self.head_up[1])),
            ("head_mid", self.head_mid.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Set one field from its `key=value` form. Returns `false` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| cfg_err!("`{key}`: `{v}` is not an integer"));
        match key {
            "shallow_channels" => self.shallow_channels = int(value)?,
            "image_channels" => self.image_channels = int(value)?,
            "mask_channels" => self.mask_channels = int(value)?,
            "prompts" => self.prompts = int(value)?,
            "c1" => self.c1 = int(value)?,
            "c2" => self.c2 = int(value)?,
            "hidden" => self.hidden = int(value)?,
            "heads" => self.heads = int(value)?,
            "ffb_depth" => self.ffb_depth = int(value)?,
            "ffn_hidden" => self.ffn_hidden = int(value)?,
            "proj_kernel" => self.proj_kernel = int(value)?,
            "mix_kernel" => self.mix_kernel = int(value)?,
            "head_mid" => self.head_mid = int(value)?,
            "seed" => self.seed = value.trim().parse().map_err(|_| cfg_err!("`seed`: `{value}` is not an integer"))?,
            "head_up" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err(cfg_err!("`head_up` takes two comma-separated factors"));
                }
                self.head_up = [int(parts[0])?, int(parts[1])?];
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// The four probability maps of one image, each `H × W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMapSet {
    pub coarse: Map,
    pub medium: Map,
    pub fine: Map,
    /// The final output `Ŷ^u`.
    pub fused: Map,
}

impl EdgeMapSet {
    pub fn size(&self) -> (usize, usize) {
        self.coarse.size()
    }

    pub fn validate(&self) -> Result<()> {
        for m in [&self.medium, &self.fine, &self.fused] {
            self.coarse.ensure_same_size(m)?;
        }
        let ok = |m: &Map| m.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !(ok(&self.coarse) && ok(&self.medium) && ok(&self.fine) && ok(&self.fused)) {
            return Err(crate::Error::Input(String::from("edge maps must lie in [0, 1]")));
        }
        Ok(())
    }
}

/// Feature bundle tensors placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub shallow: Var,
    pub image: Var,
    pub masks: Var,
}

impl BundleVars {
    /// Bind as constants; with `track` the features become gradient-tracked
    /// inputs instead, which is only useful for probing the dataflow.
    pub fn bind(tape: &mut Tape, bundle: &FeatureBundle, track: bool) -> Self {
        let mut leaf = |t: &Tensor| if track { tape.input(t.clone()) } else { tape.constant(t.clone()) };
        Self {
            shallow: leaf(&bundle.shallow_features),
            image: leaf(&bundle.image_embedding),
            masks: leaf(&bundle.mask_embeddings),
        }
    }
}

/// Edge-aware features `E_s^e, E_i^e, E_m^e`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeAwareVars {
    pub shallow: Var,
    pub image: Var,
    pub masks: Var,
}

/// Granularity features `F^c, F^m, F^f` and their fused forms.
#[derive(Clone, Copy, Debug)]
pub struct GranularityVars {
    pub coarse: Var,
    pub medium: Var,
    pub fine: Var,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StnVars {
    pub edge_aware: EdgeAwareVars,
    pub granularity: GranularityVars,
    /// `F̈^m`.
    pub fused_medium: Var,
    /// `F̈^f`.
    pub fused_fine: Var,
    /// Probability maps `[1, H, W]` for coarse, medium, fine and final.
    pub outputs: [Var; 4],
}

#[derive(Clone, Debug)]
struct Head {
    conv: Conv,
    up1: Upsample,
    up2: Upsample,
}

/// The trainable network with its parameters.
#[derive(Clone, Debug)]
pub struct Stn {
    config: StnConfig,
    params: ParamStore,
    proj_image: Conv,
    proj_shallow: Conv,
    proj_mask: Conv,
    hidden_coarse: Conv,
    hidden_medium: Conv,
    hidden_fine: Conv,
    gate_coarse: Conv,
    gate_medium: Conv,
    agg_medium: Conv,
    agg_fine: Conv,
    agg_final: Conv,
    ffb1: Ffb,
    ffb2: Ffb,
    head: Head,
}

impl Stn {
    pub fn new(config: StnConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let s = &mut p;
        let (pk, mk) = (c.proj_kernel, c.mix_kernel);
        let proj_image = Conv::new(s, rng, "proj.image", c.image_channels, c.c1, pk, 1)?;
        let proj_shallow = Conv::new(s, rng, "proj.shallow", c.shallow_channels, c.c1, pk, 1)?;
        let proj_mask = Conv::new(s, rng, "proj.mask", c.mask_channels, c.c2, 1, 1)?;
        let hidden_coarse = Conv::new(s, rng, "hidden.coarse", c.c1, c.hidden, mk, 1)?;
        let hidden_medium = Conv::new(s, rng, "hidden.medium", c.c1, c.hidden, mk, 1)?;
        let hidden_fine = Conv::new(s, rng, "hidden.fine", c.c1, c.hidden, mk, 1)?;
        let gate_coarse = Conv::new(s, rng, "gate.coarse", c.hidden, c.c1, 1, 1)?;
        let gate_medium = Conv::new(s, rng, "gate.medium", c.hidden, c.c1, 1, 1)?;
        for g in [&gate_coarse, &gate_medium] {
            s.set(g.bias, Tensor::filled(&[c.c1], 1.0))?;
        }
        let ffb1 = Ffb::new(s, rng, "ffb1", c.c1, c.c1, c.ffn_hidden, c.heads, c.ffb_depth)?;
        let ffb2 = Ffb::new(s, rng, "ffb2", c.c1, c.c2 * c.prompts, c.ffn_hidden, c.heads, c.ffb_depth)?;
        let agg_medium = Conv::new(s, rng, "agg.medium", 2 * c.hidden, c.hidden, mk, 1)?;
        let agg_fine = Conv::new(s, rng, "agg.fine", 2 * c.hidden, c.hidden, mk, 1)?;
        let agg_final = Conv::new(s, rng, "agg.final", 3 * c.hidden, c.hidden, mk, 1)?;
        let head = Head {
            conv: Conv::new(s, rng, "head.conv", c.hidden, c.hidden, 3, 1)?,
            up1: Upsample::new(s, rng, "head.up1", c.hidden, c.head_mid, c.head_up[0])?,
            up2: Upsample::new(s, rng, "head.up2", c.head_mid, 1, c.head_up[1])?,
        };
        Ok(Self {
            config,
            params: p,
            proj_image,
            proj_shallow,
            proj_mask,
            hidden_coarse,
            hidden_medium,
            hidden_fine,
            gate_coarse,
            gate_medium,
            agg_medium,
            agg_fine,
            agg_final,
            ffb1,
            ffb2,
            head,
        })
    }

    pub fn config(&self) -> &StnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn ffb1(&self) -> &Ffb {
        &self.ffb1
    }

    pub fn ffb2(&self) -> &Ffb {
        &self.ffb2
    }

    /// Parameter tensor names of the shared head.
    pub fn head_parameter_names(&self) -> [&str; 6] {
        let h = &self.head;
        let n = |id| self.params.name(id);
        [n(h.conv.weight), n(h.conv.bias), n(h.up1.weight), n(h.up1.bias), n(h.up2.weight), n(h.up2.bias)]
    }

    fn check_bundle(&self, tape: &Tape, b: &BundleVars) -> Result<usize> {
        let c = &self.config;
        let (cs, d, _) = tape.value(b.shallow).dims3()?;
        let (ci, di, _) = tape.value(b.image).dims3()?;
        let &[p, cm, dm, _] = tape.value(b.masks).shape() else {
            return Err(dim_err!("mask embeddings must be 4-D"));
        };
        if cs != c.shallow_channels || ci != c.image_channels || cm != c.mask_channels || p != c.prompts {
            return Err(cfg_err!(
                "bundle channels (C_s {cs}, C_i {ci}, C_m {cm}, P {p}) do not match the network ({}, {}, {}, {})",
                c.shallow_channels,
                c.image_channels,
                c.mask_channels,
                c.prompts
            ));
        }
        if d != di || dm % d != 0 {
            return Err(cfg_err!("mask grid {dm} is not a multiple of the feature grid {d}"));
        }
        Ok(d)
    }

    /// Edge-aware projections.
    pub fn project(&self, tape: &mut Tape, b: &BundleVars) -> Result<EdgeAwareVars> {
        let d = self.check_bundle(tape, b)?;
        let ps = &self.params;
        let image = self.proj_image.forward(tape, ps, b.image)?;
        let shallow = self.proj_shallow.forward(tape, ps, b.shallow)?;
        let mut m = self.proj_mask.forward(tape, ps, b.masks)?;
        let dm = tape.value(m).spatial().0;
        if dm != d {
            m = tape.avg_pool(m, dm / d)?;
        }
        let masks = tape.reshape(m, &[self.config.prompts * self.config.c2, d, d])?;
        Ok(EdgeAwareVars { shallow, image, masks })
    }

    /// The FFB cascade producing `F^c, F^m, F^f`.
    pub fn cascade(&self, tape: &mut Tape, ea: &EdgeAwareVars) -> Result<GranularityVars> {
        let ps = &self.params;
        let coarse = self.hidden_coarse.forward(tape, ps, ea.image)?;
        let g = self.gate_coarse.forward(tape, ps, coarse)?;
        let q = tape.mul(ea.image, g)?;
        let em = self.ffb1.forward(tape, ps, q, ea.shallow)?;
        let medium = self.hidden_medium.forward(tape, ps, em)?;
        let g = self.gate_medium.forward(tape, ps, medium)?;
        let q = tape.mul(em, g)?;
        let ef = self.ffb2.forward(tape, ps, q, ea.masks)?;
        let fine = self.hidden_fine.forward(tape, ps, ef)?;
        Ok(GranularityVars { coarse, medium, fine })
    }

    /// Shared head: features `[C_h, D, D]` to probabilities `[1, H, W]`.
    pub fn head(&self, tape: &mut Tape, x: Var, frame_side: usize, size: (usize, usize)) -> Result<Var> {
        let ps = &self.params;
        let h = &self.head;
        let x = h.conv.forward(tape, ps, x)?;
        let x = tape.gelu(x);
        let x = h.up1.forward(tape, ps, x)?;
        let x = tape.gelu(x);
        let mut x = h.up2.forward(tape, ps, x)?;
        if tape.value(x).spatial() != (frame_side, frame_side) {
            x = tape.resize(x, frame_side, frame_side)?;
        }
        let x = tape.crop(x, size.0, size.1)?;
        Ok(tape.sigmoid(x))
    }

    /// Aggregations and the four head applications.
    pub fn heads(
        &self,
        tape: &mut Tape,
        gf: &GranularityVars,
        frame_side: usize,
        size: (usize, usize),
    ) -> Result<(Var, Var, [Var; 4])> {
        let ps = &self.params;
        let cat = tape.concat(&[gf.medium, gf.coarse])?;
        let fused_medium = self.agg_medium.forward(tape, ps, cat)?;
        let cat = tape.concat(&[gf.fine, fused_medium])?;
        let fused_fine = self.agg_fine.forward(tape, ps, cat)?;
        let cat = tape.concat(&[gf.coarse, fused_medium, fused_fine])?;
        let fused_final = self.agg_final.forward(tape, ps, cat)?;
        let yc = self.head(tape, gf.coarse, frame_side, size)?;
        let ym = self.head(tape, fused_medium, frame_side, size)?;
        let yf = self.head(tape, fused_fine, frame_side, size)?;
        let yu = self.head(tape, fused_final, frame_side, size)?;
        Ok((fused_medium, fused_fine, [yc, ym, yf, yu]))
    }

    /// Full forward pass for a bundle already bound to `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &BundleVars,
        frame_side: usize,
        size: (usize, usize),
    ) -> Result<StnVars> {
        if frame_side < size.0.max(size.1) {
            return Err(dim_err!("frame side {frame_side} smaller than image {size:?}"));
        }
        let edge_aware = self.project(tape, b)?;
        let granularity = self.cascade(tape, &edge_aware)?;
        let (fused_medium, fused_fine, outputs) = self.heads(tape, &granularity, frame_side, size)?;
        Ok(StnVars { edge_aware, granularity, fused_medium, fused_fine, outputs })
    }

    /// Inference: the four edge maps of one bundle.
    pub fn predict(&self, bundle: &FeatureBundle) -> Result<EdgeMapSet> {
        bundle.validate()?;
        let mut tape = Tape::new();
        let b = BundleVars::bind(&mut tape, bundle, false);
        let vars = self.forward(&mut tape, &b, bundle.frame_side, bundle.source_size)?;
        Ok(maps_from_tape(&tape, &vars.outputs))
    }
}

/// Convert the `[1, H, W]` output nodes into maps.
pub fn maps_from_tape(tape: &Tape, outputs: &[Var; 4]) -> EdgeMapSet {
    let to_map = |v: Var| {
        let t = tape.value(v);
        let (h, w) = t.spatial();
        Map::from_vec(h, w, t.data().to_vec()).expect("head output is [1, H, W]")
    };
    EdgeMapSet {
        coarse: to_map(outputs[0]),
        medium: to_map(outputs[1]),
        fine: to_map(outputs[2]),
        fused: to_map(outputs[3]),
    }
}

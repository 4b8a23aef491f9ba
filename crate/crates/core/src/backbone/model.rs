use crate::attention::{rsir_win_ranked, AttentionConfig, AttentionWeights, ForwardCtx, Projection, QkvProjection};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

use super::config::ModelConfig;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

/// Pre-norm transformer block: RSIR-Win and an MLP, each with a residual.
#[derive(Debug, Clone)]
pub struct RsirBlock {
    pub cfg: AttentionConfig,
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// 2×2 neighbor concat, layer norm, then a bias-free 4C → 2C projection.
#[derive(Debug, Clone, Copy)]
pub struct PatchMerge {
    pub norm: NormParams,
    pub reduction: LinearParams,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<RsirBlock>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub patch_embed: LinearParams,
    pub stages: Vec<Stage>,
    pub norm: NormParams,
    pub head: LinearParams,
}

struct Builder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut SeedRng,
}

impl<T: Element> Builder<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<LinearParams> {
        let weight = self.store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[fan_in, fan_out], INIT_STD, self.rng),
        )?;
        let bias = if bias {
            Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(LinearParams { weight, bias })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<NormParams> {
        Ok(NormParams {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }
}

/// Tape views of model parameters.
pub(crate) fn bind_linear<'t, T: Element>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    p: &LinearParams,
) -> Projection<'t, T> {
    Projection::new(tape.param(store, p.weight), p.bias.map(|b| tape.param(store, b)))
}

fn layer_norm<'t, T: Element>(x: Var<'t, T>, store: &ParamStore<T>, p: &NormParams) -> Result<Var<'t, T>> {
    let tape = x.tape();
    x.layer_norm(&tape.param(store, p.gamma), &tape.param(store, p.beta), LN_EPS)
}

impl AttentionParams {
    pub fn bind<'t, T: Element>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> AttentionWeights<'t, T> {
        AttentionWeights {
            qkv: QkvProjection {
                q: bind_linear(tape, store, &self.q),
                k: bind_linear(tape, store, &self.k),
                v: bind_linear(tape, store, &self.v),
            },
            out: bind_linear(tape, store, &self.out),
        }
    }
}

impl RsirBlock {
    /// Register a freshly initialized block's parameters under `prefix`.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: AttentionConfig,
        mlp_hidden: usize,
        qkv_bias: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let mut b = Builder { store, rng };
        let (n, c) = (prefix, cfg.dim());
        Ok(Self {
            cfg,
            norm1: b.norm(&format!("{n}.norm1"), c)?,
            attn: AttentionParams {
                q: b.linear(&format!("{n}.attn.wq"), c, c, qkv_bias)?,
                k: b.linear(&format!("{n}.attn.wk"), c, c, qkv_bias)?,
                v: b.linear(&format!("{n}.attn.wv"), c, c, qkv_bias)?,
                out: b.linear(&format!("{n}.attn.wo"), c, c, true)?,
            },
            norm2: b.norm(&format!("{n}.norm2"), c)?,
            fc1: b.linear(&format!("{n}.mlp.fc1"), c, mlp_hidden, true)?,
            fc2: b.linear(&format!("{n}.mlp.fc2"), mlp_hidden, c, true)?,
        })
    }

    /// `x̂ = RSIR-Win(LN(x)) + x`, then `MLP(LN(x̂)) + x̂`. IR-Win windows are
    /// ranked by the channel mean of `x`.
    pub fn forward<'t, T: Element>(
        &self,
        x: Var<'t, T>,
        store: &ParamStore<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let h = layer_norm(x, store, &self.norm1)?;
        // IR-Win ranks by the block input: LN(x) has zero channel mean per
        // token until the norm's affine terms move away from 1 and 0.
        let source = x.to_tensor();
        let attn = rsir_win_ranked(h, &source, &self.attn.bind(tape, store), &self.cfg, ctx)?;
        let x = x.add(&attn)?;
        let h = layer_norm(x, store, &self.norm2)?;
        let h = bind_linear(tape, store, &self.fc1).apply(h)?.gelu();
        let h = bind_linear(tape, store, &self.fc2).apply(h)?;
        x.add(&h)
    }
}

/// Cut `[B, C_in, H, W]` images into non-overlapping `p×p` patches,
/// flattened channel-major: `[B, (H/p)(W/p), C_in·p·p]`.
pub fn extract_patches<'t, T: Element>(image: Var<'t, T>, patch: usize) -> Result<(Var<'t, T>, (usize, usize))> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "patch_embed",
            msg: format!("expected [B, C, H, W], got {s:?}"),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            op: "patch_embed",
            msg: format!("image {h}x{w} is not divisible by patch size {patch}"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let p = image
        .reshape(&[b, c, gh, patch, gw, patch])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, gh * gw, c * patch * patch])?;
    Ok((p, (gh, gw)))
}

/// Concatenate each 2×2 block of neighboring tokens: `[B, L, C]` → `[B, L/4, 4C]`.
pub fn merge_neighbors<'t, T: Element>(x: Var<'t, T>, grid: (usize, usize)) -> Result<(Var<'t, T>, (usize, usize))> {
    let s = x.shape();
    let (gh, gw) = grid;
    if s.len() != 3 || s[1] != gh * gw {
        return Err(Error::InvalidShape {
            op: "patch_merge",
            msg: format!("tokens {s:?} do not match grid {gh}x{gw}"),
        });
    }
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "patch_merge",
            msg: format!("grid {gh}x{gw} has an odd side"),
        });
    }
    let (b, c) = (s[0], s[2]);
    let (h2, w2) = (gh / 2, gw / 2);
    // Concat order (r0,c0), (r1,c0), (r0,c1), (r1,c1).
    let m = x
        .reshape(&[b, h2, 2, w2, 2, c])?
        .permute(&[0, 1, 3, 4, 2, 5])?
        .reshape(&[b, h2 * w2, 4 * c])?;
    Ok((m, (h2, w2)))
}

impl PatchMerge {
    pub fn forward<'t, T: Element>(
        &self,
        x: Var<'t, T>,
        grid: (usize, usize),
        store: &ParamStore<T>,
    ) -> Result<(Var<'t, T>, (usize, usize))> {
        let (m, grid) = merge_neighbors(x, grid)?;
        let m = layer_norm(m, store, &self.norm)?;
        Ok((bind_linear(x.tape(), store, &self.reduction).apply(m)?, grid))
    }
}

impl<T: Element> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let p = cfg.patch_size;
        let patch_embed = b.linear("patch_embed", cfg.in_channels * p * p, cfg.stages[0].dim, true)?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (si, sc) in cfg.stages.iter().enumerate() {
            let prefix = format!("stage{}", si + 1);
            let merge = if si == 0 {
                None
            } else {
                let prev = cfg.stages[si - 1].dim;
                Some(PatchMerge {
                    norm: b.norm(&format!("{prefix}.merge.norm"), 4 * prev)?,
                    reduction: b.linear(&format!("{prefix}.merge.reduction"), 4 * prev, sc.dim, false)?,
                })
            };
            let attn_cfg = cfg.attention_config(si)?;
            let hidden = cfg.mlp_hidden(sc.dim);
            let mut blocks = Vec::with_capacity(sc.depth);
            for bi in 0..sc.depth {
                let name = format!("{prefix}.block{bi}");
                blocks.push(RsirBlock::new(b.store, &name, attn_cfg, hidden, cfg.qkv_bias, b.rng)?);
            }
            stages.push(Stage { merge, blocks });
        }
        let last = cfg.final_dim();
        let norm = b.norm("norm", last)?;
        let head = b.linear("head", last, cfg.num_classes, true)?;
        Ok(Self {
            cfg,
            store,
            patch_embed,
            stages,
            norm,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Patch tokens `[B, L, C]` and their grid.
    pub fn patch_embed<'t>(&self, image: Var<'t, T>) -> Result<(Var<'t, T>, (usize, usize))> {
        let s = image.shape();
        if s.len() == 4 && s[1] != self.cfg.in_channels {
            return Err(Error::InvalidShape {
                op: "patch_embed",
                msg: format!("model expects {} channels, image has {}", self.cfg.in_channels, s[1]),
            });
        }
        let (p, grid) = extract_patches(image, self.cfg.patch_size)?;
        let tokens = bind_linear(image.tape(), &self.store, &self.patch_embed).apply(p)?;
        Ok((tokens, grid))
    }

    /// Token features after the last stage, `[B, L_4, C_4]`.
    pub fn features<'t>(&self, image: Var<'t, T>, ctx: &mut ForwardCtx) -> Result<Var<'t, T>> {
        let (mut x, mut grid) = self.patch_embed(image)?;
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                (x, grid) = m.forward(x, grid, &self.store)?;
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                ctx.set_layer(format!("stage{}.block{}", si + 1, bi));
                x = block.forward(x, &self.store, ctx)?;
            }
        }
        Ok(x)
    }

    /// Class logits `[B, num_classes]` for `[B, C_in, H, W]` images.
    pub fn forward<'t>(&self, image: Var<'t, T>, ctx: &mut ForwardCtx) -> Result<Var<'t, T>> {
        let s = image.shape();
        if s.len() == 4 && (s[2] != self.cfg.image_size || s[3] != self.cfg.image_size) {
            self.cfg.validate_for(s[2].min(s[3]))?;
        }
        let x = self.features(image, ctx)?;
        let x = layer_norm(x, &self.store, &self.norm)?;
        let pooled = x.mean(1)?;
        bind_linear(image.tape(), &self.store, &self.head).apply(pooled)
    }
}

//! Window multi-head self-attention and the RS-Win / IR-Win groupings.
//!
//! `rsir_win` splits the heads into two equal groups. The first group
//! attends inside windows of uniformly random token subsets (RS-Win), the
//! second inside windows of tokens with adjacent importance rank (IR-Win).
//! Each group owns one half of the Q/K/V channels; the halves are
//! concatenated and mixed by the output projection.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::permwin::{
    importance_sample_map, plan_from_map, restore, shuffle, uniform_sample_map, window_partition,
    window_reverse, MapStats, PermutationPlan, SampleMap,
};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    dim: usize,
    num_heads: usize,
    window_size: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, num_heads: usize, window_size: usize) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible by {num_heads} heads"
            )));
        }
        if num_heads % 2 != 0 {
            return Err(Error::Config(format!(
                "head count must be even to form two groups, got {num_heads}"
            )));
        }
        if window_size == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        Ok(Self {
            dim,
            num_heads,
            window_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    /// Channels per head group.
    pub fn group_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn group_heads(&self) -> usize {
        self.num_heads / 2
    }
}

/// `x · weight + bias` with `weight: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'t, T: Element> {
    pub weight: Var<'t, T>,
    pub bias: Option<Var<'t, T>>,
}

impl<'t, T: Element> Projection<'t, T> {
    pub fn new(weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Self {
        Self { weight, bias }
    }

    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Output columns `start..start + len`.
    pub fn columns(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            weight: self.weight.narrow(1, start, len)?,
            bias: self.bias.map(|b| b.narrow(0, start, len)).transpose()?,
        })
    }
}

/// Q/K/V projections feeding one head group.
#[derive(Debug, Clone, Copy)]
pub struct QkvProjection<'t, T: Element> {
    pub q: Projection<'t, T>,
    pub k: Projection<'t, T>,
    pub v: Projection<'t, T>,
}

impl<'t, T: Element> QkvProjection<'t, T> {
    pub fn columns(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            q: self.q.columns(start, len)?,
            k: self.k.columns(start, len)?,
            v: self.v.columns(start, len)?,
        })
    }
}

/// Square projections of one RSIR-Win layer, bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'t, T: Element> {
    pub qkv: QkvProjection<'t, T>,
    pub out: Projection<'t, T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadGroup {
    Rs,
    Ir,
}

/// Realized grouping of one head group in one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub layer: String,
    pub head_group: HeadGroup,
    pub sample_map: MapStats,
    pub ids_shuffle: Vec<Vec<usize>>,
    pub window_assignment: Vec<Vec<usize>>,
}

/// Per-forward state: the random stream for RS-Win and an optional
/// recorder of realized groupings.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub rng: SeedRng,
    layer: String,
    trace: Option<Vec<GroupRecord>>,
}

impl ForwardCtx {
    pub fn new(rng: SeedRng) -> Self {
        Self {
            rng,
            layer: String::new(),
            trace: None,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(SeedRng::new(seed))
    }

    /// Also record every plan produced during the forward pass.
    pub fn traced(rng: SeedRng) -> Self {
        Self {
            rng,
            layer: String::new(),
            trace: Some(Vec::new()),
        }
    }

    pub fn set_layer(&mut self, name: impl Into<String>) {
        self.layer = name.into();
    }

    pub fn take_trace(&mut self) -> Vec<GroupRecord> {
        self.trace.take().unwrap_or_default()
    }

    fn record(&mut self, group: HeadGroup, map: &SampleMap, plan: &PermutationPlan, window: usize) {
        let Some(trace) = self.trace.as_mut() else { return };
        let assign = plan.window_assignment(window);
        let rows = |v: &[usize]| v.chunks(plan.len()).map(<[usize]>::to_vec).collect();
        trace.push(GroupRecord {
            layer: self.layer.clone(),
            head_group: group,
            sample_map: map.stats(),
            ids_shuffle: rows(plan.ids_shuffle()),
            window_assignment: rows(&assign),
        });
    }
}

/// Scaled dot-product attention inside each window, `heads` heads.
///
/// `x_windows: [N, w, C_in]` is projected by `proj` to `[N, w, C_g]`; tokens
/// only attend to tokens of the same window.
pub fn window_msa<'t, T: Element>(
    x_windows: Var<'t, T>,
    proj: &QkvProjection<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let s = x_windows.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "window_msa",
            msg: format!("expected [N, w, C], got {s:?}"),
        });
    }
    let (n, w) = (s[0], s[1]);
    let cg = proj.q.out_dim();
    if heads == 0 || cg % heads != 0 {
        return Err(Error::Config(format!(
            "group width {cg} is not divisible by {heads} heads"
        )));
    }
    let d = cg / heads;
    let split = |v: Var<'t, T>| v.reshape(&[n, w, heads, d]);
    let q = split(proj.q.apply(x_windows)?)?.permute(&[0, 2, 1, 3])?;
    let k_t = split(proj.k.apply(x_windows)?)?.permute(&[0, 2, 3, 1])?;
    let v = split(proj.v.apply(x_windows)?)?.permute(&[0, 2, 1, 3])?;
    let scores = q.matmul(&k_t)?.scale(1.0 / (d as f64).sqrt());
    let attn = scores.softmax(3)?;
    attn.matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, w, cg])
}

/// Shuffle by `plan`, attend within windows, restore original order.
pub fn permuted_window_attention<'t, T: Element>(
    x: Var<'t, T>,
    proj: &QkvProjection<'t, T>,
    heads: usize,
    window: usize,
    plan: &PermutationPlan,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "permuted_window_attention",
            msg: format!("expected [B, L, C], got {s:?}"),
        });
    }
    let len = s[1];
    let shuffled = shuffle(x, plan)?;
    let windows = window_partition(shuffled, window)?;
    let attended = window_msa(windows, proj, heads)?;
    let merged = window_reverse(attended, window, len, 1)?;
    restore(merged, plan)
}

fn check_window(len: usize, window: usize) -> Result<()> {
    if window == 0 || len % window != 0 {
        return Err(Error::WindowDivisibility { len, window });
    }
    Ok(())
}

/// RS-Win: windows of uniformly random token subsets. One fresh sample map
/// is drawn from `ctx.rng` per call.
pub fn rs_win_attention<'t, T: Element>(
    x: Var<'t, T>,
    proj: &QkvProjection<'t, T>,
    heads: usize,
    window: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let (plan, map) = rs_plan(&x, window, ctx)?;
    ctx.record(HeadGroup::Rs, &map, &plan, window);
    permuted_window_attention(x, proj, heads, window, &plan)
}

/// IR-Win: windows of tokens with contiguous importance rank, where
/// importance is the gradient-free channel mean of `x`.
pub fn ir_win_attention<'t, T: Element>(
    x: Var<'t, T>,
    proj: &QkvProjection<'t, T>,
    heads: usize,
    window: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let (plan, map) = ir_plan(&x.value(), window)?;
    ctx.record(HeadGroup::Ir, &map, &plan, window);
    permuted_window_attention(x, proj, heads, window, &plan)
}

fn rs_plan<T: Element>(x: &Var<'_, T>, window: usize, ctx: &mut ForwardCtx) -> Result<(PermutationPlan, SampleMap)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "rs_win_attention",
            msg: format!("expected [B, L, C], got {s:?}"),
        });
    }
    check_window(s[1], window)?;
    let map = uniform_sample_map(s[0], s[1], &mut ctx.rng)?;
    Ok((plan_from_map(&map), map))
}

fn ir_plan<T: Element>(source: &Tensor<T>, window: usize) -> Result<(PermutationPlan, SampleMap)> {
    let map = importance_sample_map(source)?;
    check_window(map.len(), window)?;
    Ok((plan_from_map(&map), map))
}

/// The plans [`rsir_win_ranked`] would realize, advancing `ctx.rng` the
/// same way.
pub fn rsir_plans<T: Element>(
    x: &Var<'_, T>,
    rank_source: &Tensor<T>,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<(PermutationPlan, PermutationPlan)> {
    let (rs, _) = rs_plan(x, cfg.window_size, ctx)?;
    let (ir, _) = ir_plan(rank_source, cfg.window_size)?;
    Ok((rs, ir))
}

/// RSIR-Win layer: heads `0..K/2` run RS-Win on the first half of the Q/K/V
/// channels, heads `K/2..K` run IR-Win on the second half; the concatenated
/// halves go through the output projection. IR-Win ranks tokens by the
/// channel mean of `x` itself.
pub fn rsir_win<'t, T: Element>(
    x: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let source = x.to_tensor();
    rsir_win_ranked(x, &source, weights, cfg, ctx)
}

/// [`rsir_win`] with IR-Win ranking tokens by the channel mean of
/// `rank_source` (`[B, L, *]`, never differentiated) instead of `x`.
pub fn rsir_win_ranked<'t, T: Element>(
    x: Var<'t, T>,
    rank_source: &Tensor<T>,
    weights: &AttentionWeights<'t, T>,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    check_input(&x, cfg)?;
    let xs = x.shape();
    let rsh = rank_source.shape();
    if rsh.len() != 3 || rsh[..2] != xs[..2] {
        return Err(shape_err("rsir_win_ranked", &xs, rsh));
    }
    let w = cfg.window_size;
    let (rs_plan, rs_map) = rs_plan(&x, w, ctx)?;
    ctx.record(HeadGroup::Rs, &rs_map, &rs_plan, w);
    let (ir_plan, ir_map) = ir_plan(rank_source, w)?;
    ctx.record(HeadGroup::Ir, &ir_map, &ir_plan, w);
    rsir_win_with_plans(x, weights, cfg, &rs_plan, &ir_plan)
}

/// [`rsir_win`] with both permutation plans supplied by the caller.
pub fn rsir_win_with_plans<'t, T: Element>(
    x: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    cfg: &AttentionConfig,
    rs_plan: &PermutationPlan,
    ir_plan: &PermutationPlan,
) -> Result<Var<'t, T>> {
    check_input(&x, cfg)?;
    let (half, gh, w) = (cfg.group_dim(), cfg.group_heads(), cfg.window_size);
    let rs = permuted_window_attention(x, &weights.qkv.columns(0, half)?, gh, w, rs_plan)?;
    let ir = permuted_window_attention(x, &weights.qkv.columns(half, half)?, gh, w, ir_plan)?;
    let joined = x.tape().concat(&[rs, ir], 2)?;
    weights.out.apply(joined)
}

fn check_input<T: Element>(x: &Var<'_, T>, cfg: &AttentionConfig) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.dim {
        return Err(Error::InvalidShape {
            op: "rsir_win",
            msg: format!("expected [B, L, {}], got {s:?}", cfg.dim),
        });
    }
    check_window(s[1], cfg.window_size)
}

/// Attention mechanisms compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Global attention over all `L` tokens.
    Dense,
    /// Every head on RS-Win.
    RsWin,
    /// Every head on IR-Win.
    IrWin,
    /// Half RS-Win, half IR-Win.
    Rsir,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Dense, Mechanism::RsWin, Mechanism::IrWin, Mechanism::Rsir];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Dense => "dense",
            Mechanism::RsWin => "rs_win",
            Mechanism::IrWin => "ir_win",
            Mechanism::Rsir => "rsir",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism `{s}`")))
    }
}

/// One attention layer (projections included) using `mechanism`.
pub fn attention_layer<'t, T: Element>(
    mechanism: Mechanism,
    x: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let k = cfg.num_heads;
    let w = cfg.window_size;
    let mixed = match mechanism {
        Mechanism::Dense => window_msa(x, &weights.qkv, k)?,
        Mechanism::RsWin => rs_win_attention(x, &weights.qkv, k, w, ctx)?,
        Mechanism::IrWin => ir_win_attention(x, &weights.qkv, k, w, ctx)?,
        Mechanism::Rsir => return rsir_win(x, weights, cfg, ctx),
    };
    weights.out.apply(mixed)
}

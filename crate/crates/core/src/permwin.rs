//! Sample maps, permutation plans and window partitioning.
//!
//! A [`SampleMap`] assigns every token a score. Sorting each row ascending
//! gives `ids_shuffle`; its inverse gives `ids_restore`. Gathering tokens by
//! `ids_shuffle` and cutting the result into contiguous windows of `w` tokens
//! groups tokens by score rank: window `k` holds ranks `k*w .. (k+1)*w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleOrigin {
    Uniform,
    Importance,
}

/// Per-token ranking scores, shape `[B, L]`. Never part of a gradient graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMap {
    scores: Tensor<f64>,
    origin: SampleOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl SampleMap {
    pub fn new(scores: Tensor<f64>, origin: SampleOrigin) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "sample_map",
                msg: format!("expected [B, L] scores, got {:?}", scores.shape()),
            });
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite("sample map".into()));
        }
        Ok(Self { scores, origin })
    }

    pub fn scores(&self) -> &Tensor<f64> {
        &self.scores
    }

    pub fn origin(&self) -> SampleOrigin {
        self.origin
    }

    pub fn batch(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.scores.numel() == 0
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let l = self.len();
        &self.scores.data()[b * l..(b + 1) * l]
    }

    pub fn stats(&self) -> MapStats {
        let d = self.scores.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MapStats {
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
        }
    }
}

/// I.i.d. uniform `[0, 1)` scores drawn from `rng`.
pub fn uniform_sample_map(batch: usize, len: usize, rng: &mut SeedRng) -> Result<SampleMap> {
    if batch == 0 || len == 0 {
        return Err(Error::InvalidShape {
            op: "uniform_sample_map",
            msg: format!("batch and length must be positive, got ({batch}, {len})"),
        });
    }
    let data = (0..batch * len).map(|_| rng.uniform()).collect();
    SampleMap::new(Tensor::new(&[batch, len], data)?, SampleOrigin::Uniform)
}

/// Channel mean of each token of a `[B, L, C]` activation.
///
/// Reads values only, so nothing downstream of the ranking can carry
/// gradient back into `x`.
pub fn importance_sample_map<T: Element>(x: &Tensor<T>) -> Result<SampleMap> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] == 0 {
        return Err(Error::InvalidShape {
            op: "importance_sample_map",
            msg: format!("expected [B, L, C] input, got {shape:?}"),
        });
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("importance map input".into()));
    }
    let c = shape[2];
    let scores: Vec<f64> = x
        .data()
        .chunks(c)
        .map(|tok| tok.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / c as f64)
        .collect();
    SampleMap::new(Tensor::new(&shape[..2], scores)?, SampleOrigin::Importance)
}

/// Stable ascending argsort; ties keep their original order.
pub fn argsort_stable(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Adding 0.0 turns -0.0 into 0.0 so signed zeros tie.
    idx.sort_by(|&a, &b| (values[a] + 0.0).total_cmp(&(values[b] + 0.0)));
    idx
}

/// Forward and inverse token permutations, one row per batch element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    batch: usize,
    len: usize,
    ids_shuffle: Vec<usize>,
    ids_restore: Vec<usize>,
}

impl PermutationPlan {
    pub fn identity(batch: usize, len: usize) -> Self {
        let row: Vec<usize> = (0..len).collect();
        let ids = row.repeat(batch);
        Self {
            batch,
            len,
            ids_shuffle: ids.clone(),
            ids_restore: ids,
        }
    }

    /// Build a plan from explicit shuffle rows; fails unless every row is a
    /// permutation of `0..len`.
    pub fn from_shuffle(batch: usize, len: usize, ids_shuffle: Vec<usize>) -> Result<Self> {
        if ids_shuffle.len() != batch * len {
            return Err(Error::InvalidShape {
                op: "permutation_plan",
                msg: format!("{} indices for {batch}x{len}", ids_shuffle.len()),
            });
        }
        let mut ids_restore = vec![usize::MAX; batch * len];
        for b in 0..batch {
            for j in 0..len {
                let src = ids_shuffle[b * len + j];
                if src >= len {
                    return Err(Error::IndexOutOfBounds { index: src, len });
                }
                let slot = &mut ids_restore[b * len + src];
                if *slot != usize::MAX {
                    return Err(Error::InvalidShape {
                        op: "permutation_plan",
                        msg: format!("row {b} repeats index {src}"),
                    });
                }
                *slot = j;
            }
        }
        Ok(Self {
            batch,
            len,
            ids_shuffle,
            ids_restore,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ids_shuffle(&self) -> &[usize] {
        &self.ids_shuffle
    }

    pub fn ids_restore(&self) -> &[usize] {
        &self.ids_restore
    }

    pub fn shuffle_row(&self, b: usize) -> &[usize] {
        &self.ids_shuffle[b * self.len..(b + 1) * self.len]
    }

    pub fn restore_row(&self, b: usize) -> &[usize] {
        &self.ids_restore[b * self.len..(b + 1) * self.len]
    }

    pub fn is_identity(&self) -> bool {
        self.ids_shuffle
            .iter()
            .enumerate()
            .all(|(i, &j)| i % self.len.max(1) == j)
    }

    /// Window index of every original token after shuffling and cutting
    /// into windows of `window` tokens, row-major `[B, L]`.
    pub fn window_assignment(&self, window: usize) -> Vec<usize> {
        self.ids_restore.iter().map(|&pos| pos / window).collect()
    }
}

/// `ids_shuffle` = stable ascending argsort of each row,
/// `ids_restore` = argsort of `ids_shuffle`.
pub fn plan_from_map(map: &SampleMap) -> PermutationPlan {
    let (batch, len) = (map.batch(), map.len());
    let mut ids_shuffle = Vec::with_capacity(batch * len);
    for b in 0..batch {
        ids_shuffle.extend(argsort_stable(map.row(b)));
    }
    PermutationPlan::from_shuffle(batch, len, ids_shuffle).expect("argsort yields a permutation")
}

fn check_plan<T: Element>(x: &Var<'_, T>, plan: &PermutationPlan) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[0] != plan.batch || s[1] != plan.len {
        return Err(Error::InvalidShape {
            op: "permute_tokens",
            msg: format!("input {s:?} does not match plan {}x{}", plan.batch, plan.len),
        });
    }
    Ok(())
}

/// `out[b, j] = x[b, ids_shuffle[b, j]]`.
pub fn shuffle<'t, T: Element>(x: Var<'t, T>, plan: &PermutationPlan) -> Result<Var<'t, T>> {
    check_plan(&x, plan)?;
    x.gather_rows(&plan.ids_shuffle, plan.len)
}

/// `out[b, j] = x[b, ids_restore[b, j]]`; undoes [`shuffle`].
pub fn restore<'t, T: Element>(x: Var<'t, T>, plan: &PermutationPlan) -> Result<Var<'t, T>> {
    check_plan(&x, plan)?;
    x.gather_rows(&plan.ids_restore, plan.len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub window_size: usize,
    pub num_windows: usize,
    pub seq_len: usize,
    pub spatial: (usize, usize),
}

impl WindowLayout {
    pub fn new(spatial: (usize, usize), window_size: usize) -> Result<Self> {
        let seq_len = spatial.0 * spatial.1;
        if window_size == 0 || seq_len % window_size != 0 {
            return Err(Error::WindowDivisibility {
                len: seq_len,
                window: window_size,
            });
        }
        Ok(Self {
            window_size,
            num_windows: seq_len / window_size,
            seq_len,
            spatial,
        })
    }
}

/// `[B, L, C]` → `[B·L/w, w, C]`: contiguous runs of `w` tokens become
/// independent rows, batch-major with ascending window index.
pub fn window_partition<'t, T: Element>(x: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "window_partition",
            msg: format!("expected [B, L, C], got {s:?}"),
        });
    }
    if window == 0 || s[1] % window != 0 {
        return Err(Error::WindowDivisibility {
            len: s[1],
            window,
        });
    }
    x.reshape(&[s[0] * s[1] / window, window, s[2]])
}

/// Inverse of [`window_partition`] for a token grid of `height × width`.
pub fn window_reverse<'t, T: Element>(
    windows: Var<'t, T>,
    window: usize,
    height: usize,
    width: usize,
) -> Result<Var<'t, T>> {
    let s = windows.shape();
    let layout = WindowLayout::new((height, width), window)?;
    if s.len() != 3 || s[1] != window || s[0] % layout.num_windows != 0 {
        return Err(Error::InvalidShape {
            op: "window_reverse",
            msg: format!("windows {s:?} inconsistent with window {window} over a {height}x{width} grid"),
        });
    }
    let batch = s[0] / layout.num_windows;
    windows.reshape(&[batch, layout.seq_len, s[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn map(rows: &[&[f64]]) -> SampleMap {
        let l = rows[0].len();
        let data = rows.concat();
        SampleMap::new(Tensor::new(&[rows.len(), l], data).unwrap(), SampleOrigin::Uniform).unwrap()
    }

    #[test]
    fn plan_hand_example() {
        let p = plan_from_map(&map(&[&[0.3, 0.1, 0.2]]));
        assert_eq!(p.ids_shuffle(), &[1, 2, 0]);
        assert_eq!(p.ids_restore(), &[2, 0, 1]);
        // ids_restore is literally the argsort of ids_shuffle.
        let as_f: Vec<f64> = p.ids_shuffle().iter().map(|&i| i as f64).collect();
        assert_eq!(argsort_stable(&as_f), p.ids_restore());
    }

    #[test]
    fn sorted_and_tied_maps_give_identity() {
        assert!(plan_from_map(&map(&[&[0.1, 0.2, 0.3, 0.9]])).is_identity());
        let tied = plan_from_map(&map(&[&[0.5; 5]]));
        assert!(tied.is_identity());
        assert_eq!(tied.ids_restore(), &[0, 1, 2, 3, 4]);
        assert_eq!(argsort_stable(&[0.0, -0.0, 0.0, -1.0]), vec![3, 0, 1, 2]);
    }

    #[test]
    fn uniform_map_is_seeded() {
        let a = uniform_sample_map(2, 4, &mut SeedRng::new(7)).unwrap();
        let b = uniform_sample_map(2, 4, &mut SeedRng::new(7)).unwrap();
        let bits = |m: &SampleMap| m.scores().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let single = uniform_sample_map(1, 1, &mut SeedRng::new(1)).unwrap();
        assert!(plan_from_map(&single).is_identity());
        assert!(uniform_sample_map(0, 4, &mut SeedRng::new(1)).is_err());
    }

    #[test]
    fn uniform_map_statistics() {
        let m = uniform_sample_map(1, 100_000, &mut SeedRng::new(123)).unwrap();
        let s = m.stats();
        assert!((0.49..=0.51).contains(&s.mean), "mean {}", s.mean);
        assert!(s.min >= 0.0 && s.max < 1.0);
    }

    #[test]
    fn importance_map_is_channel_mean() {
        let x = Tensor::<f64>::from_f64(&[1, 3, 2], &[1.0, 3.0, 2.0, 2.0, 0.0, 10.0]).unwrap();
        let m = importance_sample_map(&x).unwrap();
        assert_eq!(m.scores().data(), &[2.0, 2.0, 5.0]);
        assert_eq!(m.origin(), SampleOrigin::Importance);

        let c = Tensor::<f32>::full(&[2, 4, 3], 3.0);
        let m = importance_sample_map(&c).unwrap();
        assert!(m.scores().data().iter().all(|&s| s == 3.0));
        assert!(plan_from_map(&m).is_identity());

        let mut bad = Tensor::<f64>::zeros(&[1, 2, 2]);
        bad.data_mut()[1] = f64::NAN;
        assert!(matches!(importance_sample_map(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shuffle_restore_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 3, 1], &[10.0, 11.0, 12.0]).unwrap());
        let plan = PermutationPlan::from_shuffle(1, 3, vec![1, 2, 0]).unwrap();
        let s = shuffle(x, &plan).unwrap();
        assert_eq!(s.to_tensor().data(), &[11.0, 12.0, 10.0]);
        let r = restore(s, &plan).unwrap();
        assert_eq!(r.to_tensor(), x.to_tensor());
        let r2 = shuffle(restore(x, &plan).unwrap(), &plan).unwrap();
        assert_eq!(r2.to_tensor(), x.to_tensor());
        assert!(shuffle(x, &PermutationPlan::identity(1, 4)).is_err());
    }

    #[test]
    fn from_shuffle_rejects_non_permutations() {
        assert!(PermutationPlan::from_shuffle(1, 3, vec![0, 0, 1]).is_err());
        assert!(PermutationPlan::from_shuffle(1, 3, vec![0, 1, 3]).is_err());
        assert!(PermutationPlan::from_shuffle(1, 3, vec![0, 1]).is_err());
    }

    #[test]
    fn partition_and_reverse() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 4, 1], &[0.0, 1.0, 2.0, 3.0]).unwrap());
        let w = window_partition(x, 2).unwrap();
        assert_eq!(w.shape(), vec![2, 2, 1]);
        assert_eq!(w.to_tensor().data(), &[0.0, 1.0, 2.0, 3.0]);
        let back = window_reverse(w, 2, 2, 2).unwrap();
        assert_eq!(back.to_tensor(), x.to_tensor());
        let whole = window_partition(x, 4).unwrap();
        assert_eq!(whole.shape(), vec![1, 4, 1]);
        let err = window_partition(x, 3).unwrap_err();
        assert!(matches!(err, Error::WindowDivisibility { len: 4, window: 3 }));
        assert!(window_reverse(w, 2, 3, 1).is_err());
    }

    #[test]
    fn window_assignment_groups_by_rank() {
        let p = plan_from_map(&map(&[&[5.0, 1.0, 6.0, 2.0]]));
        assert_eq!(p.window_assignment(2), vec![1, 0, 1, 0]);
    }
}

//! Closed-lung slice filtering and fixed-length slice-set resampling.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slices per set fed to the 3D network.
pub const SET_LEN: usize = 32;
/// Default lower bound on the number of slices kept per volume.
pub const MIN_KEEP: usize = 8;
/// Starting relative threshold, in tenths.
const START_TENTHS: u32 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Ascending slice indices that survived filtering.
    pub kept_indices: Vec<usize>,
    /// Relative threshold in effect when filtering stopped, in `[0, 0.7]`.
    pub final_threshold: f64,
}

impl SelectionResult {
    /// Keep every one of `n` slices.
    pub fn all(n: usize) -> Self {
        SelectionResult {
            kept_indices: (0..n).collect(),
            final_threshold: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOrigin {
    TrainRandom,
    EvalUniform,
    TestUniform(usize),
    TestCenter,
}

/// One ordered selection of slice indices (into the volume, repetitions allowed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSet {
    pub indices: Vec<usize>,
    pub origin: SetOrigin,
}

/// Adaptive closed-lung filter: keep slices whose lung ratio is at least `t` times
/// the volume maximum, starting at `t = 0.7` and lowering `t` by 0.1 while fewer
/// than `min_keep` slices survive. At `t = 0` every slice is kept.
pub fn select_slices(ratios: &[f64], min_keep: usize) -> Result<SelectionResult> {
    if ratios.is_empty() {
        return Err(Error::Empty("lung ratio list".into()));
    }
    if let Some(bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidData(format!("lung ratio {bad} outside [0, 1]")));
    }
    let max = ratios.iter().cloned().fold(0.0f64, f64::max);
    let mut tenths = START_TENTHS;
    loop {
        let t = tenths as f64 / 10.0;
        let kept: Vec<usize> = ratios
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= t * max)
            .map(|(i, _)| i)
            .collect();
        if kept.len() >= min_keep || tenths == 0 {
            return Ok(SelectionResult {
                kept_indices: kept,
                final_threshold: t,
            });
        }
        tenths -= 1;
    }
}

/// Random training set: `k` positions drawn without replacement when enough
/// slices are kept, with replacement otherwise, then sorted.
pub fn resample_train<R: Rng + ?Sized>(kept: &SelectionResult, k: usize, rng: &mut R) -> SliceSet {
    let n = kept.len();
    assert!(n > 0, "resampling needs at least one kept slice");
    let mut pos: Vec<usize> = if n >= k {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    };
    pos.sort_unstable();
    SliceSet {
        indices: pos.into_iter().map(|p| kept.kept_indices[p]).collect(),
        origin: SetOrigin::TrainRandom,
    }
}

/// Center-of-bin positions for `k` bins over `n` items.
///
/// Bin `i` takes `floor((2i+1)·n / 2k)`; the second half of the bins mirrors the
/// first so the selection is invariant under reversing the input order. The two
/// rules only disagree when a bin center falls exactly between two items, and the
/// mirror then rounds toward the middle of the range.
pub fn uniform_positions(n: usize, k: usize) -> Vec<usize> {
    assert!(n > 0 && k > 0);
    let floor_pos = |i: usize| ((2 * i + 1) * n) / (2 * k);
    let mut pos = vec![0; k];
    let half = k / 2;
    for i in 0..half {
        pos[i] = floor_pos(i);
        pos[k - 1 - i] = n - 1 - floor_pos(i);
    }
    if k % 2 == 1 {
        pos[half] = floor_pos(half);
    }
    pos
}

fn pick(kept: &[usize], positions: &[usize]) -> Vec<usize> {
    positions.iter().map(|&p| kept[p]).collect()
}

/// Deterministic symmetric-uniform set for validation.
pub fn resample_eval(kept: &SelectionResult, k: usize) -> SliceSet {
    assert!(!kept.is_empty(), "resampling needs at least one kept slice");
    SliceSet {
        indices: pick(&kept.kept_indices, &uniform_positions(kept.len(), k)),
        origin: SetOrigin::EvalUniform,
    }
}

/// Test-time sets: `max(1, n / k)` uniform sets, one per contiguous stratum of the
/// kept slices, plus the middle `k` kept slices when `n > k`. Duplicate sets are
/// dropped.
pub fn resample_test(kept: &SelectionResult, k: usize) -> Vec<SliceSet> {
    let n = kept.len();
    assert!(n > 0, "resampling needs at least one kept slice");
    let m = (n / k).max(1);
    let mut sets: Vec<SliceSet> = Vec::with_capacity(m + 1);
    for j in 0..m {
        let start = j * n / m;
        let end = (j + 1) * n / m;
        let positions: Vec<usize> = uniform_positions(end - start, k)
            .into_iter()
            .map(|p| p + start)
            .collect();
        sets.push(SliceSet {
            indices: pick(&kept.kept_indices, &positions),
            origin: SetOrigin::TestUniform(j),
        });
    }
    if n > k {
        let start = (n - k) / 2;
        let positions: Vec<usize> = (start..start + k).collect();
        let center = pick(&kept.kept_indices, &positions);
        if !sets.iter().any(|s| s.indices == center) {
            sets.push(SliceSet {
                indices: center,
                origin: SetOrigin::TestCenter,
            });
        }
    }
    sets
}

/// One row of the per-volume selection audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub volume_id: String,
    pub n_slices: usize,
    pub n_kept: usize,
    pub final_threshold: f64,
    pub n_test_sets: usize,
    /// Space-separated kept slice indices.
    pub kept: String,
    /// `x0 y0 x1 y1` of the volume bounding box, empty if none.
    pub bbox: String,
    /// Space-separated lung ratios, one per slice.
    pub ratios: String,
}

impl SelectionRow {
    pub fn selection(&self) -> Result<SelectionResult> {
        let kept = self
            .kept
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::InvalidData(format!("kept index `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SelectionResult {
            kept_indices: kept,
            final_threshold: self.final_threshold,
        })
    }

    pub fn bbox(&self) -> Result<Option<crate::raster::BBox>> {
        let v = self
            .bbox
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|e| Error::InvalidData(format!("bbox value `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match v.as_slice() {
            [] => Ok(None),
            [x0, y0, x1, y1] => Ok(Some(crate::raster::BBox::new(*x0, *y0, *x1, *y1))),
            _ => Err(Error::InvalidData(format!("bad bbox `{}`", self.bbox))),
        }
    }
}

pub fn write_selection_report(path: &Path, rows: &[SelectionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_selection_report(path: &Path) -> Result<Vec<SelectionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keeps_first_eight_at_start_threshold() {
        let r = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.72, 0.71, 0.3, 0.1];
        let s = select_slices(&r, 8).unwrap();
        assert_eq!(s.kept_indices, (0..8).collect::<Vec<_>>());
        assert_eq!(s.final_threshold, 0.7);
    }

    #[test]
    fn short_volume_decays_to_zero() {
        let s = select_slices(&[0.9, 1.0, 0.95, 0.6, 0.2], 8).unwrap();
        assert_eq!(s.kept_indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.final_threshold, 0.0);
    }

    #[test]
    fn identical_ratios_all_kept() {
        let s = select_slices(&[0.5; 12], 8).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s.final_threshold, 0.7);
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        assert!(matches!(select_slices(&[], 8), Err(Error::Empty(_))));
        assert!(select_slices(&[0.2, 1.5], 8).is_err());
    }

    #[test]
    fn eval_examples() {
        assert_eq!(
            resample_eval(&SelectionResult::all(32), 32).indices,
            (0..32).collect::<Vec<_>>()
        );
        let n16 = resample_eval(&SelectionResult::all(16), 32).indices;
        assert_eq!(n16, (0..16).flat_map(|i| [i, i]).collect::<Vec<_>>());
        // bin centers fall between items here; each half rounds toward the middle
        let n64 = resample_eval(&SelectionResult::all(64), 32).indices;
        let expected: Vec<usize> = (0..16).map(|i| 2 * i + 1).chain((16..32).map(|i| 2 * i)).collect();
        assert_eq!(n64, expected);
    }

    #[test]
    fn test_sets() {
        let one = resample_test(&SelectionResult::all(32), 32);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].indices, (0..32).collect::<Vec<_>>());

        let three = resample_test(&SelectionResult::all(80), 32);
        assert_eq!(three.len(), 3);
        assert_eq!(three[2].origin, SetOrigin::TestCenter);
        assert_eq!(three[2].indices, (24..56).collect::<Vec<_>>());
        assert!(three[0].indices.iter().all(|&i| i < 40));
        assert!(three[1].indices.iter().all(|&i| (40..80).contains(&i)));

        let up = resample_test(&SelectionResult::all(8), 32);
        assert_eq!(up.len(), 1);
        assert_eq!(up[0].indices, (0..8).flat_map(|i| [i; 4]).collect::<Vec<_>>());
    }

    #[test]
    fn train_full_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = resample_train(&SelectionResult::all(32), 32, &mut rng);
        assert_eq!(s.indices, (0..32).collect::<Vec<_>>());

        let kept = SelectionResult::all(100);
        let a = resample_train(&kept, 32, &mut ChaCha8Rng::seed_from_u64(9));
        let b = resample_train(&kept, 32, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn train_upsampling_covers_all_slices() {
        let kept = SelectionResult::all(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 8];
        for _ in 0..1000 {
            for i in resample_train(&kept, 32, &mut rng).indices {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sets_map_through_kept_indices() {
        let kept = SelectionResult {
            kept_indices: vec![3, 4, 9],
            final_threshold: 0.5,
        };
        let s = resample_eval(&kept, 6);
        assert_eq!(s.indices, vec![3, 3, 4, 4, 9, 9]);
    }
}

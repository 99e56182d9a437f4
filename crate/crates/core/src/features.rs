//! Sparse binary features for the linear learner.
//!
//! [`TileCoder`] tiles the joint input space (state scalars followed by the
//! encoded timescale inputs) with several layers of uniformly shifted grids.
//! Each tiling contributes exactly one active index per encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps a joint input vector to a set of active binary features.
pub trait Featurizer {
    /// Total feature dimension.
    fn dim(&self) -> usize;

    /// Number of active indices produced by every encoding.
    fn active_count(&self) -> usize;

    /// Number of input scalars expected.
    fn input_dim(&self) -> usize;

    /// Writes the sorted active indices for `inputs` into `out`.
    fn active_into(&self, inputs: &[f64], out: &mut Vec<usize>) -> Result<()>;

    fn encode(&self, inputs: &[f64]) -> Result<SparseFeatures> {
        let mut indices = Vec::with_capacity(self.active_count());
        self.active_into(inputs, &mut indices)?;
        Ok(SparseFeatures {
            indices,
            dim: self.dim(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileLayerSpec {
    pub n_tilings: usize,
    pub tile_width: f64,
}

impl TileLayerSpec {
    pub fn new(n_tilings: usize, tile_width: f64) -> Self {
        TileLayerSpec {
            n_tilings,
            tile_width,
        }
    }
}

/// Active indices of a binary feature vector.
///
/// Indices are sorted. Under hashing two tilings may land on the same index;
/// the repeated entry then counts twice in dot products, so the number of
/// entries always equals the number of tilings (plus bias).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseFeatures {
    pub indices: Vec<usize>,
    pub dim: usize,
}

impl SparseFeatures {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        dot(&self.indices, weights)
    }

    /// Number of shared entries, counting multiplicity.
    pub fn overlap(&self, other: &SparseFeatures) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

#[inline]
pub(crate) fn dot(indices: &[usize], weights: &[f64]) -> f64 {
    indices.iter().map(|&i| weights[i]).sum()
}

#[derive(Clone, Debug)]
struct Tiling {
    layer: usize,
    width: f64,
    offsets: Vec<f64>,
    tiles_per_dim: usize,
    base: usize,
}

/// Hashing tile coder over inputs normalized to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TileCoder {
    layers: Vec<TileLayerSpec>,
    input_dim: usize,
    tilings: Vec<Tiling>,
    index_space: usize,
    hashed: bool,
    include_bias: bool,
}

impl TileCoder {
    /// Builds a coder with per-tiling offsets drawn uniformly from
    /// `[0, tile_width)` in every dimension.
    ///
    /// With `index_space = None` the coder uses the exact, collision-free
    /// grid. A given `index_space` smaller than that grid switches to hashing.
    pub fn build<R: Rng + ?Sized>(
        layers: &[TileLayerSpec],
        input_dim: usize,
        index_space: Option<usize>,
        include_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("tile coder needs at least one layer".into()));
        }
        if input_dim == 0 {
            return Err(Error::Config("tile coder needs input_dim >= 1".into()));
        }
        for l in layers {
            if l.n_tilings == 0 || !(l.tile_width > 0.0) || !l.tile_width.is_finite() {
                return Err(Error::Config(format!(
                    "invalid tiling layer ({}, {})",
                    l.n_tilings, l.tile_width
                )));
            }
        }

        let mut tilings = Vec::new();
        let mut exact: Option<usize> = Some(0);
        for (li, l) in layers.iter().enumerate() {
            let tiles_per_dim = (1.0 / l.tile_width).floor() as usize + 2;
            let per_tiling = (0..input_dim)
                .try_fold(1usize, |acc, _| acc.checked_mul(tiles_per_dim));
            for _ in 0..l.n_tilings {
                let offsets = (0..input_dim)
                    .map(|_| rng.gen_range(0.0..l.tile_width))
                    .collect();
                tilings.push(Tiling {
                    layer: li,
                    width: l.tile_width,
                    offsets,
                    tiles_per_dim,
                    base: exact.unwrap_or(0),
                });
                exact = match (exact, per_tiling) {
                    (Some(e), Some(p)) => e.checked_add(p),
                    _ => None,
                };
            }
        }

        let n_active = tilings.len();
        let (index_space, hashed) = match (index_space, exact) {
            (Some(n), _) if n < n_active => {
                return Err(Error::Config(format!(
                    "index_space {n} smaller than the {n_active} active tiles"
                )))
            }
            (Some(n), Some(e)) => (n, n < e),
            (Some(n), None) => (n, true),
            (None, Some(e)) => (e, false),
            (None, None) => {
                return Err(Error::Config(
                    "exact tile grid overflows; set index_space to hash".into(),
                ))
            }
        };

        Ok(TileCoder {
            layers: layers.to_vec(),
            input_dim,
            tilings,
            index_space,
            hashed,
            include_bias,
        })
    }

    pub fn layers(&self) -> &[TileLayerSpec] {
        &self.layers
    }

    pub fn is_hashed(&self) -> bool {
        self.hashed
    }

    pub fn index_space(&self) -> usize {
        self.index_space
    }

    pub fn include_bias(&self) -> bool {
        self.include_bias
    }

    /// Offsets of tiling `i`, one per input dimension.
    pub fn offsets(&self, i: usize) -> &[f64] {
        &self.tilings[i].offsets
    }

    pub fn n_tilings(&self) -> usize {
        self.tilings.len()
    }
}

impl Featurizer for TileCoder {
    fn dim(&self) -> usize {
        self.index_space + usize::from(self.include_bias)
    }

    fn active_count(&self) -> usize {
        self.tilings.len() + usize::from(self.include_bias)
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn active_into(&self, inputs: &[f64], out: &mut Vec<usize>) -> Result<()> {
        if inputs.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: inputs.len(),
            });
        }
        if let Some(x) = inputs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Range(format!("tile coder input {x} outside [0, 1]")));
        }
        out.clear();
        for (t, tiling) in self.tilings.iter().enumerate() {
            let coord = |d: usize| {
                let c = ((inputs[d] + tiling.offsets[d]) / tiling.width).floor() as usize;
                c.min(tiling.tiles_per_dim - 1)
            };
            let idx = if self.hashed {
                let mut h = mix(tiling.layer as u64 ^ 0x9e37_79b9_7f4a_7c15);
                h = mix(h ^ t as u64);
                for d in 0..self.input_dim {
                    h = mix(h ^ coord(d) as u64);
                }
                (h % self.index_space as u64) as usize
            } else {
                let mut flat = 0usize;
                for d in 0..self.input_dim {
                    flat = flat * tiling.tiles_per_dim + coord(d);
                }
                tiling.base + flat
            };
            out.push(idx);
        }
        if self.include_bias {
            out.push(self.index_space);
        }
        out.sort_unstable();
        Ok(())
    }
}

/// splitmix64 finalizer, used as the fixed tile hash.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One-hot features over a discrete state and a discrete set of timescale
/// encodings.
///
/// The state part of the input must be a one-hot vector of length
/// `n_states`; the remaining scalars must equal one of `keys` exactly.
#[derive(Clone, Debug)]
pub struct TabularCoder {
    n_states: usize,
    keys: Vec<Vec<f64>>,
}

impl TabularCoder {
    pub fn new(n_states: usize, keys: Vec<Vec<f64>>) -> Result<Self> {
        if n_states == 0 || keys.is_empty() {
            return Err(Error::Config("tabular coder needs states and keys".into()));
        }
        let width = keys[0].len();
        if keys.iter().any(|k| k.len() != width) {
            return Err(Error::Config("tabular keys differ in width".into()));
        }
        Ok(TabularCoder { n_states, keys })
    }
}

impl Featurizer for TabularCoder {
    fn dim(&self) -> usize {
        self.n_states * self.keys.len()
    }

    fn active_count(&self) -> usize {
        1
    }

    fn input_dim(&self) -> usize {
        self.n_states + self.keys[0].len()
    }

    fn active_into(&self, inputs: &[f64], out: &mut Vec<usize>) -> Result<()> {
        if inputs.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: inputs.len(),
            });
        }
        let (state, key) = inputs.split_at(self.n_states);
        let s = state
            .iter()
            .position(|&x| x == 1.0)
            .ok_or_else(|| Error::Range("tabular state is not one-hot".into()))?;
        let k = self
            .keys
            .iter()
            .position(|k| k.as_slice() == key)
            .ok_or_else(|| Error::Range(format!("timescale input {key:?} not tabulated")))?;
        out.clear();
        out.push(s * self.keys.len() + k);
        Ok(())
    }
}

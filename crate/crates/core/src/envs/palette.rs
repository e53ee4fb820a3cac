//! Appearance palettes: per-episode mappings from structural cell types to
//! codes over the extra appearance channels of the sensory grid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Palette used by the scenarios without appearance randomization. It is
/// never part of a randomized pool.
pub const DEFAULT_PALETTE: u32 = 0;

/// Structural types that carry an appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Floor = 0,
    Wall = 1,
    Kit = 2,
    Poison = 3,
    Monster = 4,
    Ammo = 5,
}

const SURFACES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    id: u32,
    channels: usize,
    codes: Vec<f32>,
}

impl Palette {
    /// Deterministic palette for `id` over `channels` appearance channels.
    /// Each surface gets a binary code with every bit set with probability
    /// one half.
    pub fn new(id: u32, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7A1E_77E0_0000_0000 ^ u64::from(id));
        let codes = (0..SURFACES * channels)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        Palette { id, channels, codes }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn code(&self, surface: Surface) -> &[f32] {
        let s = surface as usize;
        &self.codes[s * self.channels..(s + 1) * self.channels]
    }
}

/// Splits the randomized palette pool `1..=n_palettes` into disjoint train
/// and test sets, with `round(n · train_fraction)` training palettes.
pub fn make_appearance_split<R: Rng + ?Sized>(
    n_palettes: usize,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<u32>)> {
    if n_palettes < 2 {
        return Err(Error::invalid_argument("need at least two palettes to split"));
    }
    let n_train = (n_palettes as f64 * train_fraction).round();
    if !(n_train >= 1.0 && n_train < n_palettes as f64) {
        return Err(Error::invalid_argument(format!(
            "train fraction {train_fraction} leaves one side of the split empty"
        )));
    }
    let mut ids: Vec<u32> = (1..=n_palettes as u32).collect();
    ids.shuffle(rng);
    let test = ids.split_off(n_train as usize);
    let (mut train, mut test) = (ids, test);
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

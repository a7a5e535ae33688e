//! Synthetic grid question answering: "what colour is the cell at (row, col)?"

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{GRID, PATCHES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridVqaSample {
    /// Colour index per cell, raster order.
    pub image: Vec<u8>,
    pub row: u8,
    pub col: u8,
    pub answer: u8,
}

/// Token layout: colours first, then one token per grid row, then one per
/// grid column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub colors: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.colors + 2 * GRID
    }

    pub fn color(&self, c: u8) -> usize {
        c as usize
    }

    pub fn row(&self, r: u8) -> usize {
        self.colors + r as usize
    }

    pub fn col(&self, c: u8) -> usize {
        self.colors + GRID + c as usize
    }
}

impl GridVqaSample {
    pub fn question(&self, vocab: &Vocab) -> [usize; 2] {
        [vocab.row(self.row), vocab.col(self.col)]
    }

    /// Stream index whose logits predict the answer: the last question token,
    /// counting the leading [cls] slot.
    pub fn answer_position(&self) -> usize {
        2
    }

    pub fn query_cell(&self) -> usize {
        self.row as usize * GRID + self.col as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub colors: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            colors: 8,
            n_train: 4096,
            n_test: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<GridVqaSample>,
    pub test: Vec<GridVqaSample>,
}

/// Uniform random grids and query cells. Train and test come from separate
/// streams of the same seed.
pub fn gen_dataset(seed: u64, n_train: usize, n_test: usize, colors: usize) -> Result<Dataset> {
    if !(2..=u8::MAX as usize).contains(&colors) {
        return Err(Error::Config(format!("need 2..=255 colours, got {colors}")));
    }
    let draw = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n)
            .map(|_| {
                let image: Vec<u8> = (0..PATCHES).map(|_| rng.random_range(0..colors as u8)).collect();
                let row = rng.random_range(0..GRID as u8);
                let col = rng.random_range(0..GRID as u8);
                let answer = image[row as usize * GRID + col as usize];
                GridVqaSample { image, row, col, answer }
            })
            .collect::<Vec<_>>()
    };
    Ok(Dataset {
        vocab: Vocab { colors },
        train: draw(1, n_train),
        test: draw(2, n_test),
    })
}

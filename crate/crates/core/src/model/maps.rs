use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which cross-attention layer(s) a [`CAMapStack`] is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaLayer {
    Down,
    Mid,
    Up,
    /// Mean of the lowest-resolution down and up layers.
    DownUp,
}

impl FromStr for CaLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(Self::Down),
            "mid" => Ok(Self::Mid),
            "up" => Ok(Self::Up),
            "down+up" | "down_up" => Ok(Self::DownUp),
            other => Err(Error::Input(format!("unknown attention layer {other:?}"))),
        }
    }
}

impl fmt::Display for CaLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Down => "down",
            Self::Mid => "mid",
            Self::Up => "up",
            Self::DownUp => "down+up",
        })
    }
}

/// Cross-attention probabilities `[F, N, L]`: for every frame and grid
/// pixel, a distribution over the text-encoder token positions.
///
/// Word `i` of the prompt lives in column `i + token_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAMapStack {
    pub maps: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub layer: CaLayer,
    pub token_offset: usize,
}

impl CAMapStack {
    pub fn new(maps: Tensor, grid_h: usize, grid_w: usize, layer: CaLayer, token_offset: usize) -> Result<Self> {
        if maps.rank() != 3 || maps.shape()[1] != grid_h * grid_w {
            return Err(Error::dim("ca_map_stack", maps.shape(), &[grid_h, grid_w]));
        }
        Ok(Self {
            maps,
            grid_h,
            grid_w,
            layer,
            token_offset,
        })
    }

    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn columns(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn column(&self, word: usize) -> Result<usize> {
        let col = word + self.token_offset;
        if col >= self.columns() {
            return Err(Error::Input(format!(
                "token {word} is outside the {} attention columns",
                self.columns()
            )));
        }
        Ok(col)
    }

    /// Spatial map `A[frame, :, column(word)]`.
    pub fn token_map(&self, word: usize, frame: usize) -> Result<Vec<f64>> {
        let col = self.column(word)?;
        if frame >= self.frames() {
            return Err(Error::Input(format!("frame {frame} out of range")));
        }
        let (n, l) = (self.pixels(), self.columns());
        let base = frame * n * l;
        Ok((0..n).map(|p| self.maps.data()[base + p * l + col]).collect())
    }

    /// Records the maps on `tape` as a constant.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> CaVar<'t> {
        CaVar {
            maps: tape.constant(self.maps.clone()),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            token_offset: self.token_offset,
        }
    }
}

/// [`CAMapStack`] as recorded on a tape, so losses can differentiate
/// through it.
#[derive(Debug, Clone, Copy)]
pub struct CaVar<'t> {
    pub maps: Var<'t>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub token_offset: usize,
}

impl<'t> CaVar<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.maps.shape()
    }

    pub fn frames(&self) -> usize {
        self.shape()[0]
    }

    /// `[F, N]` attention of prompt word `word` across all frames.
    pub fn token(&self, word: usize) -> Result<Var<'t>> {
        let cols = self.shape()[2];
        let col = word + self.token_offset;
        if col >= cols {
            return Err(Error::Input(format!("token {word} is outside the {cols} attention columns")));
        }
        self.maps.select_last(col)
    }

    pub fn to_stack(&self, layer: CaLayer) -> Result<CAMapStack> {
        CAMapStack::new(self.maps.value(), self.grid_h, self.grid_w, layer, self.token_offset)
    }
}

/// Temporal self-attention `[N, F, F]`: per grid pixel, frame-to-frame
/// affinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TAMap {
    pub maps: Tensor,
}

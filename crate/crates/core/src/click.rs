//! User clicks and their rendering into disk maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    /// Position of the click within its session, starting at 0.
    pub ordinal: usize,
}

impl Click {
    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::ClickOutOfBounds {
                row: self.row as i64,
                col: self.col as i64,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Ordered clicks of one interaction session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClickSet(Vec<Click>);

impl ClickSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a click, assigning the next ordinal.
    pub fn push(&mut self, row: usize, col: usize, polarity: Polarity) -> Click {
        let click = Click {
            row,
            col,
            polarity,
            ordinal: self.0.len(),
        };
        self.0.push(click);
        click
    }

    pub fn pop(&mut self) -> Option<Click> {
        self.0.pop()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Click> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Click] {
        &self.0
    }

    pub fn positives(&self) -> impl Iterator<Item = &Click> {
        self.0.iter().filter(|c| c.is_positive())
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        self.0.iter().try_for_each(|c| c.check_bounds(height, width))
    }
}

impl<'a> IntoIterator for &'a ClickSet {
    type Item = &'a Click;
    type IntoIter = std::slice::Iter<'a, Click>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Two-channel disk rendering: channel 0 positives, channel 1 negatives.
/// Each click sets every pixel within Euclidean `radius` of it.
pub fn render_click_maps<S: Scalar>(clicks: &ClickSet, height: usize, width: usize, radius: usize) -> Result<Tensor<S>> {
    clicks.check_bounds(height, width)?;
    let mut data = vec![S::zero(); 2 * height * width];
    let r = radius as i64;
    for click in clicks {
        let plane = match click.polarity {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        };
        let (cr, cc) = (click.row as i64, click.col as i64);
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc > r * r {
                    continue;
                }
                let (y, x) = (cr + dr, cc + dc);
                if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
                    continue;
                }
                data[plane * height * width + y as usize * width + x as usize] = S::one();
            }
        }
    }
    Tensor::new([2, height, width], data)
}

//! Move blocking on the input rate of change.
//!
//! A [`BlockingSchedule`] splits the prediction horizon into `Nc` consecutive
//! blocks. The controller optimizes one rate-of-change vector per block; an
//! [`ExpansionMatrix`] maps those `Nc` reduced moves back onto the `Np`
//! horizon steps. Two expansions are provided:
//!
//! * **binary**: each step copies the move of the block it belongs to;
//! * **interpolated**: the reduced moves sit on the block start positions and
//!   the steps in between are linear interpolations of the neighbouring anchors,
//!   `λ·Δu(s_i) + (1 − λ)·Δu(s_{i+1})` with `λ = 1 − (b − s_i)/(s_{i+1} − s_i)`.
//!   Steps after the last anchor hold its value.
//!
//! Positions `s_i` are 1-based throughout this module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockingSchedule {
    horizon: usize,
    lengths: Vec<usize>,
    starts: Vec<usize>,
}

impl BlockingSchedule {
    /// Builds a schedule from block lengths; the starts are their cumulative sums.
    pub fn from_lengths(lengths: &[usize], horizon: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Schedule("at least one block is required".into()));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Schedule(format!("block {} has non-positive length", i + 1)));
        }
        let total: usize = lengths.iter().sum();
        if total != horizon {
            return Err(Error::Schedule(format!("lengths sum {total} ≠ Np {horizon}")));
        }
        let starts = lengths
            .iter()
            .scan(1, |next, &l| {
                let s = *next;
                *next += l;
                Some(s)
            })
            .collect();
        Ok(Self {
            horizon,
            lengths: lengths.to_vec(),
            starts,
        })
    }

    /// One block per step: no blocking.
    pub fn unblocked(horizon: usize) -> Result<Self> {
        Self::from_lengths(&vec![1; horizon], horizon)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of blocks (the control horizon).
    pub fn blocks(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// 1-based block start positions.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn is_unblocked(&self) -> bool {
        self.lengths.iter().all(|&l| l == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionKind {
    Binary,
    Interpolated,
}

/// `Np × Nc` weights mapping reduced moves to per-step moves.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionMatrix {
    kind: ExpansionKind,
    weights: DMatrix<f64>,
}

impl ExpansionMatrix {
    /// Column `i` is `[0_{s_i−1}; 1_{l_i}; 0_{Np−s_i−l_i+1}]`.
    pub fn binary(schedule: &BlockingSchedule) -> Self {
        let mut w = DMatrix::zeros(schedule.horizon, schedule.blocks());
        for (i, (&s, &l)) in schedule.starts.iter().zip(&schedule.lengths).enumerate() {
            w.view_mut((s - 1, i), (l, 1)).fill(1.0);
        }
        Self {
            kind: ExpansionKind::Binary,
            weights: w,
        }
    }

    pub fn interpolated(schedule: &BlockingSchedule) -> Self {
        let nc = schedule.blocks();
        let starts = &schedule.starts;
        let mut w = DMatrix::zeros(schedule.horizon, nc);
        for b in 1..=schedule.horizon {
            // block containing position b
            let i = starts.partition_point(|&s| s <= b) - 1;
            if i + 1 == nc {
                w[(b - 1, i)] = 1.0;
                continue;
            }
            let lambda = interpolation_weight(b, starts[i], starts[i + 1]);
            w[(b - 1, i)] = lambda;
            if lambda < 1.0 {
                w[(b - 1, i + 1)] = 1.0 - lambda;
            }
        }
        Self {
            kind: ExpansionKind::Interpolated,
            weights: w,
        }
    }

    pub fn build(schedule: &BlockingSchedule, kind: ExpansionKind) -> Self {
        match kind {
            ExpansionKind::Binary => Self::binary(schedule),
            ExpansionKind::Interpolated => Self::interpolated(schedule),
        }
    }

    pub fn kind(&self) -> ExpansionKind {
        self.kind
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn horizon(&self) -> usize {
        self.weights.nrows()
    }

    pub fn blocks(&self) -> usize {
        self.weights.ncols()
    }

    /// Expands `Nc` reduced vectors into `Np` vectors, channel by channel.
    pub fn expand(&self, reduced: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if reduced.len() != self.blocks() {
            return Err(Error::dim("reduced move sequence", self.blocks(), reduced.len()));
        }
        let Some(width) = reduced.first().map(|r| r.len()) else {
            return Ok(vec![DVector::zeros(0); self.horizon()]);
        };
        if let Some(bad) = reduced.iter().find(|r| r.len() != width) {
            return Err(Error::dim("reduced move width", width, bad.len()));
        }
        let full = (0..self.horizon())
            .map(|j| {
                let mut v = DVector::zeros(width);
                for (i, r) in reduced.iter().enumerate() {
                    let wji = self.weights[(j, i)];
                    if wji != 0.0 {
                        v.axpy(wji, r, 1.0);
                    }
                }
                v
            })
            .collect();
        Ok(full)
    }
}

/// `λ = 1 − (b − s_i)/(s_{i+1} − s_i)`, the weight on the left anchor.
pub fn interpolation_weight(position: usize, left: usize, right: usize) -> f64 {
    debug_assert!(left <= position && position < right);
    1.0 - (position - left) as f64 / (right - left) as f64
}

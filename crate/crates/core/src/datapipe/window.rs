use sha2::{Digest, Sha256};

use super::{RawRun, StateLabel};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// A `rows x cols` (time x variable) sample matrix cut from one run.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub state: Option<StateLabel>,
}

/// Slide a `w`-step window over `run` with the given stride. Windows never
/// cross run boundaries.
pub fn window(run: &RawRun, w: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    check_window_args(run, w, stride)?;
    let m = run.variables();
    Ok((0..window_count(run.len(), w, stride))
        .map(|i| {
            let start = i * stride;
            WindowedSample {
                rows: w,
                cols: m,
                data: run.samples()[start * m..(start + w) * m].to_vec(),
                state: Some(run.state),
            }
        })
        .collect())
}

fn check_window_args(run: &RawRun, w: usize, stride: usize) -> Result<()> {
    if w == 0 || stride == 0 {
        return Err(Error::Invalid("window length and stride must be positive".into()));
    }
    if run.len() < w {
        return Err(Error::InputTooShort {
            run_id: run.run_id.clone(),
            len: run.len(),
            window: w,
        });
    }
    Ok(())
}

/// `floor((n - w) / stride) + 1` for `n >= w`.
pub(crate) fn window_count(n: usize, w: usize, stride: usize) -> usize {
    (n - w) / stride + 1
}

/// Contiguous store of equally sized windows, the unit the training and
/// evaluation code batches from.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    states: Vec<Option<StateLabel>>,
}

impl WindowSet {
    pub fn empty(rows: usize, cols: usize) -> Self {
        WindowSet {
            rows,
            cols,
            data: Vec::new(),
            states: Vec::new(),
        }
    }

    /// Window every run independently and stack the results.
    pub fn from_runs(runs: &[RawRun], w: usize, stride: usize) -> Result<Self> {
        let cols = runs.first().map(|r| r.variables()).ok_or_else(|| Error::Invalid("no runs to window".into()))?;
        let mut set = WindowSet::empty(w, cols);
        for run in runs {
            if run.variables() != cols {
                return Err(Error::Dimension {
                    op: "window",
                    axis: "variables",
                    expected: cols,
                    found: run.variables(),
                });
            }
            check_window_args(run, w, stride)?;
            for i in 0..window_count(run.len(), w, stride) {
                let start = i * stride;
                set.data.extend_from_slice(&run.samples()[start * cols..(start + w) * cols]);
                set.states.push(Some(run.state));
            }
        }
        Ok(set)
    }

    pub fn from_samples(samples: &[WindowedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("no windows".into()))?;
        let mut set = WindowSet::empty(first.rows, first.cols);
        for s in samples {
            set.push(&s.data, s.state)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, data: &[f64], state: Option<StateLabel>) -> Result<()> {
        if data.len() != self.rows * self.cols {
            return Err(Error::Dimension {
                op: "window",
                axis: "cells",
                expected: self.rows * self.cols,
                found: data.len(),
            });
        }
        self.data.extend_from_slice(data);
        self.states.push(state);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn states(&self) -> &[Option<StateLabel>] {
        &self.states
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let cells = self.rows * self.cols;
        &self.data[i * cells..(i + 1) * cells]
    }

    pub fn sample(&self, i: usize) -> WindowedSample {
        WindowedSample {
            rows: self.rows,
            cols: self.cols,
            data: self.window(i).to_vec(),
            state: self.states[i],
        }
    }

    /// Stack the selected windows into a `[batch, 1, rows, cols]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let cells = self.rows * self.cols;
        let mut data = Vec::with_capacity(indices.len() * cells);
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Tensor::new(vec![indices.len(), 1, self.rows, self.cols], data).expect("batch shape")
    }

    /// Content hash over the window extents and the exact cell values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

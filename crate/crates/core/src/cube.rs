use crate::error::{Error, Result};

/// Expected photons per pulse for every pixel and bin, laid out row-major as (row, col, bin).
#[derive(Debug, Clone, PartialEq)]
pub struct IdealTransient {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub flux: Vec<f64>,
}

impl IdealTransient {
    pub fn zeros(rows: usize, cols: usize, bins: usize) -> Self {
        Self {
            rows,
            cols,
            bins,
            flux: vec![0.0; rows * cols * bins],
        }
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.cols + c) * self.bins;
        &self.flux[o..o + self.bins]
    }

    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let o = (r * self.cols + c) * self.bins;
        &mut self.flux[o..o + self.bins]
    }

    pub fn check_dims(&self, rows: usize, cols: usize, bins: usize) -> Result<()> {
        if (self.rows, self.cols, self.bins) != (rows, cols, bins) {
            return Err(Error::Config(format!(
                "transient is {}x{}x{} but {rows}x{cols}x{bins} was expected",
                self.rows, self.cols, self.bins
            )));
        }
        Ok(())
    }
}

/// Detected photon counts per pixel and bin, laid out row-major as (row, col, bin).
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramCube {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    /// Laser pulses integrated into the histograms.
    pub pulses: u64,
    pub counts: Vec<u32>,
}

impl HistogramCube {
    pub fn zeros(rows: usize, cols: usize, bins: usize, pulses: u64) -> Self {
        Self {
            rows,
            cols,
            bins,
            pulses,
            counts: vec![0; rows * cols * bins],
        }
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[u32] {
        let o = (r * self.cols + c) * self.bins;
        &self.counts[o..o + self.bins]
    }

    pub fn pixel_index(&self, index: usize) -> &[u32] {
        &self.counts[index * self.bins..(index + 1) * self.bins]
    }

    /// Sums cubes of identical shape, as when accumulating frames.
    pub fn accumulate(&mut self, other: &HistogramCube) -> Result<()> {
        if (self.rows, self.cols, self.bins) != (other.rows, other.cols, other.bins) {
            return Err(Error::Dimension(
                "cannot accumulate cubes of different shape".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a = a.saturating_add(*b);
        }
        self.pulses += other.pulses;
        Ok(())
    }
}

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    /// Seconds per histogram bin.
    pub bin_width: f64,
    /// Dead time in bins.
    pub dead_time: usize,
    pub pulses_per_frame: u64,
    pub clip_limit: u32,
    /// Meters of range per bin.
    pub range_per_bin: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        let bin_width = 250e-12;
        Self {
            rows: 192,
            cols: 256,
            bins: 672,
            bin_width,
            dead_time: 40,
            pulses_per_frame: 4000,
            clip_limit: 4096,
            range_per_bin: SPEED_OF_LIGHT * bin_width / 2.0,
        }
    }
}

impl SensorConfig {
    pub fn with_dims(rows: usize, cols: usize, bins: usize) -> Self {
        Self {
            rows,
            cols,
            bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bins == 0 {
            return Err(Error::Config("sensor dimensions must be at least 1".into()));
        }
        if self.pulses_per_frame == 0 {
            return Err(Error::Config("pulses_per_frame must be at least 1".into()));
        }
        if self.clip_limit == 0 {
            return Err(Error::Config("clip_limit must be at least 1".into()));
        }
        if !(self.range_per_bin > 0.0) || !(self.bin_width > 0.0) {
            return Err(Error::Config(
                "bin width and range per bin must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of bins preceding a detection that must be free of arrivals for
    /// it to register. Capped one short of the period so a lone photon per
    /// pulse is always detectable.
    pub fn censor_window(&self) -> usize {
        censor_window(self.dead_time, self.bins)
    }
}

pub fn censor_window(dead_time: usize, bins: usize) -> usize {
    (dead_time + 1).min(bins.saturating_sub(1))
}

//! File formats, configuration and scene descriptions.

pub mod config;
pub mod formats;
pub mod scene;

use std::fmt::Write as _;
use std::path::Path;

use crate::deglare::{ConfidenceMap, GlarePrediction};
use crate::error::{Error, Result};
use crate::pileup::CorrectedEchoSet;
use crate::waveform::Waveform;

pub use config::{NoiseWindow, RunConfig};
pub use formats::{
    decode_atlas, decode_confidence, decode_cube, decode_depth, decode_luts, encode_atlas,
    encode_confidence, encode_cube, encode_depth, encode_luts, read_file, write_file,
    ConfidenceImage, CountType,
};
pub use scene::parse_scene;

/// Reads pulse samples, whitespace or comma separated, `#` starting a comment.
pub fn parse_waveform(text: &str, bins: usize) -> Result<Waveform> {
    let mut samples = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("");
        for tok in body
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
        {
            let v: f64 = tok.parse().map_err(|_| {
                Error::format("waveform", at as u64, format!("`{tok}` is not a number"))
            })?;
            samples.push(v);
        }
    }
    if samples.is_empty() {
        return Err(Error::format("waveform", 0, "no samples"));
    }
    Waveform::from_samples(&samples, bins)
}

pub fn load_waveform(path: &Path, bins: usize) -> Result<Waveform> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::format("waveform", e.valid_up_to() as u64, "not valid UTF-8"))?;
    parse_waveform(text, bins)
}

pub const ECHO_TABLE_HEADER: &str =
    "row,col,echo,counts,mean_bin,var_bin2,background,alpha_hat,mean_corr_bin,glare_pred,G_expected,confidence,source_tag";

/// One line per echo. The selected echo carries its pixel's source tag,
/// echoes rejected by the background gate are tagged `gated`.
pub fn echo_table(
    echoes: &CorrectedEchoSet,
    glare: &GlarePrediction,
    conf: &ConfidenceMap,
    tags: &[crate::deglare::SourceTag],
) -> String {
    let mut s = String::with_capacity(echoes.echoes.len() * 200);
    s.push_str(ECHO_TABLE_HEADER);
    s.push('\n');
    for (p, px) in echoes.echoes.iter().enumerate() {
        let (row, col) = (p / echoes.cols, p % echoes.cols);
        for (k, e) in px.iter().enumerate() {
            let tag = if conf.chosen[p] == Some(k) {
                tags[p].as_str()
            } else if conf.gated[p][k] {
                "gated"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "{row},{col},{k},{},{},{},{},{},{},{},{},{},{tag}",
                e.base.counts,
                e.base.mean_tof,
                e.base.var_tof,
                e.base.background,
                e.alpha_hat,
                e.mean_corrected,
                glare.g_bar[p][k],
                conf.expected_glare[p][k],
                conf.c[p][k],
            );
        }
    }
    s
}

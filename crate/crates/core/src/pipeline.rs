//! End-to-end processing of a histogram cube into a depth map.

use crate::cube::HistogramCube;
use crate::deglare::{
    brightest_depth, confidence_map, predict_glare, select_depth, ConfidenceMap, DeglareParams,
    DepthMap, GlarePrediction, OverlapTable,
};
use crate::dsp::{extract_echoes, DspParams};
use crate::error::{Result, StageExt};
use crate::gsf::{GlareOperator, GsfAtlas};
use crate::pileup::{
    correct_echoes, CorrectedEchoSet, CorrectionParams, IntensityEstimator, PileupLuts, ReturnModel,
};
use crate::sensor::SensorConfig;
use crate::waveform::Waveform;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub dsp: DspParams,
    pub estimator: IntensityEstimator,
    pub deglare: DeglareParams,
    pub dead_time: usize,
    /// Refine table-based pileup estimates with the forward model at each echo's sub-bin depth.
    pub sub_bin_refinement: bool,
}

impl PipelineParams {
    pub fn for_sensor(cfg: &SensorConfig, wf: &Waveform) -> Self {
        let dsp = DspParams::for_sensor(cfg.bins, wf.fwhm());
        let deglare = DeglareParams::new(dsp.window, cfg.range_per_bin);
        Self {
            dsp,
            estimator: IntensityEstimator::default(),
            deglare,
            dead_time: cfg.dead_time,
            sub_bin_refinement: true,
        }
    }
}

/// Calibration shared by every frame.
pub struct Calibration {
    pub waveform: Waveform,
    pub luts: PileupLuts,
    pub glare: GlareOperator,
    pub overlap: OverlapTable,
}

impl Calibration {
    pub fn new(
        waveform: Waveform,
        luts: PileupLuts,
        atlas: &GsfAtlas,
        window: f64,
    ) -> Result<Self> {
        luts.validate().stage("lookup tables")?;
        let glare = GlareOperator::new(atlas).stage("glare operator")?;
        let overlap = OverlapTable::new(&waveform, window)?;
        Ok(Self {
            waveform,
            luts,
            glare,
            overlap,
        })
    }
}

pub struct PipelineOutput {
    pub echoes: CorrectedEchoSet,
    pub glare: GlarePrediction,
    pub confidence: ConfidenceMap,
    pub depth: DepthMap,
}

impl PipelineOutput {
    /// Depth of the brightest echo per pixel, as if glare were ignored.
    pub fn without_deglare(&self, params: &PipelineParams) -> DepthMap {
        brightest_depth(&self.echoes, &params.deglare)
    }
}

pub fn run(
    cube: &HistogramCube,
    cal: &Calibration,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    let raw = extract_echoes(cube, &cal.waveform, &params.dsp).stage("echo extraction")?;
    let correction = CorrectionParams {
        pulses: cube.pulses,
        bins: cube.bins,
        threshold: params.deglare.pileup_threshold,
        estimator: params.estimator,
        dead_time: params.dead_time,
    };
    let model = params
        .sub_bin_refinement
        .then(|| ReturnModel::new(&cal.waveform, params.dead_time, cal.luts.window));
    let echoes = correct_echoes(&raw, &cal.luts, &correction, model.as_ref());
    let glare = predict_glare(&echoes, &cal.glare, &cal.overlap, &params.deglare)
        .stage("glare prediction")?;
    let mut confidence =
        confidence_map(&echoes, &glare, &cal.luts, &params.deglare).stage("confidence")?;
    let depth = select_depth(&echoes, &glare, &mut confidence, &params.deglare);
    Ok(PipelineOutput {
        echoes,
        glare,
        confidence,
        depth,
    })
}

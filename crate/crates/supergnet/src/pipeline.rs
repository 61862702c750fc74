//! Text → Super Characters image → integer inference → argmax.

use std::time::Instant;

use serde::Serialize;
use supergnet_core::engine::{LayerError, RunOutput};
use supergnet_core::fontkit::BitmapFont;
use supergnet_core::superchar::{render_text, CanvasError, CanvasSpec, LayoutPlan, Mode, SuperImage};

use crate::model_file::Model;

/// Published per-stage device latencies (ms): preprocessing on the phone,
/// inference on the accelerator, and the end-to-end total. Shown next to
/// host measurements for reference only.
pub const DEVICE_REFERENCE_MS: (f64, f64, f64) = (6.0, 15.0, 21.0);

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error("canvas {canvas}x{canvas}x{channels} does not match the model input {model:?}")]
    CanvasMismatch {
        canvas: usize,
        channels: usize,
        model: (usize, usize, usize),
    },
    #[error("model output {0:?} is not a score vector (expected C×1×1)")]
    NotScores((usize, usize, usize)),
    #[error("model has {labels} labels but {classes} output channels")]
    LabelMismatch { labels: usize, classes: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

/// Wall-clock milliseconds of each stage of one classification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub inference_ms: f64,
    pub postprocess_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.preprocess_ms + self.inference_ms + self.postprocess_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub index: usize,
    pub scores: Vec<f32>,
    pub timings: StageTimings,
    pub plan: LayoutPlan,
    pub image: SuperImage,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// A model bound to a font, canvas and text mode.
#[derive(Debug, Clone)]
pub struct Classifier<'a> {
    model: &'a Model,
    font: &'a BitmapFont,
    spec: CanvasSpec,
    mode: Mode,
}

impl<'a> Classifier<'a> {
    /// The canvas channel count is taken from the model input; side must
    /// match the model's input height and width.
    pub fn new(model: &'a Model, font: &'a BitmapFont, spec: CanvasSpec, mode: Mode) -> Result<Self, PipelineError> {
        let (c, h, w) = model.graph.input_shape;
        let spec = CanvasSpec { channels: c, ..spec };
        spec.validate()?;
        if spec.side != h || spec.side != w {
            return Err(PipelineError::CanvasMismatch {
                canvas: spec.side,
                channels: c,
                model: model.graph.input_shape,
            });
        }
        let classes = model.num_classes().unwrap_or(0);
        if !model.labels.is_empty() && model.labels.len() != classes {
            return Err(PipelineError::LabelMismatch {
                labels: model.labels.len(),
                classes,
            });
        }
        Ok(Self { model, font, spec, mode })
    }

    pub fn spec(&self) -> &CanvasSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn label_of(&self, index: usize) -> String {
        self.model
            .labels
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("class{index}"))
    }

    pub fn classify(&self, text: &str) -> Result<Classification, PipelineError> {
        let t0 = Instant::now();
        let (plan, image) = render_text(text, self.mode, &self.spec, self.font);
        let x = image
            .to_activations(self.model.graph.input_act_scale)
            .map_err(|_| LayerError::ScaleInvalid(self.model.graph.input_act_scale))?;
        let t1 = Instant::now();
        let (out, _) = self.model.graph.run_int(&x)?;
        let t2 = Instant::now();
        let scores = scores_of(&out)?;
        let index = argmax(&scores);
        let label = self.label_of(index);
        let t3 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        Ok(Classification {
            label,
            index,
            scores,
            timings: StageTimings {
                preprocess_ms: ms(t0, t1),
                inference_ms: ms(t1, t2),
                postprocess_ms: ms(t2, t3),
                total_ms: ms(t0, t3),
            },
            plan,
            image,
        })
    }
}

fn scores_of(out: &RunOutput) -> Result<Vec<f32>, PipelineError> {
    let shape = out.shape();
    if shape.1 != 1 || shape.2 != 1 {
        return Err(PipelineError::NotScores(shape));
    }
    Ok(out.to_float().into_data())
}

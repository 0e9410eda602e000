//! IoU, NoC/NoF and the click-by-click benchmark loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::click::ClickSet;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::interaction::next_click;
use crate::mask::Mask;
use crate::model::{Model, Prediction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps (image, clicks, previous probability mask) to a
/// prediction.
pub trait InteractiveSegmenter<S> {
    fn predict(&self, image: &Tensor<S>, clicks: &ClickSet, prev_mask: &Tensor<S>) -> Result<Prediction<S>>;
}

impl<S: Scalar> InteractiveSegmenter<S> for Model<S> {
    fn predict(&self, image: &Tensor<S>, clicks: &ClickSet, prev_mask: &Tensor<S>) -> Result<Prediction<S>> {
        Model::predict(self, image, clicks, prev_mask)
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_size(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// IoU targets, e.g. `[0.85, 0.90]`.
    pub targets: Vec<f64>,
    pub max_clicks: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            targets: vec![0.85, 0.90],
            max_clicks: 20,
        }
    }
}

/// Per-target outcome for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target: f64,
    /// First click count reaching the target, or `max_clicks` on failure.
    pub clicks_used: usize,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// IoU after clicks `1..=n`; stops once the highest target is reached.
    pub ious: Vec<f64>,
    pub final_iou: f64,
    pub outcomes: Vec<TargetOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: f64,
    pub noc: f64,
    pub nof: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_clicks: usize,
    pub samples: Vec<SampleRecord>,
    pub summary: Vec<TargetSummary>,
    /// `(k, mean IoU after k clicks)` for `k = 1..=max_clicks`.
    pub curve: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn noc(&self, target: f64) -> Option<f64> {
        self.summary.iter().find(|s| s.target == target).map(|s| s.noc)
    }

    pub fn nof(&self, target: f64) -> Option<usize> {
        self.summary.iter().find(|s| s.target == target).map(|s| s.nof)
    }

    /// Writes one `{"kind":"sample",...}` line per sample followed by a
    /// single `{"kind":"summary",...}` line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "lowercase")]
        enum Line<'a> {
            Sample(&'a SampleRecord),
            Summary {
                max_clicks: usize,
                samples: usize,
                targets: &'a [TargetSummary],
                curve: &'a [(usize, f64)],
            },
        }
        for s in &self.samples {
            serde_json::to_writer(&mut out, &Line::Sample(s))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut out,
            &Line::Summary {
                max_clicks: self.max_clicks,
                samples: self.samples.len(),
                targets: &self.summary,
                curve: &self.curve,
            },
        )?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
    }
}

/// Mean IoU after `k` clicks for `k = 1..=max_clicks`; samples that stopped
/// early contribute their last IoU.
pub fn iou_curve(samples: &[SampleRecord], max_clicks: usize) -> Vec<(usize, f64)> {
    (1..=max_clicks)
        .map(|k| {
            let total: f64 = samples
                .iter()
                .map(|s| {
                    s.ious
                        .get(k - 1)
                        .or(s.ious.last())
                        .copied()
                        .unwrap_or(0.0)
                })
                .sum();
            (k, if samples.is_empty() { 0.0 } else { total / samples.len() as f64 })
        })
        .collect()
}

/// Runs the corrective-click loop for one sample.
///
/// Each click is placed by [`next_click`] against the current binary
/// prediction (empty, or `initial_mask` in correction mode), and the
/// previous probability map is fed back to the model.
pub fn evaluate_sample<S: Scalar>(
    model: &impl InteractiveSegmenter<S>,
    sample: &Sample<S>,
    config: &EvalConfig,
    initial_mask: Option<&Mask>,
) -> Result<SampleRecord> {
    let (h, w) = (sample.gt.height(), sample.gt.width());
    let stop_at = config.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut pred, mut prev) = match initial_mask {
        Some(m) => {
            m.same_size(&sample.gt)?;
            (m.clone(), m.to_tensor())
        }
        None => (Mask::empty(h, w), Tensor::zeros([1, h, w])),
    };
    let mut clicks = ClickSet::new();
    let mut ious = Vec::with_capacity(config.max_clicks);
    while ious.len() < config.max_clicks {
        let Some(click) = next_click(&pred, &sample.gt)? else {
            // prediction already exact; remaining clicks would change nothing
            ious.push(1.0);
            break;
        };
        clicks.push(click.row, click.col, click.polarity);
        let p = model.predict(&sample.image, &clicks, &prev)?;
        let score = iou(&p.mask, &sample.gt)?;
        ious.push(score);
        pred = p.mask;
        prev = p.prob;
        if score >= stop_at {
            break;
        }
    }
    let outcomes = config
        .targets
        .iter()
        .map(|&target| match ious.iter().position(|&v| v >= target) {
            Some(i) => TargetOutcome {
                target,
                clicks_used: i + 1,
                failed: false,
            },
            None => TargetOutcome {
                target,
                clicks_used: config.max_clicks,
                failed: true,
            },
        })
        .collect();
    Ok(SampleRecord {
        id: sample.id.clone(),
        final_iou: *ious.last().expect("at least one click"),
        ious,
        outcomes,
    })
}

/// NoC/NoF over `samples`. `initial_masks`, when given, must align with
/// `samples`.
pub fn evaluate_noc<S: Scalar>(
    model: &impl InteractiveSegmenter<S>,
    samples: &[Sample<S>],
    config: &EvalConfig,
    initial_masks: Option<&[Mask]>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    if config.max_clicks == 0 || config.targets.is_empty() {
        return Err(Error::Config("evaluation needs max_clicks > 0 and at least one target".into()));
    }
    if let Some(t) = config.targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("IoU target {t} outside (0, 1)")));
    }
    if let Some(masks) = initial_masks {
        if masks.len() != samples.len() {
            return Err(Error::InvalidInput(format!(
                "{} initial masks for {} samples",
                masks.len(),
                samples.len()
            )));
        }
    }
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_sample(model, s, config, initial_masks.map(|m| &m[i])))
        .collect::<Result<Vec<_>>>()?;
    let summary = config
        .targets
        .iter()
        .enumerate()
        .map(|(t, &target)| {
            let used: usize = records.iter().map(|r| r.outcomes[t].clicks_used).sum();
            TargetSummary {
                target,
                noc: used as f64 / records.len() as f64,
                nof: records.iter().filter(|r| r.outcomes[t].failed).count(),
            }
        })
        .collect();
    let curve = iou_curve(&records, config.max_clicks);
    Ok(EvalReport {
        max_clicks: config.max_clicks,
        samples: records,
        summary,
        curve,
    })
}

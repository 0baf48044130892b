use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::features::{fid, kid, FeatureSet};
use super::masks::{dice3d, hd95, instance_sizes, mean_instance_volume, Hd95Mode};
use crate::data::LabelVolume;
use crate::error::Result;

/// Label of the instance-stacking method, carried in every report.
pub const STACKING_METHOD: &str = "greedy-iou-2d-to-3d";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub hd95_mode: Hd95Mode,
}

/// Realism and fidelity metrics for one predicted volume against its
/// reference. A metric that cannot be computed is `None` with its reason in
/// `absent`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsReport {
    pub pred_id: String,
    pub gt_id: String,
    pub extractor: Option<String>,
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    pub dice3d: Option<f64>,
    pub hd95_um: Option<f64>,
    pub hd95_mode: Hd95Mode,
    pub pred_mean_instance_volume_um3: Option<f64>,
    pub gt_mean_instance_volume_um3: Option<f64>,
    pub pred_instances: usize,
    pub gt_instances: usize,
    pub stacking: String,
    pub absent: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::Config(format!("metrics report: {e}")))
    }

    fn record(&mut self, name: &str, r: Result<f64>) -> Option<f64> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.absent.insert(name.to_string(), e.to_string());
                None
            }
        }
    }

    pub fn with_ids(mut self, pred: impl Into<String>, gt: impl Into<String>) -> Self {
        self.pred_id = pred.into();
        self.gt_id = gt.into();
        self
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>, prec: usize| v.map_or("n/a".to_string(), |v| format!("{v:.prec$}"));
        writeln!(
            f,
            "{:<16} {:>10} {:>10} {:>8} {:>10} {:>12} {:>12}",
            "volume", "FID", "KID", "Dice", "HD95 um", "Nuc.Vol um3", "GT Vol um3"
        )?;
        writeln!(
            f,
            "{:<16} {:>10} {:>10} {:>8} {:>10} {:>12} {:>12}",
            if self.pred_id.is_empty() { "pred" } else { &self.pred_id },
            cell(self.fid, 3),
            cell(self.kid, 4),
            cell(self.dice3d, 3),
            cell(self.hd95_um, 2),
            cell(self.pred_mean_instance_volume_um3, 1),
            cell(self.gt_mean_instance_volume_um3, 1),
        )?;
        for (k, why) in &self.absent {
            writeln!(f, "  {k}: {why}")?;
        }
        Ok(())
    }
}

/// Computes every metric independently; failures are recorded, not returned.
pub fn evaluate_pair(
    pred: &LabelVolume,
    gt: &LabelVolume,
    features: Option<(&FeatureSet, &FeatureSet)>,
    opts: &EvalOptions,
) -> MetricsReport {
    let mut r = MetricsReport {
        hd95_mode: opts.hd95_mode,
        stacking: STACKING_METHOD.to_string(),
        pred_instances: instance_sizes(pred).len(),
        gt_instances: instance_sizes(gt).len(),
        ..MetricsReport::default()
    };
    r.dice3d = r.record("dice3d", dice3d(pred, gt));
    r.hd95_um = r.record("hd95_um", hd95(pred, gt, gt.spacing_um(), opts.hd95_mode));
    r.pred_mean_instance_volume_um3 = r.record("pred_mean_instance_volume_um3", mean_instance_volume(pred));
    r.gt_mean_instance_volume_um3 = r.record("gt_mean_instance_volume_um3", mean_instance_volume(gt));
    match features {
        Some((fp, fr)) => {
            r.extractor = Some(fp.tag.clone());
            r.fid = r.record("fid", fid(fp, fr));
            r.kid = r.record("kid", kid(fp, fr));
        }
        None => {
            for k in ["fid", "kid"] {
                r.absent.insert(k.into(), "no feature sets supplied".into());
            }
        }
    }
    r
}

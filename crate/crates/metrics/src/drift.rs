use std::fmt::Write as _;

use serde_json::{json, Value};
use streetscape_core::{Error, ImageTensor, Result};

use crate::extractor::Extractor;
use crate::kid::{kid_mmd, MIN_KID_SAMPLES};
use crate::stats::{frechet_distance, FeatureStats};

/// Autoregressive step ranges (inclusive); a boundary step belongs to the
/// lower bucket. `all` covers every frame including the first window.
pub const BUCKETS: [(&str, usize, usize); 4] =
    [("1-16", 1, 16), ("16-32", 17, 32), ("32-64", 33, 64), ("all", 0, usize::MAX)];

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub bucket: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    /// Buckets with fewer than the minimum number of frames.
    pub absent: Vec<String>,
    pub counts: Vec<(String, usize)>,
    pub extractor_seed: u64,
}

impl DriftReport {
    pub fn value(&self, bucket: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.bucket == bucket && r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.bucket, r.metric, r.value);
        }
        out
    }

    /// JSON mirror of the CSV plus bucket counts and caller metadata.
    pub fn to_json(&self, metadata: Value) -> Value {
        let rows: Vec<Value> =
            self.rows.iter().map(|r| json!({ "bucket": r.bucket, "metric": r.metric, "value": r.value })).collect();
        let counts: serde_json::Map<String, Value> = self.counts.iter().map(|(b, n)| (b.clone(), json!(n))).collect();
        json!({
            "extractor_seed": self.extractor_seed,
            "rows": rows,
            "absent": self.absent,
            "counts": counts,
            "metadata": metadata,
        })
    }
}

/// Fréchet and kernel distances of generated frames against a reference set,
/// per autoregressive step bucket. `frames` pairs each image with its step.
pub fn drift_report(
    frames: &[(usize, &ImageTensor)],
    reference: &[ImageTensor],
    extractor_seed: u64,
) -> Result<DriftReport> {
    if reference.len() < MIN_KID_SAMPLES {
        return Err(Error::contract(format!(
            "drift_report needs at least {MIN_KID_SAMPLES} reference images, got {}",
            reference.len()
        )));
    }
    let ex = Extractor::new(extractor_seed);
    let ref_feats = reference.iter().map(|i| ex.features(i)).collect::<Result<Vec<_>>>()?;
    let ref_stats = FeatureStats::from_features(&ref_feats)?;
    let gen_feats = frames.iter().map(|(s, i)| Ok((*s, ex.features(i)?))).collect::<Result<Vec<_>>>()?;
    let mut report = DriftReport { rows: Vec::new(), absent: Vec::new(), counts: Vec::new(), extractor_seed };
    for (name, lo, hi) in BUCKETS {
        let feats: Vec<Vec<f64>> =
            gen_feats.iter().filter(|(s, _)| (lo..=hi).contains(s)).map(|(_, f)| f.clone()).collect();
        report.counts.push((name.to_owned(), feats.len()));
        if feats.len() < MIN_KID_SAMPLES {
            report.absent.push(name.to_owned());
            continue;
        }
        let fd = frechet_distance(&FeatureStats::from_features(&feats)?, &ref_stats)?;
        let kid = kid_mmd(&feats, &ref_feats)?;
        report.rows.push(DriftRow { bucket: name.to_owned(), metric: "frechet".into(), value: fd });
        report.rows.push(DriftRow { bucket: name.to_owned(), metric: "kid".into(), value: kid });
    }
    Ok(report)
}

//! Pixel-level video metrics: adjacent-frame consistency, motion magnitude
//! and per-layer reconstruction error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerpack::{LayerQuadruple, Segment, Video};

fn need_two_frames(v: &Video) -> Result<()> {
    if v.frames() < 2 {
        return Err(Error::invalid(format!(
            "temporal metrics need at least 2 frames, got {}",
            v.frames()
        )));
    }
    Ok(())
}

fn centered(frame: &[f32]) -> Vec<f64> {
    let mean = frame.iter().map(|&v| v as f64).sum::<f64>() / frame.len() as f64;
    frame.iter().map(|&v| v as f64 - mean).collect()
}

/// Mean cosine similarity of mean-centered adjacent frames. A pair with a
/// constant frame counts as 1.
pub fn frame_consistency(video: &Video) -> Result<f64> {
    need_two_frames(video)?;
    let frames: Vec<Vec<f64>> = (0..video.frames()).map(|f| centered(video.frame(f))).collect();
    let mut total = 0.0;
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>();
        let nb = b.iter().map(|x| x * x).sum::<f64>();
        // sqrt(na·nb) is exact for identical frames, so they score exactly 1
        total += if na == 0.0 || nb == 0.0 {
            1.0
        } else {
            (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
        };
    }
    Ok(total / (video.frames() - 1) as f64)
}

/// Mean absolute difference between adjacent frames, in pixel units.
pub fn dynamic_degree(video: &Video) -> Result<f64> {
    need_two_frames(video)?;
    let mut total = 0.0f64;
    for f in 1..video.frames() {
        total += video
            .frame(f)
            .iter()
            .zip(video.frame(f - 1))
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>();
    }
    Ok(total / ((video.frames() - 1) * video.frame_len()) as f64)
}

/// Mean squared error per layer, in fg/alpha/bg/blended order.
pub fn reconstruction_error(predicted: &LayerQuadruple, truth: &LayerQuadruple) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for s in Segment::ALL {
        let (p, t) = (predicted.videos.get(s), truth.videos.get(s));
        if !p.same_extent(t) || p.channels() != t.channels() {
            return Err(Error::shape(
                "reconstruction_error",
                &[p.frames(), p.height(), p.width(), p.channels()],
                &[t.frames(), t.height(), t.width(), t.channels()],
            ));
        }
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        out[s.index()] = sum / p.data().len() as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FrameConsistency,
    DynamicDegree,
    ReconstructionMse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::FrameConsistency => "frame_consistency",
            Metric::DynamicDegree => "dynamic_degree",
            Metric::ReconstructionMse => "reconstruction_mse",
        }
    }

    /// Dynamic degree is not reported for backgrounds.
    pub fn applies_to(self, s: Segment) -> bool {
        !(self == Metric::DynamicDegree && s == Segment::Background)
    }
}

/// One score of one sample; `None` marks a not-applicable entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample: String,
    pub layer: String,
    pub metric: Metric,
    pub value: Option<f64>,
}

/// Averaged scores of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub frame_consistency: f64,
    pub dynamic_degree: Option<f64>,
    pub reconstruction_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Layer name → mean scores; every layer is always present.
    pub layers: BTreeMap<String, LayerScores>,
    pub samples: usize,
    pub rows: Vec<MetricRow>,
}

/// Scores every prediction; reconstruction error needs `truth` aligned with
/// `predicted`.
pub fn evaluate(predicted: &[(String, LayerQuadruple)], truth: Option<&[LayerQuadruple]>) -> Result<MetricReport> {
    if predicted.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    if let Some(t) = truth {
        if t.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} predictions but {} ground-truth samples",
                predicted.len(),
                t.len()
            )));
        }
    }
    let mut metrics = vec![Metric::FrameConsistency, Metric::DynamicDegree];
    if truth.is_some() {
        metrics.push(Metric::ReconstructionMse);
    }
    let mut rows = Vec::new();
    for (i, (name, q)) in predicted.iter().enumerate() {
        let rec = match truth {
            Some(t) => Some(reconstruction_error(q, &t[i])?),
            None => None,
        };
        for s in Segment::ALL {
            let v = q.videos.get(s);
            for &m in &metrics {
                let value = match m {
                    _ if !m.applies_to(s) => None,
                    Metric::FrameConsistency => Some(frame_consistency(v)?),
                    Metric::DynamicDegree => Some(dynamic_degree(v)?),
                    Metric::ReconstructionMse => rec.map(|r| r[s.index()]),
                };
                rows.push(MetricRow {
                    sample: name.clone(),
                    layer: s.name().to_string(),
                    metric: m,
                    value,
                });
            }
        }
    }
    let n = predicted.len() as f64;
    let mean = |s: Segment, m: Metric| -> Option<f64> {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.layer == s.name() && r.metric == m)
            .filter_map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / n)
    };
    let layers = Segment::ALL
        .into_iter()
        .map(|s| {
            (
                s.name().to_string(),
                LayerScores {
                    frame_consistency: mean(s, Metric::FrameConsistency).unwrap_or(f64::NAN),
                    dynamic_degree: mean(s, Metric::DynamicDegree),
                    reconstruction_mse: mean(s, Metric::ReconstructionMse),
                },
            )
        })
        .collect();
    Ok(MetricReport {
        layers,
        samples: predicted.len(),
        rows,
    })
}

impl MetricReport {
    /// One `layer,metric,value,n,sample` row per sample score (`n` = 1);
    /// `NA` marks not-applicable entries. Means live in the JSON sidecar.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,metric,value,n,sample\n");
        for r in &self.rows {
            let v = r.value.map_or("NA".to_string(), |v| format!("{v}"));
            let _ = writeln!(s, "{},{},{},1,{}", r.layer, r.metric.name(), v, r.sample);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        let json = serde_json::to_string_pretty(&self.summary())
            .map_err(|e| Error::format(e.to_string()))?;
        fs::write(dir.join("metrics.json"), json)?;
        Ok(())
    }

    /// Aggregates without the per-sample rows.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "samples": self.samples,
            "layers": self.layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layerpack::LayerVideos;
    use crate::synthdata::{base_quadruple, freeze, DataConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn video(f: usize, data: impl Fn(usize, usize) -> f32) -> Video {
        let (h, w) = (3, 4);
        let n = h * w * 3;
        Video::new(f, h, w, 3, (0..f * n).map(|i| data(i / n, i % n)).collect()).unwrap()
    }

    fn cosine_oracle(a: &[f32], b: &[f32]) -> f64 {
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / b.len() as f64;
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            let (x, y) = (a[i] as f64 - ma, b[i] as f64 - mb);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn frozen_video_extremes() {
        let v = video(4, |_, i| (i as f32 * 0.37).sin() * 0.5 + 0.5);
        assert_eq!(frame_consistency(&v).unwrap(), 1.0);
        assert_eq!(dynamic_degree(&v).unwrap(), 0.0);
        let c = video(3, |_, _| 0.4);
        assert_eq!(frame_consistency(&c).unwrap(), 1.0);
    }

    #[test]
    fn anti_aligned_and_alternating() {
        let v = video(4, |f, i| {
            let s = if i % 2 == 0 { 0.2 } else { -0.2 };
            0.5 + if f % 2 == 0 { s } else { -s }
        });
        assert!((frame_consistency(&v).unwrap() + 1.0).abs() < 1e-12);
        let bw = video(5, |f, _| (f % 2) as f32);
        assert_eq!(dynamic_degree(&bw).unwrap(), 1.0);
    }

    #[test]
    fn single_frame_is_rejected() {
        let v = video(1, |_, _| 0.0);
        assert!(frame_consistency(&v).is_err());
        assert!(dynamic_degree(&v).is_err());
    }

    #[test]
    fn drift_clip_matches_pairwise_oracle() {
        let v = video(5, |f, i| ((i as f32 + 0.7 * f as f32) * 0.5).sin() * 0.4 + 0.5);
        let want: f64 = (1..5)
            .map(|f| cosine_oracle(v.frame(f - 1), v.frame(f)))
            .sum::<f64>()
            / 4.0;
        assert!((frame_consistency(&v).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn moving_pixel_changes_expected_fraction() {
        // a white pixel stepping one column per frame over black
        let v = Video::new(
            3,
            2,
            4,
            1,
            (0..24)
                .map(|i| {
                    let (f, x, y) = (i / 8, i % 4, (i / 4) % 2);
                    if y == 0 && x == f { 1.0 } else { 0.0 }
                })
                .collect(),
        )
        .unwrap();
        // two changed pixels out of eight in each of two transitions
        assert!((dynamic_degree(&v).unwrap() - 0.25).abs() < 1e-12);
    }

    fn quad(seed: u64) -> LayerQuadruple {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |c| Video::new(2, 2, 3, c, (0..12 * c).map(|_| rng.random::<f32>()).collect()).unwrap();
        LayerQuadruple::new(
            LayerVideos {
                foreground: v(3),
                alpha: v(1),
                background: v(3),
                blended: v(3),
            },
            Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let q = quad(1);
        assert_eq!(reconstruction_error(&q, &q).unwrap(), [0.0; 4]);
        let mut shifted = q.clone();
        for s in Segment::ALL {
            shifted.videos.get_mut(s).data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        for e in reconstruction_error(&shifted, &q).unwrap() {
            assert!((e - 0.01).abs() < 1e-7);
        }
        let r = quad(2);
        let got = reconstruction_error(&q, &r).unwrap();
        for s in Segment::ALL {
            let (a, b) = (q.videos.get(s).data(), r.videos.get(s).data());
            let mut acc = 0.0f64;
            for i in 0..a.len() {
                acc += (a[i] as f64 - b[i] as f64) * (a[i] as f64 - b[i] as f64);
            }
            assert!((got[s.index()] - acc / a.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_quadruples_score_extremes_on_every_layer() {
        let cfg = DataConfig::default();
        for i in 0..6 {
            let z = freeze(&base_quadruple(i, &cfg).unwrap().0, i as u64);
            for s in Segment::ALL {
                assert_eq!(dynamic_degree(z.videos.get(s)).unwrap(), 0.0);
                assert_eq!(frame_consistency(z.videos.get(s)).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn report_counts_and_files() {
        let preds: Vec<(String, LayerQuadruple)> = (0..3).map(|i| (format!("s{i}"), quad(i))).collect();
        let truth: Vec<LayerQuadruple> = preds.iter().map(|p| p.1.clone()).collect();
        let r = evaluate(&preds, Some(&truth)).unwrap();
        assert_eq!(r.rows.len(), 3 * 4 * 3);
        assert_eq!(r.layers.len(), 4);
        for l in r.layers.values() {
            assert_eq!(l.reconstruction_mse, Some(0.0));
        }
        assert_eq!(r.layers["bg"].dynamic_degree, None);
        let plain = evaluate(&preds, None).unwrap();
        assert_eq!(plain.rows.len(), 3 * 4 * 2);
        assert!(evaluate(&[], None).is_err());

        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 36);
        assert!(csv.contains("bg,dynamic_degree,NA,1,s0"));
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["samples"], 3);
    }

    proptest! {
        #[test]
        fn consistency_invariances(seed in 0u64..500, offset in -0.3f32..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = video(4, |_, _| 0.0);
            let data: Vec<f32> = v.data().iter().map(|_| rng.random::<f32>() * 0.5 + 0.25).collect();
            let v = Video::new(4, 3, 4, 3, data.clone()).unwrap();
            let shifted = Video::new(4, 3, 4, 3, data.iter().map(|x| x + offset).collect()).unwrap();
            let mut rev = Vec::new();
            for f in (0..4).rev() {
                rev.extend_from_slice(v.frame(f));
            }
            let rev = Video::new(4, 3, 4, 3, rev).unwrap();
            let base = frame_consistency(&v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));
            prop_assert!((frame_consistency(&shifted).unwrap() - base).abs() < 1e-5);
            prop_assert!((frame_consistency(&rev).unwrap() - base).abs() < 1e-12);
            prop_assert!(dynamic_degree(&v).unwrap() >= 0.0);
        }
    }
}

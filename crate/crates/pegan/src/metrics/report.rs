//! Per-band metric aggregation and the full generator evaluation pipeline.

use serde::{Deserialize, Serialize};

use crate::data::{
    batch_to_tensor, format_codepoint, tensor_to_images, Band, EvalSet, GlyphImage, GlyphPair,
};
use crate::error::{Error, Result};
use crate::metrics::recognizer::{recognition_accuracy, Recognizer};
use crate::metrics::{psnr, ssim, uqi};
use crate::model::Generator;
use crate::tensor::{no_grad, Mode};

/// Serializes optional metric values that may be infinite (PSNR of identical
/// images): finite -> number, +/-infinity -> "inf"/"-inf", absent -> null.
mod maybe_inf {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, ser: S) -> Result<S::Ok, S::Error> {
        match v {
            None => ser.serialize_none(),
            Some(x) if x.is_finite() => ser.serialize_f64(*x),
            Some(x) if *x == f64::INFINITY => ser.serialize_str("inf"),
            Some(x) if *x == f64::NEG_INFINITY => ser.serialize_str("-inf"),
            Some(x) => Err(serde::ser::Error::custom(format!("unserializable value {x}"))),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<f64>, D::Error> {
        let raw = Option::<serde_json::Value>::deserialize(de)?;
        match raw {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(serde_json::Value::Number(n)) => Ok(Some(
                n.as_f64().ok_or_else(|| D::Error::custom("bad number"))?,
            )),
            Some(serde_json::Value::String(s)) => match s.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(D::Error::custom(format!("bad metric value {other:?}"))),
            },
            Some(other) => Err(D::Error::custom(format!("bad metric value {other}"))),
        }
    }
}

/// Aggregated metrics over one sample group. Values are `None` when the
/// group is empty (no samples, or no recognizer supplied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandReport {
    pub count: usize,
    #[serde(with = "maybe_inf")]
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub uqi: Option<f64>,
    pub recognition_accuracy: Option<f64>,
}

impl BandReport {
    fn empty() -> BandReport {
        BandReport {
            count: 0,
            psnr_db: None,
            ssim: None,
            uqi: None,
            recognition_accuracy: None,
        }
    }
}

/// The evaluation report: overall plus the three difficulty bands, with the
/// eval-set codepoints that could not be evaluated listed separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub overall: BandReport,
    pub easy: BandReport,
    pub mid: BandReport,
    pub hard: BandReport,
    pub excluded: Vec<String>,
}

impl MetricsReport {
    pub fn band(&self, band: Band) -> &BandReport {
        match band {
            Band::Easy => &self.easy,
            Band::Mid => &self.mid,
            Band::Hard => &self.hard,
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<MetricsReport> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One evaluated sample: ground truth, generated image, and its band (when a
/// member of the evaluation set).
pub struct EvalItem {
    pub codepoint: u32,
    pub band: Option<Band>,
    pub ground_truth: GlyphImage,
    pub generated: GlyphImage,
}

struct Accumulator {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    uqi: Vec<f64>,
    rec_items: Vec<(GlyphImage, u32)>,
}

impl Accumulator {
    fn new() -> Accumulator {
        Accumulator {
            psnr: Vec::new(),
            ssim: Vec::new(),
            uqi: Vec::new(),
            rec_items: Vec::new(),
        }
    }

    fn finish(self, recognizer: Option<&Recognizer>) -> Result<BandReport> {
        if self.psnr.is_empty() {
            return Ok(BandReport::empty());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let recognition = match recognizer {
            Some(rec) => Some(recognition_accuracy(rec, &self.rec_items)?),
            None => None,
        };
        Ok(BandReport {
            count: self.psnr.len(),
            psnr_db: Some(mean(&self.psnr)),
            ssim: Some(mean(&self.ssim)),
            uqi: Some(mean(&self.uqi)),
            recognition_accuracy: recognition,
        })
    }
}

/// Computes PSNR/SSIM/UQI (and recognition accuracy when a recognizer is
/// supplied) per band and overall. Per-band values aggregate to the overall
/// value by sample-weighted mean.
pub fn evaluate_images(
    items: &[EvalItem],
    recognizer: Option<&Recognizer>,
    max_value: f64,
    excluded: Vec<String>,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut overall = Accumulator::new();
    let mut bands: [Accumulator; 3] = [Accumulator::new(), Accumulator::new(), Accumulator::new()];
    for item in items {
        let p = psnr(&item.ground_truth, &item.generated, max_value)?;
        let s = ssim(&item.ground_truth, &item.generated, max_value)?;
        let u = uqi(&item.ground_truth, &item.generated)?;
        let targets: Vec<&mut Accumulator> = match item.band {
            Some(Band::Easy) => vec![&mut overall, &mut bands[0]],
            Some(Band::Mid) => vec![&mut overall, &mut bands[1]],
            Some(Band::Hard) => vec![&mut overall, &mut bands[2]],
            None => vec![&mut overall],
        };
        for acc in targets {
            acc.psnr.push(p);
            acc.ssim.push(s);
            acc.uqi.push(u);
            acc.rec_items.push((item.generated.clone(), item.codepoint));
        }
    }
    let [easy, mid, hard] = bands;
    Ok(MetricsReport {
        overall: overall.finish(recognizer)?,
        easy: easy.finish(recognizer)?,
        mid: mid.finish(recognizer)?,
        hard: hard.finish(recognizer)?,
        excluded,
    })
}

/// Runs the generator (eval mode) over every evaluation-set codepoint that
/// has a pair, compares against ground truth, and aggregates. Codepoints of
/// the set with no pair are listed as excluded, not fatal.
pub fn evaluate_generator(
    gen: &Generator,
    pairs: &[GlyphPair],
    eval_set: &EvalSet,
    recognizer: Option<&Recognizer>,
    max_value: f64,
) -> Result<MetricsReport> {
    let mut excluded = Vec::new();
    let mut selected: Vec<&GlyphPair> = Vec::new();
    for band in Band::all() {
        for &cp in eval_set.band_members(band) {
            match pairs.iter().find(|p| p.codepoint == cp) {
                Some(pair) => selected.push(pair),
                None => excluded.push(format_codepoint(cp)),
            }
        }
    }
    if selected.is_empty() {
        return Err(Error::Data(
            "no evaluation-set codepoint has a glyph pair".into(),
        ));
    }

    let mut items = Vec::with_capacity(selected.len());
    for chunk in selected.chunks(8) {
        let sources: Vec<&GlyphImage> = chunk.iter().map(|p| &p.source).collect();
        let categories: Vec<usize> = chunk.iter().map(|p| p.category_id).collect();
        let batch = batch_to_tensor(&sources)?;
        let out = no_grad(|| gen.generate(&batch, &categories, Mode::Eval, None))?;
        let images = tensor_to_images(&out)?;
        for (pair, generated) in chunk.iter().zip(images) {
            items.push(EvalItem {
                codepoint: pair.codepoint,
                band: eval_set.band_of(pair.codepoint),
                ground_truth: pair.target.clone(),
                generated,
            });
        }
    }
    evaluate_images(&items, recognizer, max_value, excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> GlyphImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GlyphImage::new(16, 16, (0..256).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
    }

    fn items(n: usize, band: Option<Band>, identity: bool) -> Vec<EvalItem> {
        (0..n)
            .map(|i| {
                let gt = random_image(i as u64);
                let generated = if identity {
                    gt.clone()
                } else {
                    random_image(1000 + i as u64)
                };
                EvalItem {
                    codepoint: 0x4E00 + i as u32,
                    band,
                    ground_truth: gt,
                    generated,
                }
            })
            .collect()
    }

    #[test]
    fn identity_pipeline_scores_perfectly() {
        let report = evaluate_images(&items(3, Some(Band::Easy), true), None, 1.0, vec![]).unwrap();
        assert_eq!(report.overall.count, 3);
        assert_eq!(report.overall.ssim, Some(1.0));
        assert_eq!(report.overall.uqi, Some(1.0));
        assert_eq!(report.overall.psnr_db, Some(f64::INFINITY));
        assert_eq!(report.easy.count, 3);
        assert_eq!(report.mid.count, 0);
        assert_eq!(report.mid.ssim, None);
    }

    #[test]
    fn bands_aggregate_to_overall_by_weighted_mean() {
        let mut all = items(2, Some(Band::Easy), false);
        all.extend(items(3, Some(Band::Mid), false));
        all.extend(items(5, Some(Band::Hard), false));
        let report = evaluate_images(&all, None, 1.0, vec![]).unwrap();
        let weighted = (report.easy.ssim.unwrap() * 2.0
            + report.mid.ssim.unwrap() * 3.0
            + report.hard.ssim.unwrap() * 5.0)
            / 10.0;
        assert!((report.overall.ssim.unwrap() - weighted).abs() < 1e-12);
        assert_eq!(
            report.overall.count,
            report.easy.count + report.mid.count + report.hard.count
        );
    }

    #[test]
    fn json_roundtrip_reproduces_report_exactly() {
        let report = evaluate_images(
            &items(2, Some(Band::Easy), true),
            None,
            1.0,
            vec!["U+4E99".into()],
        )
        .unwrap();
        let text = report.to_json_string().unwrap();
        let back = MetricsReport::from_json_str(&text).unwrap();
        assert_eq!(back, report);
        // Infinity survives the round trip through its sentinel.
        assert_eq!(back.overall.psnr_db, Some(f64::INFINITY));
    }

    #[test]
    fn empty_evaluation_errors() {
        assert!(matches!(
            evaluate_images(&[], None, 1.0, vec![]),
            Err(Error::Data(_))
        ));
    }
}

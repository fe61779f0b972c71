//! Scene-grounding likelihood `P(S|y)`.
//!
//! Two variants:
//! - textual: 1 when every object the action mentions is in the scene's
//!   found-object set, `epsilon` otherwise;
//! - perception: the product of per-object detector scores, replaced by
//!   `epsilon` when a mentioned object is localized onto a different scene
//!   object (IoU at or above the configured threshold).

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BBox, CandidateAction, Detection, ObjectRef, SceneContext};
use crate::seeding::derive_seed;

/// Lower bound applied to perception products so the likelihood stays in (0,1].
pub const PERCEPTION_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GroundingError {
    #[error("both boxes have zero area")]
    ZeroArea,
    #[error("perception grounding requested but no detector is configured")]
    DetectorUnavailable,
    #[error("invalid grounding config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundingMode {
    #[default]
    Textual,
    Perception,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub epsilon: f64,
    pub mode: GroundingMode,
    pub iou_threshold: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            mode: GroundingMode::Textual,
            iou_threshold: 0.5,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<(), GroundingError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GroundingError::InvalidConfig(format!(
                "epsilon {} must lie in (0,1)",
                self.epsilon
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(GroundingError::InvalidConfig(format!(
                "iou_threshold {} must lie in (0,1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

pub fn ground_textual(candidate: &CandidateAction, scene: &SceneContext, cfg: &GroundingConfig) -> f64 {
    if candidate.mentioned_objects.iter().all(|o| scene.contains(o)) {
        1.0
    } else {
        cfg.epsilon
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GroundingError> {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 && area_b <= 0.0 {
        return Err(GroundingError::ZeroArea);
    }
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Open-vocabulary detector: scores how likely `object` is present in the
/// scene and where it is. Implementations must tolerate concurrent calls.
pub trait DetectionOracle: Send + Sync {
    fn detect(&self, object: &ObjectRef, scene: &SceneContext) -> Detection;
}

fn detection_for(
    object: &ObjectRef,
    scene: &SceneContext,
    detector: Option<&dyn DetectionOracle>,
) -> Result<Detection, GroundingError> {
    if let Some(d) = scene.detections().iter().find(|d| &d.object == object) {
        return Ok(d.clone());
    }
    detector
        .map(|det| det.detect(object, scene))
        .ok_or(GroundingError::DetectorUnavailable)
}

fn context_detections(
    scene: &SceneContext,
    detector: Option<&dyn DetectionOracle>,
) -> Result<Vec<Detection>, GroundingError> {
    if !scene.detections().is_empty() {
        return Ok(scene.detections().to_vec());
    }
    scene
        .objects()
        .iter()
        .map(|o| detection_for(o, scene, detector))
        .collect()
}

pub fn ground_perception(
    candidate: &CandidateAction,
    scene: &SceneContext,
    detector: Option<&dyn DetectionOracle>,
    cfg: &GroundingConfig,
) -> Result<f64, GroundingError> {
    if candidate.mentioned_objects.is_empty() {
        return Ok(1.0);
    }
    if detector.is_none() && scene.detections().is_empty() {
        return Err(GroundingError::DetectorUnavailable);
    }
    let mentioned: Vec<Detection> = candidate
        .mentioned_objects
        .iter()
        .map(|o| detection_for(o, scene, detector))
        .collect::<Result<_, _>>()?;
    let context = context_detections(scene, detector)?;

    for m in &mentioned {
        for c in context.iter().filter(|c| c.object != m.object) {
            match iou(&m.bbox, &c.bbox) {
                Ok(v) if v >= cfg.iou_threshold => return Ok(cfg.epsilon),
                Ok(_) | Err(GroundingError::ZeroArea) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let product: f64 = mentioned.iter().map(|d| d.score).product();
    Ok(product.max(PERCEPTION_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Seeded stand-in for a vision-language detector.
///
/// Objects in the scene's found-object set score from `present`, everything
/// else from `absent`. Scene objects sit in disjoint cells of a 4x4 grid; an
/// absent object is dropped onto an existing object's cell with probability
/// `duplicate_rate`, otherwise it gets a small box that overlaps nothing much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedDetector {
    pub seed: u64,
    pub present: BetaParams,
    pub absent: BetaParams,
    pub duplicate_rate: f64,
}

impl Default for SimulatedDetector {
    fn default() -> Self {
        Self {
            seed: 0,
            present: BetaParams { alpha: 8.0, beta: 1.5 },
            absent: BetaParams { alpha: 1.5, beta: 6.0 },
            duplicate_rate: 0.3,
        }
    }
}

const GRID: usize = 4;

fn grid_cell(index: usize) -> BBox {
    let cell = 1.0 / GRID as f64;
    let (row, col) = ((index / GRID) % GRID, index % GRID);
    let pad = cell * 0.1;
    BBox {
        x_min: col as f64 * cell + pad,
        y_min: row as f64 * cell + pad,
        x_max: (col + 1) as f64 * cell - pad,
        y_max: (row + 1) as f64 * cell - pad,
    }
}

impl SimulatedDetector {
    fn rng_for(&self, object: &ObjectRef, scene: &SceneContext) -> StdRng {
        let seed = self.seed.to_le_bytes();
        let parts = std::iter::once(&seed[..])
            .chain(scene.objects().iter().map(|o| o.canonical_name().as_bytes()))
            .chain(std::iter::once(object.canonical_name().as_bytes()));
        StdRng::seed_from_u64(derive_seed(parts))
    }
}

impl DetectionOracle for SimulatedDetector {
    fn detect(&self, object: &ObjectRef, scene: &SceneContext) -> Detection {
        let mut rng = self.rng_for(object, scene);
        let position = scene.objects().iter().position(|o| o == object);
        let params = if position.is_some() { self.present } else { self.absent };
        let score = Beta::new(params.alpha, params.beta)
            .map(|b| b.sample(&mut rng))
            .unwrap_or(0.5)
            .clamp(0.0, 1.0);
        let bbox = match position {
            Some(i) => grid_cell(i),
            None if !scene.objects().is_empty() && rng.random_bool(self.duplicate_rate.clamp(0.0, 1.0)) => {
                grid_cell(rng.random_range(0..scene.objects().len()))
            }
            None => {
                let size = 0.04;
                let x = rng.random_range(0.0..1.0 - size);
                let y = rng.random_range(0.0..1.0 - size);
                BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x + size,
                    y_max: y + size,
                }
            }
        };
        Detection {
            object: object.clone(),
            bbox,
            score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Lexicon;
    use approx::assert_abs_diff_eq;

    fn lex() -> Lexicon {
        Lexicon::new()
            .with_attributes(["blue", "yellow", "green", "gold"])
            .with_nouns(["block", "bowl"])
    }

    fn scene(names: &[&str]) -> SceneContext {
        let l = lex();
        SceneContext::new(names.iter().map(|n| l.object(n)).collect(), "table").unwrap()
    }

    fn cand(text: &str) -> CandidateAction {
        CandidateAction::new('A', text, &lex()).unwrap()
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn textual_all_present() {
        let s = scene(&["blue bowl", "yellow block", "green block"]);
        let cfg = GroundingConfig::default();
        assert_eq!(ground_textual(&cand("put the blue bowl on the yellow block"), &s, &cfg), 1.0);
    }

    #[test]
    fn textual_hallucinated_object() {
        let s = scene(&["blue bowl", "yellow block"]);
        let cfg = GroundingConfig::default();
        assert_eq!(ground_textual(&cand("pick up the gold bowl"), &s, &cfg), cfg.epsilon);
    }

    #[test]
    fn textual_vacuous() {
        let s = scene(&["blue bowl"]);
        assert_eq!(ground_textual(&cand("wait here"), &s, &GroundingConfig::default()), 1.0);
    }

    #[test]
    fn iou_examples() {
        let full = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 0.2, 0.2), &bx(0.5, 0.5, 0.9, 0.9)).unwrap(), 0.0);
        assert_abs_diff_eq!(iou(&full, &bx(0.0, 0.0, 0.5, 1.0)).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn iou_degenerate() {
        let point = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&point, &point), Err(GroundingError::ZeroArea));
        assert_eq!(iou(&point, &bx(0.0, 0.0, 1.0, 1.0)).unwrap(), 0.0);
    }

    fn det_scene(entries: &[(&str, BBox, f64)]) -> SceneContext {
        let l = lex();
        let objs = entries.iter().map(|(n, _, _)| l.object(n)).collect();
        let dets = entries
            .iter()
            .map(|(n, b, s)| Detection::new(l.object(n), *b, *s).unwrap())
            .collect();
        SceneContext::new(objs, "table").unwrap().with_detections(dets)
    }

    #[test]
    fn perception_products() {
        let s = det_scene(&[
            ("blue bowl", bx(0.0, 0.0, 0.2, 0.2), 0.9),
            ("yellow block", bx(0.5, 0.5, 0.7, 0.7), 0.8),
        ]);
        let cfg = GroundingConfig::default();
        assert_eq!(ground_perception(&cand("lift the blue bowl"), &s, None, &cfg).unwrap(), 0.9);
        let both = ground_perception(&cand("put the blue bowl on the yellow block"), &s, None, &cfg).unwrap();
        assert_abs_diff_eq!(both, 0.72, epsilon = 1e-12);
    }

    struct Fixed(Detection);
    impl DetectionOracle for Fixed {
        fn detect(&self, _: &ObjectRef, _: &SceneContext) -> Detection {
            self.0.clone()
        }
    }

    #[test]
    fn perception_duplicate_localization() {
        let s = det_scene(&[
            ("blue bowl", bx(0.0, 0.0, 0.2, 0.2), 0.9),
            ("yellow block", bx(0.5, 0.5, 0.7, 0.7), 0.8),
        ]);
        // gold bowl detected on top of the blue bowl: IoU = 0.8
        let gold = Detection::new(lex().object("gold bowl"), bx(0.0, 0.0, 0.2, 0.16), 0.95).unwrap();
        assert_abs_diff_eq!(iou(&gold.bbox, &bx(0.0, 0.0, 0.2, 0.2)).unwrap(), 0.8, epsilon = 1e-12);
        let cfg = GroundingConfig::default();
        let oracle = Fixed(gold);
        let v = ground_perception(&cand("pick up the gold bowl"), &s, Some(&oracle), &cfg).unwrap();
        assert_eq!(v, cfg.epsilon);
    }

    #[test]
    fn perception_requires_detector() {
        let s = scene(&["blue bowl"]);
        let err = ground_perception(&cand("lift the blue bowl"), &s, None, &GroundingConfig::default());
        assert_eq!(err, Err(GroundingError::DetectorUnavailable));
    }

    #[test]
    fn simulated_detector_is_deterministic_and_separates() {
        let s = scene(&["blue bowl", "yellow block", "green block"]);
        let det = SimulatedDetector {
            seed: 3,
            duplicate_rate: 0.0,
            ..Default::default()
        };
        let cfg = GroundingConfig::default();
        let a = ground_perception(&cand("put the blue bowl on the yellow block"), &s, Some(&det), &cfg).unwrap();
        let b = ground_perception(&cand("put the blue bowl on the yellow block"), &s, Some(&det), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a <= 1.0);
        // no duplicate suppression for objects sitting in their own cells
        let own = ground_perception(&cand("lift the green block"), &s, Some(&det), &cfg).unwrap();
        assert!(own > cfg.epsilon);
    }

    #[test]
    fn config_validation() {
        assert!(GroundingConfig::default().validate().is_ok());
        let bad = GroundingConfig {
            epsilon: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }


    fn arb_box() -> impl proptest::strategy::Strategy<Value = BBox> {
        use proptest::prelude::*;
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c, d)| BBox {
            x_min: a.min(b),
            x_max: a.max(b),
            y_min: c.min(d),
            y_max: c.max(d),
        })
    }

    proptest::proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            match (iou(&a, &b), iou(&b, &a)) {
                (Ok(x), Ok(y)) => {
                    proptest::prop_assert!((x - y).abs() < 1e-15);
                    proptest::prop_assert!((0.0..=1.0).contains(&x));
                }
                (Err(_), Err(_)) => {}
                other => proptest::prop_assert!(false, "asymmetric result {:?}", other),
            }
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            if a.area() > 0.0 {
                proptest::prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn perception_monotone_in_scores(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0, bump in 0.0f64..=1.0) {
            let l = lex();
            let (a, b) = (l.object("blue block"), l.object("yellow bowl"));
            let far = |o: &ObjectRef, x: f64, s: f64| Detection {
                object: o.clone(),
                bbox: BBox { x_min: x, y_min: 0.0, x_max: x + 0.2, y_max: 0.2 },
                score: s,
            };
            let cand = CandidateAction {
                label: 'A',
                text: "put the blue block in the yellow bowl".into(),
                mentioned_objects: vec![a.clone(), b.clone()],
            };
            let cfg = GroundingConfig::default();
            let lower = SceneContext::new(vec![a.clone(), b.clone()], "")
                .unwrap()
                .with_detections(vec![far(&a, 0.0, s1), far(&b, 0.5, s2)]);
            let higher = SceneContext::new(vec![a.clone(), b.clone()], "")
                .unwrap()
                .with_detections(vec![far(&a, 0.0, (s1 + bump).min(1.0)), far(&b, 0.5, s2)]);
            let x = ground_perception(&cand, &lower, None, &cfg).unwrap();
            let y = ground_perception(&cand, &higher, None, &cfg).unwrap();
            proptest::prop_assert!(y >= x);
            proptest::prop_assert!((PERCEPTION_FLOOR..=1.0).contains(&x));
        }
    }
}

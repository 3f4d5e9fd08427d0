//! Dual-criteria average precision over detected groups.
//!
//! A predicted group counts as a true positive only if its member set
//! overlaps the ground truth strongly enough (IoU at or above a threshold)
//! AND its attended point lands close enough (distance strictly below a
//! threshold; an infinite threshold disables the distance test).
//! Predictions are ranked by confidence across all scenes and matched
//! greedily, one to one, within their own scene.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PredictedGroup;
use crate::scene::{GroupAnnotation, Scene};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("overlap of two empty member sets is undefined")]
    EmptyMembers,
    #[error("point ({0}, {1}) outside [0,1]^2")]
    PointOutOfRange(f64, f64),
    #[error("no ground-truth groups in any record; AP is undefined")]
    NoGroundTruth,
    #[error("bad threshold: {0}")]
    BadThreshold(String),
}

/// Predictions and annotations of one scene, the unit of evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub predicted: Vec<PredictedGroup>,
    pub ground_truth: Vec<GroupAnnotation>,
}

impl EvalRecord {
    pub fn from_scene(scene: &Scene, predicted: Vec<PredictedGroup>) -> Self {
        EvalRecord {
            scene_id: scene.scene_id.clone(),
            predicted,
            ground_truth: scene.groups.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub iou_thresholds: Vec<f64>,
    pub dist_thresholds: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid {
            iou_thresholds: vec![0.5, 1.0],
            dist_thresholds: vec![0.05, 0.1, f64::INFINITY],
        }
    }
}

impl ThresholdGrid {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(MetricsError::BadThreshold(format!(
                    "iou threshold {t} not in (0,1]"
                )));
            }
        }
        for &t in &self.dist_thresholds {
            if !(t > 0.0) {
                return Err(MetricsError::BadThreshold(format!(
                    "dist threshold {t} not positive"
                )));
            }
        }
        Ok(())
    }
}

/// Intersection over union of two member index sets.
pub fn group_iou(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.is_empty() && b.is_empty() {
        return Err(MetricsError::EmptyMembers);
    }
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    Ok(inter / union)
}

/// Euclidean distance between two points in normalized coordinates.
pub fn group_dist(a: (f64, f64), b: (f64, f64)) -> Result<f64, MetricsError> {
    for &(x, y) in &[a, b] {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(MetricsError::PointOutOfRange(x, y));
        }
    }
    Ok(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the precision envelope over all recall points.
    AllPoint,
    /// Mean of the envelope sampled at recalls 0.0, 0.1, ..., 1.0.
    ElevenPoint,
}

/// Rank every prediction and mark true positives under the dual criteria.
/// Returns the TP flags in rank order plus the total ground-truth count.
fn rank_and_match(
    records: &[EvalRecord],
    theta_iou: f64,
    theta_dist: f64,
) -> Result<(Vec<bool>, usize), MetricsError> {
    let g_total: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    if g_total == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        for pi in 0..r.predicted.len() {
            order.push((ri, pi));
        }
    }
    order.sort_by(|&(ra, pa), &(rb, pb)| {
        let ca = records[ra].predicted[pa].confidence;
        let cb = records[rb].predicted[pb].confidence;
        cb.total_cmp(&ca).then(ra.cmp(&rb)).then(pa.cmp(&pb))
    });
    let mut gt_used: Vec<Vec<bool>> = records
        .iter()
        .map(|r| vec![false; r.ground_truth.len()])
        .collect();
    let mut tp = Vec::with_capacity(order.len());
    for &(ri, pi) in &order {
        let pred = &records[ri].predicted[pi];
        // Candidate annotations in ascending distance; the first unmatched
        // one passing both criteria wins.
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for (gi, gt) in records[ri].ground_truth.iter().enumerate() {
            if gt_used[ri][gi] {
                continue;
            }
            candidates.push((group_dist(pred.sa_point, gt.sa_point)?, gi));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut hit = false;
        for (dist, gi) in candidates {
            if dist >= theta_dist {
                break;
            }
            let iou = group_iou(&pred.members, &records[ri].ground_truth[gi].members)?;
            if iou >= theta_iou {
                gt_used[ri][gi] = true;
                hit = true;
                break;
            }
        }
        tp.push(hit);
    }
    Ok((tp, g_total))
}

pub fn group_ap_with(
    records: &[EvalRecord],
    theta_iou: f64,
    theta_dist: f64,
    interp: Interpolation,
) -> Result<f64, MetricsError> {
    let (tp, g_total) = rank_and_match(records, theta_iou, theta_dist)?;
    if tp.is_empty() {
        return Ok(0.0);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (i + 1) as f64);
    }
    match interp {
        Interpolation::AllPoint => {
            // Envelope: best precision achievable at this rank or deeper.
            let mut envelope = precision.clone();
            for i in (0..envelope.len() - 1).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            // Accumulate from +0.0; an empty iterator Sum starts at -0.0
            // and would print a negative zero in the tables.
            let mut sum = 0.0;
            for (t, e) in tp.iter().zip(envelope.iter()) {
                if *t {
                    sum += e;
                }
            }
            Ok(sum / g_total as f64)
        }
        Interpolation::ElevenPoint => {
            let mut hits = 0usize;
            let recall: Vec<f64> = tp
                .iter()
                .map(|&t| {
                    if t {
                        hits += 1;
                    }
                    hits as f64 / g_total as f64
                })
                .collect();
            let mut acc = 0.0;
            for step in 0..=10 {
                let r = step as f64 / 10.0;
                let best = precision
                    .iter()
                    .zip(recall.iter())
                    .filter(|(_, &rc)| rc >= r - 1e-12)
                    .map(|(&p, _)| p)
                    .fold(0.0f64, f64::max);
                acc += best;
            }
            Ok(acc / 11.0)
        }
    }
}

/// Cumulative (recall, precision) after each prediction in rank order.
/// Empty when there are no predictions at all.
pub fn pr_curve(
    records: &[EvalRecord],
    theta_iou: f64,
    theta_dist: f64,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (tp, g_total) = rank_and_match(records, theta_iou, theta_dist)?;
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        points.push((hits as f64 / g_total as f64, hits as f64 / (i + 1) as f64));
    }
    Ok(points)
}

pub fn group_ap(
    records: &[EvalRecord],
    theta_iou: f64,
    theta_dist: f64,
) -> Result<f64, MetricsError> {
    group_ap_with(records, theta_iou, theta_dist, Interpolation::AllPoint)
}

/// Serde adapter for floats that may be infinite.  JSON has no literal for
/// infinity (serde_json emits `null`, which cannot be read back), so we write
/// non-finite values as the strings "inf" / "-inf" and accept either form on
/// input.  TOML floats pass through the numeric arm untouched.
pub mod inf_f64 {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("not a float: {other:?}"))),
            },
        }
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        #[derive(Serialize, Deserialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|&x| Item(x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ApRow {
    pub theta_iou: f64,
    #[serde(with = "inf_f64")]
    pub theta_dist: f64,
    pub group_ap: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ApTable {
    pub rows: Vec<ApRow>,
}

fn fmt_dist(d: f64) -> String {
    if d.is_infinite() {
        "inf".into()
    } else {
        format!("{d}")
    }
}

impl ApTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("theta_iou,theta_dist,group_ap\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6}\n",
                r.theta_iou,
                fmt_dist(r.theta_dist),
                r.group_ap
            ));
        }
        out
    }

    /// Aligned text table, one row per IoU threshold.
    pub fn render(&self) -> String {
        let mut ious: Vec<f64> = Vec::new();
        let mut dists: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !ious.iter().any(|&v| v == r.theta_iou) {
                ious.push(r.theta_iou);
            }
            if !dists.iter().any(|&v| v.total_cmp(&r.theta_dist).is_eq()) {
                dists.push(r.theta_dist);
            }
        }
        let mut out = format!("{:>12}", "GroupAP");
        for d in &dists {
            out.push_str(&format!("{:>12}", format!("d<{}", fmt_dist(*d))));
        }
        out.push('\n');
        for &iou in &ious {
            out.push_str(&format!("{:>12}", format!("iou>={iou}")));
            for &d in &dists {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.theta_iou == iou && r.theta_dist.total_cmp(&d).is_eq())
                    .map(|r| format!("{:.4}", r.group_ap))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!("{cell:>12}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, theta_iou: f64, theta_dist: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.theta_iou == theta_iou && r.theta_dist.total_cmp(&theta_dist).is_eq())
            .map(|r| r.group_ap)
    }
}

/// AP for every cell of the threshold grid, in grid order.
pub fn evaluate(records: &[EvalRecord], grid: &ThresholdGrid) -> Result<ApTable, MetricsError> {
    evaluate_with(records, grid, Interpolation::AllPoint)
}

pub fn evaluate_with(
    records: &[EvalRecord],
    grid: &ThresholdGrid,
    interp: Interpolation,
) -> Result<ApTable, MetricsError> {
    grid.validate()?;
    let mut rows = Vec::new();
    for &iou in &grid.iou_thresholds {
        for &dist in &grid.dist_thresholds {
            rows.push(ApRow {
                theta_iou: iou,
                theta_dist: dist,
                group_ap: group_ap_with(records, iou, dist, interp)?,
            });
        }
    }
    Ok(ApTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(members: &[usize], p: (f64, f64)) -> GroupAnnotation {
        GroupAnnotation {
            members: members.to_vec(),
            sa_point: p,
            sa_box: [
                (p.0 - 0.05).max(0.0),
                (p.1 - 0.05).max(0.0),
                (p.0 + 0.05).min(1.0),
                (p.1 + 0.05).min(1.0),
            ],
        }
    }

    fn pred(members: &[usize], p: (f64, f64), conf: f64) -> PredictedGroup {
        PredictedGroup {
            members: members.to_vec(),
            sa_point: p,
            confidence: conf,
        }
    }

    fn one_record(
        predicted: Vec<PredictedGroup>,
        ground_truth: Vec<GroupAnnotation>,
    ) -> Vec<EvalRecord> {
        vec![EvalRecord {
            scene_id: "t".into(),
            predicted,
            ground_truth,
        }]
    }

    #[test]
    fn iou_spot_values_and_symmetry() {
        assert_eq!(group_iou(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert!((group_iou(&[1, 2, 3], &[1, 2]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(group_iou(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(group_iou(&[0], &[]).unwrap(), 0.0);
        assert!(group_iou(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<usize> = (0..6).filter(|_| rng.gen_bool(0.5)).collect();
            let b: Vec<usize> = (0..6).filter(|_| rng.gen_bool(0.5)).collect();
            if a.is_empty() && b.is_empty() {
                continue;
            }
            let ab = group_iou(&a, &b).unwrap();
            assert_eq!(ab, group_iou(&b, &a).unwrap());
            assert_eq!(ab == 1.0, a == b);
        }
    }

    #[test]
    fn dist_spot_values_and_range_check() {
        assert_eq!(group_dist((0.3, 0.7), (0.3, 0.7)).unwrap(), 0.0);
        assert!((group_dist((0.3, 0.4), (0.0, 0.0)).unwrap() - 0.5).abs() < 1e-12);
        assert!((group_dist((0.0, 0.0), (1.0, 1.0)).unwrap() - 1.41421356).abs() < 1e-8);
        assert!(group_dist((1.2, 0.0), (0.0, 0.0)).is_err());
        assert!(group_dist((0.0, 0.0), (0.0, -0.1)).is_err());
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let records = one_record(
            vec![pred(&[0, 1], (0.4, 0.4), 0.9)],
            vec![gt(&[0, 1], (0.4, 0.4))],
        );
        let table = evaluate(&records, &ThresholdGrid::default()).unwrap();
        assert_eq!(table.rows.len(), 6);
        for r in &table.rows {
            assert_eq!(r.group_ap, 1.0, "failed at {:?}", r);
        }
    }

    #[test]
    fn all_false_positives_score_positive_zero() {
        let records = one_record(
            vec![pred(&[2, 3], (0.9, 0.9), 0.8)],
            vec![gt(&[0, 1], (0.1, 0.1))],
        );
        let ap = group_ap(&records, 0.5, 0.05).unwrap();
        // An empty f64 Sum starts at -0.0 and negative zero would leak
        // into the printed tables.
        assert_eq!(ap.to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn distance_threshold_straddle() {
        let records = one_record(
            vec![pred(&[0, 1], (0.47, 0.4), 0.9)], // dist 0.07 from GT
            vec![gt(&[0, 1], (0.4, 0.4))],
        );
        assert_eq!(group_ap(&records, 1.0, 0.1).unwrap(), 1.0);
        assert_eq!(group_ap(&records, 1.0, 0.05).unwrap(), 0.0);
        assert_eq!(group_ap(&records, 1.0, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn distance_test_is_strict_and_iou_test_inclusive() {
        // 0.5 and 0.25 are exact in binary, so the distance is exactly
        // 0.25 and sits right on the threshold.
        let records = one_record(
            vec![pred(&[0, 1], (0.5, 0.4), 0.9)],
            vec![gt(&[0, 1], (0.25, 0.4))],
        );
        assert_eq!(group_ap(&records, 1.0, 0.25).unwrap(), 0.0);
        assert_eq!(group_ap(&records, 1.0, 0.2500001).unwrap(), 1.0);
        // IoU exactly at the threshold counts.
        let records = one_record(
            vec![pred(&[0, 1, 2, 3], (0.4, 0.4), 0.9)], // IoU 0.5 vs {0,1}
            vec![gt(&[0, 1], (0.4, 0.4))],
        );
        assert_eq!(group_ap(&records, 0.5, 0.1).unwrap(), 1.0);
        assert_eq!(group_ap(&records, 0.75, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_mixed_ranking() {
        // Ranked: TP (0.9), FP (0.8), TP (0.7) over two GT groups.
        // Precisions 1, 1/2, 2/3; envelope at the TP ranks 1 and 2/3.
        let records = one_record(
            vec![
                pred(&[0, 1], (0.2, 0.2), 0.9),
                pred(&[4, 5], (0.9, 0.9), 0.8),
                pred(&[2, 3], (0.7, 0.7), 0.7),
            ],
            vec![gt(&[0, 1], (0.2, 0.2)), gt(&[2, 3], (0.7, 0.7))],
        );
        let ap = group_ap(&records, 1.0, 0.05).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        let ap11 = group_ap_with(&records, 1.0, 0.05, Interpolation::ElevenPoint).unwrap();
        assert!((ap11 - 28.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_predictions_yield_one_true_positive() {
        let records = one_record(
            vec![
                pred(&[0, 1], (0.3, 0.3), 0.9),
                pred(&[0, 1], (0.3, 0.3), 0.8),
            ],
            vec![gt(&[0, 1], (0.3, 0.3))],
        );
        // Precisions 1, 1/2; only rank 1 is a TP.
        assert_eq!(group_ap(&records, 1.0, 0.1).unwrap(), 1.0);
        let (tp, _) = rank_and_match(&records, 1.0, 0.1).unwrap();
        assert_eq!(tp, vec![true, false]);
    }

    #[test]
    fn closer_annotation_is_consumed_first() {
        let records = one_record(
            vec![
                pred(&[0, 1], (0.50, 0.5), 0.9),
                pred(&[0, 1], (0.56, 0.5), 0.8),
            ],
            vec![gt(&[0, 1], (0.52, 0.5)), gt(&[0, 1], (0.58, 0.5))],
        );
        // The first prediction could match either annotation; taking the
        // nearer one leaves the second annotation for the second
        // prediction, so both are TPs.
        assert_eq!(group_ap(&records, 1.0, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn missing_ground_truth_is_an_error_and_no_predictions_score_zero() {
        let records = one_record(vec![pred(&[0, 1], (0.3, 0.3), 0.9)], vec![]);
        assert!(matches!(
            group_ap(&records, 0.5, 0.1),
            Err(MetricsError::NoGroundTruth)
        ));
        let records = one_record(vec![], vec![gt(&[0, 1], (0.3, 0.3))]);
        assert_eq!(group_ap(&records, 0.5, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn csv_and_render_formats() {
        let records = one_record(
            vec![pred(&[0, 1], (0.4, 0.4), 0.9)],
            vec![gt(&[0, 1], (0.4, 0.4))],
        );
        let table = evaluate(&records, &ThresholdGrid::default()).unwrap();
        let csv = table.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "theta_iou,theta_dist,group_ap");
        assert_eq!(lines.next().unwrap(), "0.5,0.05,1.000000");
        assert!(csv.contains("1,inf,1.000000"));
        assert_eq!(csv.lines().count(), 7);
        let rendered = table.render();
        assert!(rendered.contains("d<inf"));
        assert!(rendered.contains("iou>=1"));
        assert_eq!(table.get(1.0, f64::INFINITY).unwrap(), 1.0);
    }

    fn random_records(rng: &mut ChaCha8Rng, scenes: usize) -> Vec<EvalRecord> {
        (0..scenes)
            .map(|si| {
                let n_gt = rng.gen_range(0..3);
                let ground_truth = (0..n_gt)
                    .map(|_| {
                        let base = rng.gen_range(0..4) * 2;
                        gt(
                            &[base, base + 1],
                            (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                        )
                    })
                    .collect();
                let n_pred = rng.gen_range(0..5);
                let predicted = (0..n_pred)
                    .map(|_| {
                        let base = rng.gen_range(0..4) * 2;
                        pred(
                            &[base, base + 1],
                            (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                            rng.gen_range(0.0..1.0),
                        )
                    })
                    .collect();
                EvalRecord {
                    scene_id: format!("r{si}"),
                    predicted,
                    ground_truth,
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn ap_is_bounded_and_monotone_in_thresholds(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records = random_records(&mut rng, 4);
            if records.iter().all(|r| r.ground_truth.is_empty()) {
                return Ok(());
            }
            let grid = ThresholdGrid::default();
            let table = evaluate(&records, &grid).unwrap();
            for r in &table.rows {
                prop_assert!((0.0..=1.0).contains(&r.group_ap));
            }
            for &d in &grid.dist_thresholds {
                let loose = table.get(0.5, d).unwrap();
                let strict = table.get(1.0, d).unwrap();
                prop_assert!(strict <= loose + 1e-12);
            }
            for &i in &grid.iou_thresholds {
                let a = table.get(i, 0.05).unwrap();
                let b = table.get(i, 0.1).unwrap();
                let c = table.get(i, f64::INFINITY).unwrap();
                prop_assert!(a <= b + 1e-12 && b <= c + 1e-12);
            }
        }
    }
}

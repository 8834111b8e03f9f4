use crate::model::data::GtBox;
use crate::model::decode::{iou, Detection};

/// All-point interpolated average precision of one class.
///
/// `per_image` pairs each image's detections with its ground truth.
pub fn average_precision(per_image: &[(Vec<Detection>, Vec<GtBox>)], class: usize, iou_threshold: f64) -> f64 {
    let n_gt: usize = per_image
        .iter()
        .map(|(_, g)| g.iter().filter(|b| b.class == class).count())
        .sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut dets: Vec<(f64, usize, [f64; 4])> = per_image
        .iter()
        .enumerate()
        .flat_map(|(i, (d, _))| d.iter().filter(|d| d.c == class).map(move |d| (d.f, i, d.bbox())))
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = per_image.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for (_, img, b) in &dets {
        let gts = &per_image[*img].1;
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class == class)
            .map(|(j, g)| (j, iou(*b, g.bbox())))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        let hit = match best {
            Some((j, v)) if v >= iou_threshold && !used[*img][j] => {
                used[*img][j] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &h) in tp.iter().enumerate() {
        hits += h as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // precision envelope, then area under the step curve
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Mean AP over `num_classes` classes at one IoU threshold.
pub fn mean_average_precision(per_image: &[(Vec<Detection>, Vec<GtBox>)], num_classes: usize, iou_threshold: f64) -> f64 {
    (0..num_classes)
        .map(|c| average_precision(per_image, c, iou_threshold))
        .sum::<f64>()
        / num_classes as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class: usize, x: f64) -> GtBox {
        GtBox { class, x, y: 0.5, w: 0.1, h: 0.1 }
    }

    fn det(f: f64, c: usize, x: f64) -> Detection {
        Detection { f, c, x, y: 0.5, w: 0.1, h: 0.1 }
    }

    #[test]
    fn perfect_detections_score_one() {
        let data = vec![(vec![det(0.9, 0, 0.2), det(0.8, 1, 0.6)], vec![gt(0, 0.2), gt(1, 0.6)])];
        assert_eq!(mean_average_precision(&data, 2, 0.5), 1.0);
    }

    #[test]
    fn hand_computed_ap() {
        // ranked: TP, FP, TP over 3 ground truths
        // recall 1/3, 1/3, 2/3; precision 1, 1/2, 2/3 → envelope 1, 2/3, 2/3
        // AP = 1/3·1 + 1/3·2/3 = 5/9
        let data = vec![(
            vec![det(0.9, 0, 0.1), det(0.8, 0, 0.9), det(0.7, 0, 0.3)],
            vec![gt(0, 0.1), gt(0, 0.3), gt(0, 0.5)],
        )];
        assert!((average_precision(&data, 0, 0.5) - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_count_as_false_positives() {
        let data = vec![(vec![det(0.9, 0, 0.2), det(0.8, 0, 0.2)], vec![gt(0, 0.2)])];
        assert_eq!(average_precision(&data, 0, 0.5), 1.0);
        let data = vec![(vec![det(0.9, 0, 0.7), det(0.8, 0, 0.2)], vec![gt(0, 0.2)])];
        assert_eq!(average_precision(&data, 0, 0.5), 0.5);
    }
}

use crate::codecs::{FaceCodes, LipDecoder};
use crate::error::{Error, Result};

/// Default lip gap below which a frame counts as closed, in scene units.
pub const DEFAULT_CLOSURE_THRESHOLD: f32 = 1e-2;

/// Frames whose signed lip gap is below `threshold`.
pub fn closure_frames(distances: &[f32], threshold: f32) -> Vec<usize> {
    distances
        .iter()
        .enumerate()
        .filter(|(_, &d)| d < threshold)
        .map(|(i, _)| i)
        .collect()
}

fn near(sorted: &[usize], f: usize, slack: usize) -> bool {
    let lo = sorted.partition_point(|&x| x + slack < f);
    sorted.get(lo).is_some_and(|&x| x <= f + slack)
}

/// F1 of two frame sets where a frame counts as matched if the other set has a
/// frame within `slack`. Both empty scores 1.
pub fn frame_set_f1(pred: &[usize], gt: &[usize], slack: usize) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut p = pred.to_vec();
    let mut g = gt.to_vec();
    p.sort_unstable();
    g.sort_unstable();
    let tp_p = p.iter().filter(|&&f| near(&g, f, slack)).count() as f64;
    let tp_g = g.iter().filter(|&&f| near(&p, f, slack)).count() as f64;
    let precision = tp_p / p.len() as f64;
    let recall = tp_g / g.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// F1 of lip-closure frames decoded from predicted and reference face codes.
pub fn f1_lip_closures(pred: &FaceCodes, gt: &FaceCodes, decoder: &LipDecoder, threshold: f32, slack: usize) -> Result<f64> {
    if pred.frames() != gt.frames() {
        return Err(Error::LengthMismatch(pred.frames(), gt.frames()));
    }
    let p = closure_frames(&decoder.lip_distances(pred)?, threshold);
    let g = closure_frames(&decoder.lip_distances(gt)?, threshold);
    Ok(frame_set_f1(&p, &g, slack))
}

/// F1 of sparse events with one-to-one greedy matching within `slack` frames.
pub fn event_f1(pred: &[usize], gt: &[usize], slack: usize) -> f64 {
    f1_from_counts(event_matches(pred, gt, slack), pred.len(), gt.len())
}

/// F1 from matched, predicted and reference counts. Nothing to find and nothing found scores 1.
pub fn f1_from_counts(tp: usize, predicted: usize, actual: usize) -> f64 {
    if predicted == 0 && actual == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / actual as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Number of one-to-one matches, each predicted event taking the nearest free reference within `slack`.
pub fn event_matches(pred: &[usize], gt: &[usize], slack: usize) -> usize {
    let mut used = vec![false; gt.len()];
    let mut tp = 0usize;
    for &p in pred {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, &g)| !used[*j] && p.abs_diff(g) <= slack)
            .min_by_key(|(_, &g)| p.abs_diff(g));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Rising crossings of `level`: frames `i` with `x[i-1] < level <= x[i]`.
pub fn rising_crossings(x: &[f32], level: f32) -> Vec<usize> {
    (1..x.len()).filter(|&i| x[i - 1] < level && x[i] >= level).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndgrad::Tensor;

    #[test]
    fn hand_counted_case() {
        // gt closures at 10, 20, 30, 40; pred at 11, 20, 29 (matched), 60 (spurious); 40 missed
        let gt = [10, 20, 30, 40];
        let pred = [11, 20, 29, 60];
        assert_eq!(frame_set_f1(&pred, &gt, 1), 0.75);
        assert_eq!(frame_set_f1(&gt, &gt, 1), 1.0);
        assert_eq!(frame_set_f1(&[], &gt, 1), 0.0);
        assert_eq!(frame_set_f1(&[], &[], 1), 1.0);
    }

    #[test]
    fn decoded_closures() {
        let dec = LipDecoder::new(4, 1.0, 0.5).unwrap();
        let open = [0.05f32, 0.0, 0.1, -0.1];
        let shut = [0.0f32, 0.3, 0.2, 0.0];
        let mut rows = Vec::new();
        for i in 0..20 {
            rows.extend_from_slice(if i % 5 == 0 { &shut } else { &open });
        }
        let gt = FaceCodes::new(Tensor::new(&[20, 4], rows).unwrap()).unwrap();
        assert_eq!(f1_lip_closures(&gt, &gt, &dec, DEFAULT_CLOSURE_THRESHOLD, 1).unwrap(), 1.0);
        let none = FaceCodes::new(Tensor::new(&[20, 4], open.repeat(20)).unwrap()).unwrap();
        assert_eq!(f1_lip_closures(&none, &gt, &dec, DEFAULT_CLOSURE_THRESHOLD, 1).unwrap(), 0.0);
        let short = FaceCodes::new(Tensor::new(&[2, 4], open.repeat(2)).unwrap()).unwrap();
        assert!(matches!(
            f1_lip_closures(&short, &gt, &dec, DEFAULT_CLOSURE_THRESHOLD, 1),
            Err(Error::LengthMismatch(2, 20))
        ));
    }

    #[test]
    fn events_match_one_to_one() {
        assert_eq!(event_f1(&[100, 103], &[101], 5), 2.0 * 0.5 * 1.0 / 1.5);
        assert_eq!(event_f1(&[100], &[120], 5), 0.0);
        assert_eq!(rising_crossings(&[0.0, 0.2, 0.5, 0.9, 0.1, 0.6], 0.5), vec![2, 5]);
    }
}

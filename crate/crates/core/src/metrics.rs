//! Image- and pixel-level evaluation metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mask;

/// Default false-positive-rate budget for AUPRO.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, using midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their average
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over the distinct score thresholds,
/// highest first. Tied scores enter the ranking together.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive".into()));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

fn check_maps(maps: &[Array2<f64>], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::invalid(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    for (i, (m, g)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != g.dim() {
            return Err(Error::invalid(format!(
                "map {i} is {:?} but its mask is {:?}",
                m.dim(),
                g.dim()
            )));
        }
    }
    Ok(())
}

/// AUROC over all pixels of all maps pooled together.
pub fn p_auroc(maps: &[Array2<f64>], masks: &[Mask]) -> Result<f64> {
    check_maps(maps, masks)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    auroc(&scores, &labels)
}

/// Labels 8-connected foreground components with a union-find pass.
/// Background is 0; components are numbered from 1 in raster order of their
/// first pixel. Returns the label image and the component count.
pub fn connected_components(mask: &Mask) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    fn union(parent: &mut [usize], a: usize, b: usize) {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let here = r * w + c;
            // previously visited neighbours: W, NW, N, NE
            let mut neighbours = Vec::with_capacity(4);
            if c > 0 {
                neighbours.push((r, c - 1));
            }
            if r > 0 {
                if c > 0 {
                    neighbours.push((r - 1, c - 1));
                }
                neighbours.push((r - 1, c));
                if c + 1 < w {
                    neighbours.push((r - 1, c + 1));
                }
            }
            for (nr, nc) in neighbours {
                if mask[[nr, nc]] {
                    union(&mut parent, here, nr * w + nc);
                }
            }
        }
    }
    let mut labels = Array2::zeros((h, w));
    let mut root_label = vec![0usize; h * w];
    let mut count = 0;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] {
                let root = find(&mut parent, r * w + c);
                if root_label[root] == 0 {
                    count += 1;
                    root_label[root] = count;
                }
                labels[[r, c]] = root_label[root];
            }
        }
    }
    (labels, count)
}

/// One operating point of the per-region-overlap curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Sweeps every distinct map value as a threshold (`pixel ≥ t` is predicted
/// anomalous). At each point PRO is the mean over ground-truth components of
/// the fraction of the component covered, and FPR is measured over all
/// normal pixels. Points come out in ascending FPR.
pub fn pro_curve(maps: &[Array2<f64>], masks: &[Mask]) -> Result<Vec<ProPoint>> {
    check_maps(maps, masks)?;
    let mut region_sizes: Vec<usize> = Vec::new();
    // (value, region index or None for normal pixels)
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut negatives = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        let (labels, count) = connected_components(mask);
        let offset = region_sizes.len();
        region_sizes.extend(std::iter::repeat_n(0, count));
        for ((idx, &v), &lab) in map.indexed_iter().zip(labels.iter()) {
            let _ = idx;
            if v.is_nan() {
                return Err(Error::invalid("anomaly map contains NaN"));
            }
            if lab == 0 {
                negatives += 1;
                pixels.push((v, None));
            } else {
                region_sizes[offset + lab - 1] += 1;
                pixels.push((v, Some(offset + lab - 1)));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric(
            "AUPRO needs at least one anomalous region".into(),
        ));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_regions = region_sizes.len() as f64;
    let mut covered = vec![0usize; region_sizes.len()];
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let mut curve = Vec::new();
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                Some(region) => {
                    covered[region] += 1;
                    overlap_sum += 1.0 / region_sizes[region] as f64;
                }
                None => fp += 1,
            }
            i += 1;
        }
        let fpr = if negatives == 0 {
            0.0
        } else {
            fp as f64 / negatives as f64
        };
        curve.push(ProPoint {
            threshold: t,
            fpr,
            pro: (overlap_sum / n_regions).min(1.0),
        });
    }
    Ok(curve)
}

/// Area under the PRO-vs-FPR curve on `[0, fpr_limit]`, divided by `fpr_limit`.
///
/// The curve starts at `(0, 0)` and is joined by straight segments through
/// every operating point whose FPR is within the budget; past the last such
/// point the PRO is held flat up to the limit.
pub fn aupro(maps: &[Array2<f64>], masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid("FPR limit must lie in (0, 1]"));
    }
    let curve = pro_curve(maps, masks)?;
    Ok(integrate_pro(&curve, fpr_limit))
}

fn integrate_pro(curve: &[ProPoint], fpr_limit: f64) -> f64 {
    let (mut x0, mut y0) = (0.0, 0.0);
    let mut area = 0.0;
    for p in curve.iter().filter(|p| p.fpr <= fpr_limit) {
        area += (p.fpr - x0) * (p.pro + y0) / 2.0;
        x0 = p.fpr;
        y0 = p.pro;
    }
    area += (fpr_limit - x0) * y0;
    (area / fpr_limit).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub name: String,
    pub label: bool,
    pub score: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub map_max: f64,
}

/// Summary of an evaluation run. Pixel metrics are absent when no sample has
/// a ground-truth mask with anomalous pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub i_auroc: f64,
    pub aupr: f64,
    pub p_auroc: Option<f64>,
    pub aupro: Option<f64>,
    pub fpr_limit: f64,
    pub samples: Vec<SampleScore>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Computes every metric from per-sample scores and pixel maps.
    pub fn compute(
        samples: Vec<SampleScore>,
        maps: &[Array2<f64>],
        masks: &[Mask],
        fpr_limit: f64,
        config: serde_json::Value,
    ) -> Result<Self> {
        let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
        let i_auroc = auroc(&scores, &labels)?;
        let ap = aupr(&scores, &labels)?;
        let has_regions = masks.iter().any(|m| m.iter().any(|v| *v));
        let (p_auroc, aupro_v) = if has_regions {
            (Some(p_auroc(maps, masks)?), Some(aupro(maps, masks, fpr_limit)?))
        } else {
            (None, None)
        };
        Ok(Self {
            i_auroc,
            aupr: ap,
            p_auroc,
            aupro: aupro_v,
            fpr_limit,
            samples,
            config,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,label,score,s_plus,s_minus,map_max\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.name, s.label as u8, s.score, s.s_plus, s.s_minus, s.map_max
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) pair counting.
    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auroc_matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..60).map(|_| (rng.random_range(0..12) as f64) / 4.0).collect();
            let mut labels: Vec<bool> = (0..60).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&scores, &labels).unwrap();
            assert!((a - auroc_pairs(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        let prevalence = aupr(&[0.3; 5], &[true, false, false, true, false]).unwrap();
        assert!((prevalence - 0.4).abs() < 1e-15);
        assert!(aupr(&[0.3, 0.1], &[false, false]).is_err());
        // ranks: P N P -> 1*(1/2) + 1*(2/3)/2 ...
        let ap = aupr(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn p_auroc_examples() {
        let mask = Mask::from_shape_fn((4, 4), |(r, c)| r < 2 && c < 3);
        let map = mask.mapv(|m| if m { 1.0 } else { 0.0 });
        assert_eq!(
            p_auroc(std::slice::from_ref(&map), std::slice::from_ref(&mask)).unwrap(),
            1.0
        );
        let inv = map.mapv(|v| 1.0 - v);
        assert_eq!(p_auroc(&[inv], std::slice::from_ref(&mask)).unwrap(), 0.0);
        assert!(p_auroc(&[map], &[Mask::from_elem((4, 5), false)]).is_err());
    }

    /// Flood fill with an explicit stack, 8-neighbourhood.
    fn flood_components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = mask.dim();
        let mut seen = Array2::from_elem((h, w), false);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !mask[[r, c]] || seen[[r, c]] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut stack = vec![(r, c)];
                seen[[r, c]] = true;
                while let Some((y, x)) = stack.pop() {
                    comp.push((y, x));
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if mask[[ny, nx]] && !seen[[ny, nx]] {
                                seen[[ny, nx]] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
                comp.sort_unstable();
                out.push(comp);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn components_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let mask = Mask::from_shape_fn((h, w), |_| rng.random_bool(0.45));
            let (labels, count) = connected_components(&mask);
            let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); count];
            for ((r, c), &l) in labels.indexed_iter() {
                if l > 0 {
                    groups[l - 1].push((r, c));
                }
            }
            for g in groups.iter_mut() {
                g.sort_unstable();
            }
            groups.sort();
            assert_eq!(groups, flood_components(&mask));
        }
    }

    #[test]
    fn diagonal_pixels_connect() {
        let mask = Mask::from_shape_fn((3, 3), |(r, c)| r == c);
        assert_eq!(connected_components(&mask).1, 1);
    }

    #[test]
    fn aupro_perfect_prediction() {
        let mask = Mask::from_shape_fn((4, 4), |(r, c)| (1..3).contains(&r) && (1..3).contains(&c));
        let map = mask.mapv(|m| if m { 1.0 } else { 0.0 });
        assert_eq!(aupro(&[map], &[mask], DEFAULT_FPR_LIMIT).unwrap(), 1.0);
    }

    #[test]
    fn aupro_zero_map() {
        let mask = Mask::from_shape_fn((4, 4), |(r, c)| r == 0 && c < 2);
        let map = Array2::zeros((4, 4));
        // the only threshold predicts everything: FPR 1, beyond the budget
        assert_eq!(aupro(&[map], &[mask], DEFAULT_FPR_LIMIT).unwrap(), 0.0);
    }

    #[test]
    fn aupro_two_regions_one_found() {
        let mask = Mask::from_shape_fn((8, 8), |(r, c)| (r < 2 && c < 2) || (r >= 5 && c >= 5));
        let map = Array2::from_shape_fn((8, 8), |(r, c)| if r < 2 && c < 2 { 1.0 } else { 0.0 });
        assert_eq!(aupro(&[map], &[mask], DEFAULT_FPR_LIMIT).unwrap(), 0.5);
    }

    #[test]
    fn aupro_requires_regions() {
        let mask = Mask::from_elem((4, 4), false);
        assert!(matches!(
            aupro(&[Array2::zeros((4, 4))], &[mask], 0.3),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn aupro_non_decreasing_in_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mask = Mask::from_shape_fn((12, 12), |_| rng.random_bool(0.2));
            if !mask.iter().any(|m| *m) {
                continue;
            }
            let map = Array2::from_shape_fn((12, 12), |(r, c)| {
                let base = if mask[[r, c]] { 0.3 } else { 0.0 };
                base + rng.random_range(0.0..1.0)
            });
            let mut prev = 0.0;
            for k in 1..=20 {
                let v = aupro(std::slice::from_ref(&map), std::slice::from_ref(&mask), k as f64 * 0.05).unwrap();
                assert!(v + 1e-12 >= prev, "limit {k}: {v} < {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn report_csv_has_row_per_sample() {
        let samples = vec![
            SampleScore {
                name: "a".into(),
                label: false,
                score: 0.2,
                s_plus: 0.9,
                s_minus: 0.1,
                map_max: 0.1,
            },
            SampleScore {
                name: "b".into(),
                label: true,
                score: 1.2,
                s_plus: 0.3,
                s_minus: 0.7,
                map_max: 0.5,
            },
        ];
        let report = EvalReport::compute(samples, &[], &[], 0.3, serde_json::Value::Null).unwrap();
        assert_eq!(report.i_auroc, 1.0);
        assert!(report.p_auroc.is_none());
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}

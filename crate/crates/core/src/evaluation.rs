//! Region similarity J, contour accuracy F and their mean.

use std::path::Path;

use crate::data::{read_prediction, BinaryMask, FeatureClip};
use crate::error::{Error, Result};

fn check_shapes(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{op}: mask shapes {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )))
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes("region_similarity", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Foreground pixels touching the background (4-neighbourhood) or the
/// image border.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

/// Default boundary tolerance: `ceil(0.008 · diagonal)` pixels.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

/// Pixels within Euclidean distance `radius` of any set pixel.
fn dilate(mask: &BinaryMask, radius: f64) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= r2)
        .collect();
    let mut out = BinaryMask::empty(h, w);
    for row in 0..h {
        for col in 0..w {
            if !mask.get(row, col) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (y, x) = (row as isize + dy, col as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
    }
    out
}

fn covered_fraction(points: &BinaryMask, region: &BinaryMask) -> f64 {
    let total = points.area();
    if total == 0 {
        return 0.0;
    }
    let hit = points
        .bits()
        .iter()
        .zip(region.bits())
        .filter(|(&p, &r)| p && r)
        .count();
    hit as f64 / total as f64
}

/// Boundary F-measure with tolerance `tol_radius` pixels; 1 when both masks
/// are empty, 0 when precision and recall are both 0.
pub fn contour_accuracy(pred: &BinaryMask, gt: &BinaryMask, tol_radius: f64) -> Result<f64> {
    check_shapes("contour_accuracy", pred, gt)?;
    if !(tol_radius >= 0.0 && tol_radius.is_finite()) {
        return Err(Error::Validation(format!(
            "contour tolerance must be >= 0, got {tol_radius}"
        )));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() && bg.is_empty() {
        return Ok(1.0);
    }
    let precision = covered_fraction(&bp, &dilate(&bg, tol_radius));
    let recall = covered_fraction(&bg, &dilate(&bp, tol_radius));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Frame-averaged metrics for one clip.
pub fn evaluate_clip(clip_id: &str, pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<ClipMetrics> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Missing(format!(
            "{clip_id}: {} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let (mut j, mut f) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        j += region_similarity(p, g)?;
        f += contour_accuracy(p, g, default_tolerance(g.height(), g.width()))?;
    }
    let n = gt.len() as f64;
    let (j, f) = (j / n, f / n);
    Ok(ClipMetrics {
        clip_id: clip_id.to_string(),
        j,
        f,
        jf: (j + f) / 2.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

impl MetricReport {
    /// Dataset means over clips, each clip (one referring expression)
    /// weighted equally.
    pub fn from_clips(clips: Vec<ClipMetrics>) -> Self {
        let n = clips.len().max(1) as f64;
        let j = clips.iter().map(|c| c.j).sum::<f64>() / n;
        let f = clips.iter().map(|c| c.f).sum::<f64>() / n;
        MetricReport {
            clips,
            j,
            f,
            jf: (j + f) / 2.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,J&F,J,F\n");
        for c in &self.clips {
            s.push_str(&format!("{},{},{},{}\n", c.clip_id, c.jf, c.j, c.f));
        }
        s.push_str(&format!("mean,{},{},{}\n", self.jf, self.j, self.f));
        s
    }

    /// Aligned plain-text table in percent.
    pub fn to_table(&self) -> String {
        let width = self
            .clips
            .iter()
            .map(|c| c.clip_id.len())
            .chain([4, 7])
            .max()
            .unwrap_or(4);
        let row = |name: &str, jf: f64, j: f64, f: f64| {
            format!(
                "{name:<width$}  {:>6.2}  {:>6.2}  {:>6.2}\n",
                jf * 100.0,
                j * 100.0,
                f * 100.0
            )
        };
        let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}\n", "clip", "J&F", "J", "F");
        for c in &self.clips {
            s.push_str(&row(&c.clip_id, c.jf, c.j, c.f));
        }
        s.push_str(&row("mean", self.jf, self.j, self.f));
        s
    }
}

/// Scores the predictions in `pred_dir` (one `<clip_id>.json` per clip)
/// against the target masks of `clips`, using up to `threads` workers.
pub fn evaluate_dataset(pred_dir: &Path, clips: &[FeatureClip], threads: usize) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(clips.len());
    let mut missing = Vec::new();
    for clip in clips {
        let path = pred_dir.join(format!("{}.json", clip.clip_id));
        if !path.exists() {
            missing.push(clip.clip_id.clone());
            preds.push(None);
            continue;
        }
        let p = read_prediction(&path)?;
        if p.rle.len() != clip.frames {
            missing.push(format!(
                "{} (frames {}..{})",
                clip.clip_id,
                p.rle.len().min(clip.frames),
                clip.frames
            ));
        }
        if p.mask_height != clip.mask_height || p.mask_width != clip.mask_width {
            return Err(Error::Validation(format!(
                "{}: predictions are {}x{}, ground truth is {}x{}",
                clip.clip_id, p.mask_height, p.mask_width, clip.mask_height, clip.mask_width
            )));
        }
        preds.push(Some(p));
    }
    if !missing.is_empty() {
        return Err(Error::Missing(missing.join(", ")));
    }
    let work = |i: usize| -> Result<ClipMetrics> {
        let clip = &clips[i];
        let pred = preds[i].as_ref().expect("checked above").masks()?;
        let gt: Vec<BinaryMask> = (0..clip.frames).map(|t| clip.target_mask(t)).collect();
        evaluate_clip(&clip.clip_id, &pred, &gt)
    };
    let results = parallel_map(clips.len(), threads, work);
    Ok(MetricReport::from_clips(results.into_iter().collect::<Result<_>>()?))
}

/// Maps `f` over `0..n` on up to `threads` scoped workers, keeping order.
pub fn parallel_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (k, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (i, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(k * chunk + i));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| on.contains(&(r, c)))
    }

    #[test]
    fn top_row_versus_left_column() {
        let p = mask(2, 2, &[(0, 0), (0, 1)]);
        let g = mask(2, 2, &[(0, 0), (1, 0)]);
        assert!((region_similarity(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let e = BinaryMask::empty(4, 4);
        let s = mask(4, 4, &[(1, 1)]);
        assert_eq!(region_similarity(&e, &e).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&e, &e, 1.0).unwrap(), 1.0);
        assert_eq!(region_similarity(&e, &s).unwrap(), 0.0);
        assert_eq!(contour_accuracy(&e, &s, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_far_apart() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(7, 7)]);
        assert_eq!(region_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(contour_accuracy(&a, &b, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = BinaryMask::empty(2, 3);
        let b = BinaryMask::empty(3, 2);
        assert!(matches!(region_similarity(&a, &b), Err(Error::Validation(_))));
        assert!(matches!(contour_accuracy(&a, &b, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let full = BinaryMask::full(5, 5);
        let b = boundary(&full);
        assert_eq!(b.area(), 16);
        assert!(!b.get(2, 2));
    }

    #[test]
    fn default_tolerance_rounds_up() {
        assert_eq!(default_tolerance(64, 64), 1.0);
        assert_eq!(default_tolerance(480, 854), 8.0);
    }

    #[test]
    fn table_and_csv_layout() {
        let r = MetricReport::from_clips(vec![
            ClipMetrics {
                clip_id: "a".into(),
                j: 1.0,
                f: 0.5,
                jf: 0.75,
            },
            ClipMetrics {
                clip_id: "b".into(),
                j: 0.0,
                f: 0.5,
                jf: 0.25,
            },
        ]);
        assert_eq!(r.jf, 0.5);
        assert!(r.to_csv().ends_with("mean,0.5,0.5,0.5\n"));
        let t = r.to_table();
        let widths: Vec<usize> = t.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
        assert!(t.contains(" 75.00"));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(11, 3, |i| i * i);
        assert_eq!(v, (0..11).map(|i| i * i).collect::<Vec<_>>());
    }
}

//! Evaluation metrics (IoU, boundary IoU, Score) and the tabular metrics log.

use crate::error::{Error, Result};
use crate::raster::Mask;
use std::fmt::Write as _;
use std::path::Path;

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
        return Err(Error::Contract(format!(
            "mask shapes differ: {}×{} vs {}×{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    if pred.data.iter().chain(&gt.data).any(|v| *v > 1) {
        return Err(Error::Contract("masks must be binary (0/1)".into()));
    }
    Ok(())
}

/// `|P∩G| / |P∪G|`; 1.0 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(iou_unchecked(&pred.data, &gt.data))
}

fn iou_unchecked(a: &[u8], b: &[u8]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        inter += (*x & *y) as usize;
        union += (*x | *y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Offsets of a digital disk of radius `d` (`dy² + dx² ≤ d²`).
pub fn disk_offsets(d: usize) -> Vec<(isize, isize)> {
    let r = d as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Erosion by a disk; pixels outside the grid count as background.
pub fn erode(mask: &Mask, d: usize) -> Mask {
    let offs = disk_offsets(d);
    let (h, w) = (mask.rows as isize, mask.cols as isize);
    let mut out = Mask::zeros(mask.rows, mask.cols);
    for r in 0..h {
        for c in 0..w {
            if mask.at(r as usize, c as usize) == 0 {
                continue;
            }
            let keep = offs.iter().all(|(dy, dx)| {
                let (y, x) = (r + dy, c + dx);
                y >= 0 && x >= 0 && y < h && x < w && mask.at(y as usize, x as usize) != 0
            });
            if keep {
                out.set(r as usize, c as usize, 1);
            }
        }
    }
    out
}

pub fn dilate(mask: &Mask, d: usize) -> Mask {
    let offs = disk_offsets(d);
    let (h, w) = (mask.rows as isize, mask.cols as isize);
    let mut out = Mask::zeros(mask.rows, mask.cols);
    for r in 0..h {
        for c in 0..w {
            let hit = offs.iter().any(|(dy, dx)| {
                let (y, x) = (r + dy, c + dx);
                y >= 0 && x >= 0 && y < h && x < w && mask.at(y as usize, x as usize) != 0
            });
            if hit {
                out.set(r as usize, c as usize, 1);
            }
        }
    }
    out
}

/// Band of thickness `d` inside the mask: `mask \ erode(mask, d)`.
pub fn boundary_band(mask: &Mask, d: usize) -> Mask {
    let er = erode(mask, d);
    let data = mask.data.iter().zip(&er.data).map(|(m, e)| (*m != 0 && *e == 0) as u8).collect();
    Mask::new(mask.rows, mask.cols, data)
}

/// IoU of the two boundary bands.
pub fn boundary_iou(pred: &Mask, gt: &Mask, d: usize) -> Result<f64> {
    if d < 1 {
        return Err(Error::Config("boundary thickness d must be ≥ 1".into()));
    }
    check_pair(pred, gt)?;
    Ok(iou_unchecked(&boundary_band(pred, d).data, &boundary_band(gt, d).data))
}

/// Arithmetic mean of IoU and boundary IoU.
pub fn score(iou_value: f64, biou_value: f64) -> f64 {
    (iou_value + biou_value) / 2.0
}

/// Aggregate of per-tile scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegScores {
    pub iou: f64,
    pub biou: f64,
    pub score: f64,
}

impl SegScores {
    pub fn of(pred: &Mask, gt: &Mask, d: usize) -> Result<Self> {
        let i = iou(pred, gt)?;
        let b = boundary_iou(pred, gt, d)?;
        Ok(SegScores { iou: i, biou: b, score: score(i, b) })
    }

    /// Mean over tiles, reduced in the given order.
    pub fn mean(items: &[SegScores]) -> SegScores {
        if items.is_empty() {
            return SegScores::default();
        }
        let n = items.len() as f64;
        let iou = items.iter().map(|s| s.iou).sum::<f64>() / n;
        let biou = items.iter().map(|s| s.biou).sum::<f64>() / n;
        SegScores { iou, biou, score: score(iou, biou) }
    }
}

/// One line of a metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub split: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub iou: f64,
    pub biou: f64,
    pub score: f64,
}

/// Per-split IoU/bIoU/Score plus training curves for one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

const HEADER: &str = "split\tepoch\tstep\tlr\tloss\tiou\tbiou\tscore";

impl MetricsReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn last(&self, split: &str) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    /// Tab-separated text. Floats use Rust's shortest round-trip formatting,
    /// so parsing the file reproduces the values exactly.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
                r.split, r.epoch, r.step, r.lr, r.loss, r.iou, r.biou, r.score
            );
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HEADER => {}
            _ => return Err(Error::format(path, "missing metrics header")),
        }
        let mut rep = MetricsReport::default();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::format(path, format!("line {}: expected 8 fields", i + 2)));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse().map_err(|_| Error::format(path, format!("line {}: bad number `{}`", i + 2, f[j])))
            };
            let int = |j: usize| -> Result<usize> {
                f[j].parse().map_err(|_| Error::format(path, format!("line {}: bad integer `{}`", i + 2, f[j])))
            };
            rep.push(MetricRow {
                split: f[0].to_string(),
                epoch: int(1)?,
                step: int(2)?,
                lr: num(3)?,
                loss: num(4)?,
                iou: num(5)?,
                biou: num(6)?,
                score: num(7)?,
            });
        }
        Ok(rep)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_tsv(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, r0: usize, c0: usize, side: usize) -> Mask {
        let mut m = Mask::zeros(n, n);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                m.set(r, c, 1);
            }
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = square(8, 2, 2, 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&square(8, 0, 0, 2), &square(8, 5, 5, 2)).unwrap(), 0.0);
        let mut left = Mask::zeros(4, 4);
        let mut top = Mask::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                left.set(r, c, (c < 2) as u8);
                top.set(r, c, (r < 2) as u8);
            }
        }
        assert!((iou(&left, &top).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&Mask::zeros(3, 3), &Mask::zeros(3, 3)).unwrap(), 1.0);
        assert!(iou(&Mask::new(1, 2, vec![2, 0]), &Mask::zeros(1, 2)).is_err());
    }

    #[test]
    fn boundary_examples() {
        let a = square(32, 4, 4, 8);
        assert_eq!(boundary_iou(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(boundary_iou(&a, &square(32, 20, 20, 8), 2).unwrap(), 0.0);
        assert!(boundary_iou(&a, &a, 0).is_err());
    }

    #[test]
    fn score_convention() {
        assert!((score(0.742, 0.640) - 0.691).abs() < 5e-4);
        assert!((score(0.775, 0.551) - 0.663).abs() < 5e-4);
        assert_eq!(score(1.0, 1.0), 1.0);
    }

    #[test]
    fn tsv_roundtrip() {
        let mut rep = MetricsReport::default();
        rep.push(MetricRow {
            split: "val".into(),
            epoch: 3,
            step: 12,
            lr: 1e-3,
            loss: 0.1 + 0.2,
            iou: 0.5,
            biou: 1.0 / 3.0,
            score: 0.41666666666666663,
        });
        let back = MetricsReport::from_tsv(&rep.to_tsv(), Path::new("mem")).unwrap();
        assert_eq!(back, rep);
    }

    type PixelSet = std::collections::BTreeSet<(i64, i64)>;

    fn to_set(m: &Mask) -> PixelSet {
        let mut s = PixelSet::new();
        for r in 0..m.rows {
            for c in 0..m.cols {
                if m.at(r, c) != 0 {
                    s.insert((r as i64, c as i64));
                }
            }
        }
        s
    }

    fn brute_band(m: &PixelSet, d: i64) -> PixelSet {
        let d2 = d * d;
        m.iter()
            .filter(|&&(r, c)| {
                !(-d..=d).all(|dy| (-d..=d).all(|dx| dy * dy + dx * dx > d2 || m.contains(&(r + dy, c + dx))))
            })
            .copied()
            .collect()
    }

    fn brute_iou(a: &PixelSet, b: &PixelSet) -> f64 {
        let union = a.union(b).count();
        if union == 0 {
            return 1.0;
        }
        a.intersection(b).count() as f64 / union as f64
    }

    #[test]
    fn holed_square_band_ratio() {
        let full = Mask::new(8, 8, vec![1; 64]);
        let mut holed = full.clone();
        for (r, c) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            holed.set(r, c, 0);
        }
        let oracle = brute_iou(&brute_band(&to_set(&full), 1), &brute_band(&to_set(&holed), 1));
        assert_eq!(oracle, 28.0 / 36.0);
        assert!((boundary_iou(&full, &holed, 1).unwrap() - oracle).abs() < 1e-15);
    }

    fn mask_strategy(n: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(proptest::bool::weighted(0.45), n * n)
            .prop_map(move |v| Mask::new(n, n, v.into_iter().map(u8::from).collect()))
    }

    fn shifted(m: &Mask, dy: usize, dx: usize, n: usize) -> Mask {
        let mut out = Mask::zeros(n, n);
        for r in 0..m.rows {
            for c in 0..m.cols {
                out.set(r + dy, c + dx, m.at(r, c));
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_match_set_oracle(a in mask_strategy(16), b in mask_strategy(16), d in 1usize..4) {
            let (sa, sb) = (to_set(&a), to_set(&b));
            prop_assert_eq!(iou(&a, &b).unwrap(), brute_iou(&sa, &sb));
            let want = brute_iou(&brute_band(&sa, d as i64), &brute_band(&sb, d as i64));
            prop_assert_eq!(boundary_iou(&a, &b, d).unwrap(), want);
        }
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_translation_invariant(
            a in mask_strategy(8),
            b in mask_strategy(8),
            dy in 0usize..5,
            dx in 0usize..5,
        ) {
            let pa = shifted(&a, 6, 6, 20);
            let pb = shifted(&b, 6, 6, 20);
            prop_assert_eq!(iou(&pa, &pb).unwrap(), iou(&pb, &pa).unwrap());
            prop_assert_eq!(boundary_iou(&pa, &pb, 2).unwrap(), boundary_iou(&pb, &pa, 2).unwrap());
            let (ta, tb) = (shifted(&a, 4 + dy, 4 + dx, 20), shifted(&b, 4 + dy, 4 + dx, 20));
            prop_assert_eq!(iou(&pa, &pb).unwrap(), iou(&ta, &tb).unwrap());
            prop_assert_eq!(boundary_iou(&pa, &pb, 2).unwrap(), boundary_iou(&ta, &tb, 2).unwrap());
        }
    }
}

//! Comparison tables, training-curve plots and prediction galleries.

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::raster::{Grid, Mask};
use crate::train::{median, InitKind, TableRow};
use plotters::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SUMMARY_FILE: &str = "summary.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
const SUMMARY_HEADER: &str = "init\tfraction\tseed\tlabeled\tiou\tbiou\tscore\tclean_iou\tclean_biou\tclean_score";

/// Final scores of one fine-tuning run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub init: InitKind,
    pub fraction: f64,
    pub seed: u64,
    pub labeled: usize,
    pub iou: f64,
    pub biou: f64,
    pub clean_iou: f64,
    pub clean_biou: f64,
    pub history: MetricsReport,
}

pub fn write_summary(rec: &RunRecord, dir: &Path) -> Result<()> {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    let _ = writeln!(
        s,
        "{}\t{:?}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
        rec.init,
        rec.fraction,
        rec.seed,
        rec.labeled,
        rec.iou,
        rec.biou,
        crate::metrics::score(rec.iou, rec.biou),
        rec.clean_iou,
        rec.clean_biou,
        crate::metrics::score(rec.clean_iou, rec.clean_biou)
    );
    let p = dir.join(SUMMARY_FILE);
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

/// Reads `summary.tsv` and `metrics.tsv` from a run directory.
pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let p = dir.join(SUMMARY_FILE);
    if !p.is_file() {
        return Err(Error::Missing(p));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::format(&p, "missing summary header"));
    }
    let f: Vec<&str> = lines.next().ok_or_else(|| Error::format(&p, "empty summary"))?.split('\t').collect();
    if f.len() != 10 {
        return Err(Error::format(&p, "expected 10 summary fields"));
    }
    let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| Error::format(&p, format!("bad number `{}`", f[i]))) };
    let int = |i: usize| -> Result<u64> { f[i].parse().map_err(|_| Error::format(&p, format!("bad integer `{}`", f[i]))) };
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        init: f[0].parse()?,
        fraction: num(1)?,
        seed: int(2)?,
        labeled: int(3)? as usize,
        iou: num(4)?,
        biou: num(5)?,
        clean_iou: num(7)?,
        clean_biou: num(8)?,
        history: MetricsReport::read(&dir.join(METRICS_FILE))?,
    })
}

/// Median-over-seeds table; rows ordered by fraction then init.
pub fn summarize(cells: &[(InitKind, f64, f64, f64)]) -> Vec<TableRow> {
    let mut keys: Vec<(InitKind, f64)> = Vec::new();
    for (i, f, _, _) in cells {
        if !keys.iter().any(|(a, b)| a == i && b == f) {
            keys.push((*i, *f));
        }
    }
    keys.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    keys.into_iter()
        .map(|(init, fraction)| {
            let sel: Vec<&(InitKind, f64, f64, f64)> =
                cells.iter().filter(|c| c.0 == init && c.1 == fraction).collect();
            let iou = median(&sel.iter().map(|c| c.2).collect::<Vec<_>>());
            let biou = median(&sel.iter().map(|c| c.3).collect::<Vec<_>>());
            TableRow { init, fraction, seeds: sel.len(), iou, biou, score: crate::metrics::score(iou, biou) }
        })
        .collect()
}

pub fn table_from_runs(runs: &[RunRecord]) -> Vec<TableRow> {
    summarize(&runs.iter().map(|r| (r.init, r.fraction, r.iou, r.biou)).collect::<Vec<_>>())
}

fn pct(fraction: f64) -> String {
    let p = fraction * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round() as i64)
    } else {
        format!("{p}%")
    }
}

pub fn table_text(rows: &[TableRow]) -> String {
    let mut s = format!("{:<10} {:>8} {:>5} {:>7} {:>7} {:>7}\n", "init", "labels", "seeds", "IoU", "bIoU", "Score");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>5} {:>7.3} {:>7.3} {:>7.3}",
            r.init.to_string(),
            pct(r.fraction),
            r.seeds,
            r.iou,
            r.biou,
            r.score
        );
    }
    s
}

pub fn table_tsv(rows: &[TableRow]) -> String {
    let mut s = String::from("init\tfraction\tseeds\tiou\tbiou\tscore\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:?}\t{}\t{:?}\t{:?}\t{:?}", r.init, r.fraction, r.seeds, r.iou, r.biou, r.score);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveMetric {
    Loss,
    Iou,
    Biou,
}

impl CurveMetric {
    fn pick(self, r: &crate::metrics::MetricRow) -> f64 {
        match self {
            CurveMetric::Loss => r.loss,
            CurveMetric::Iou => r.iou,
            CurveMetric::Biou => r.biou,
        }
    }

    fn label(self) -> &'static str {
        match self {
            CurveMetric::Loss => "loss",
            CurveMetric::Iou => "IoU",
            CurveMetric::Biou => "bIoU",
        }
    }
}

fn init_color(init: InitKind) -> RGBColor {
    match init {
        InitKind::Random => RGBColor(200, 60, 40),
        InitKind::Proxy => RGBColor(40, 110, 200),
        InitKind::Terrain => RGBColor(30, 150, 70),
    }
}

/// Median-over-seeds curve per `(init, fraction)` for one split and column.
pub fn median_curves(runs: &[RunRecord], split: &str, metric: CurveMetric) -> Vec<(InitKind, f64, Vec<f64>)> {
    let keys: Vec<(InitKind, f64)> = table_from_runs(runs).iter().map(|r| (r.init, r.fraction)).collect();
    keys.into_iter()
        .map(|(init, fraction)| {
            let curves: Vec<Vec<f64>> = runs
                .iter()
                .filter(|r| r.init == init && r.fraction == fraction)
                .map(|r| r.history.split(split).map(|row| metric.pick(row)).collect())
                .collect();
            let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
            let med = (0..len).map(|e| median(&curves.iter().map(|c| c[e]).collect::<Vec<_>>())).collect();
            (init, fraction, med)
        })
        .collect()
}

/// Writes an SVG line plot of `metric` against epoch, one line per
/// `(init, fraction)`.
pub fn plot_curves(runs: &[RunRecord], split: &str, metric: CurveMetric, size: (u32, u32), path: &Path) -> Result<()> {
    let curves = median_curves(runs, split, metric);
    let epochs = curves.iter().map(|c| c.2.len()).max().unwrap_or(0).max(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in curves.iter().flat_map(|c| c.2.iter()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        return Err(Error::Data(format!("no `{split}` rows to plot")));
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, size).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{split} {} vs epoch", metric.label()), ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(1f64..epochs as f64, (lo - pad)..(hi + pad))?;
        chart.configure_mesh().x_desc("epoch").y_desc(metric.label()).draw()?;
        for (init, fraction, c) in &curves {
            let color = init_color(*init);
            let style = if *fraction >= 1.0 { color.stroke_width(2) } else { color.stroke_width(1) };
            chart
                .draw_series(LineSeries::new(c.iter().enumerate().map(|(e, v)| ((e + 1) as f64, *v)), style))?
                .label(format!("{init} {}", pct(*fraction)))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::format(path, format!("plot failed: {e}")))
}

/// One gallery row: input raster, reference mask, predicted mask.
pub struct GalleryRow<'a> {
    pub input: &'a Grid,
    pub truth: &'a Mask,
    pub pred: &'a Mask,
}

/// Writes a PNG with one row per tile: grayscale input, reference (white),
/// and prediction coloured by agreement (true positive green, false
/// positive red, false negative blue).
pub fn write_gallery(rows: &[GalleryRow<'_>], path: &Path) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Data("gallery needs at least one tile".into()));
    };
    let (h, w) = first.input.shape();
    let gap = 4u32;
    let width = 3 * w as u32 + 2 * gap;
    let height = rows.len() as u32 * (h as u32 + gap) - gap;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    for (k, row) in rows.iter().enumerate() {
        if row.input.shape() != (h, w) || (row.truth.rows, row.truth.cols) != (h, w) || (row.pred.rows, row.pred.cols) != (h, w) {
            return Err(Error::Data("gallery tiles must share one shape".into()));
        }
        let y0 = k as u32 * (h as u32 + gap);
        let (lo, hi) = row.input.min_max();
        let span = (hi - lo).max(1e-6);
        for r in 0..h {
            for c in 0..w {
                let g = (((row.input.at(r, c) - lo) / span) * 255.0).round() as u8;
                let (x, y) = (c as u32, y0 + r as u32);
                img.put_pixel(x, y, image::Rgb([g, g, g]));
                let t = row.truth.at(r, c) != 0;
                let v = if t { 255 } else { 0 };
                img.put_pixel(x + w as u32 + gap, y, image::Rgb([v, v, v]));
                let p = row.pred.at(r, c) != 0;
                let color = match (p, t) {
                    (true, true) => [40, 170, 70],
                    (true, false) => [210, 50, 40],
                    (false, true) => [40, 90, 210],
                    (false, false) => [0, 0, 0],
                };
                img.put_pixel(x + 2 * (w as u32 + gap), y, image::Rgb(color));
            }
        }
    }
    img.save(path).map_err(|e| Error::format(path, format!("cannot write image: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_column_is_mean() {
        let cells = vec![
            (InitKind::Random, 0.01, 0.5, 0.3),
            (InitKind::Random, 0.01, 0.6, 0.2),
            (InitKind::Random, 0.01, 0.4, 0.4),
            (InitKind::Terrain, 0.01, 0.7, 0.5),
        ];
        let rows = summarize(&cells);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].iou, 0.5);
        assert_eq!(rows[0].biou, 0.3);
        for r in &rows {
            assert_eq!(r.score, (r.iou + r.biou) / 2.0);
        }
        assert!(table_text(&rows).contains("1%"));
    }

    #[test]
    fn gallery_and_plot_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let m = Mask::new(2, 2, vec![0, 1, 1, 0]);
        let p = Mask::new(2, 2, vec![1, 1, 0, 0]);
        let png = dir.path().join("g.png");
        write_gallery(&[GalleryRow { input: &g, truth: &m, pred: &p }], &png).unwrap();
        assert!(png.metadata().unwrap().len() > 0);
        let mut h = MetricsReport::default();
        for e in 1..=3 {
            h.push(crate::metrics::MetricRow {
                split: "train".into(),
                epoch: e,
                step: e,
                lr: 1e-3,
                loss: 1.0 / e as f64,
                iou: 0.5,
                biou: 0.4,
                score: 0.45,
            });
        }
        let run = RunRecord {
            dir: dir.path().into(),
            init: InitKind::Terrain,
            fraction: 1.0,
            seed: 0,
            labeled: 4,
            iou: 0.5,
            biou: 0.4,
            clean_iou: 0.5,
            clean_biou: 0.4,
            history: h,
        };
        let svg = dir.path().join("loss.svg");
        plot_curves(&[run], "train", CurveMetric::Loss, (400, 300), &svg).unwrap();
        assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
    }
}

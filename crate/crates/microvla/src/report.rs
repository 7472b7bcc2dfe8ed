//! Rendering of run artifacts: aligned text tables from the CSV files the
//! trainer and evaluator emit, plus simple static plot images (per-run loss
//! curves as line plots, ablation grids as bar charts).
//!
//! The plots are intentionally minimal — axes, gridlines, and data marks on a
//! white canvas — with the numbers themselves carried by the text table that
//! is always rendered alongside.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Parse a simple comma-separated file (no quoting; none of the crate's CSV
/// emitters ever quote) into a header row plus data rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::config("csv", "file is empty"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::config(
                "csv",
                format!("row has {} fields, header has {}", row.len(), header.len()),
            ));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Render a header plus rows as an aligned text table. Numeric-looking
/// columns are right-aligned, everything else left-aligned.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let ncols = header.len();
    let mut width = vec![0usize; ncols];
    let mut numeric = vec![true; ncols];
    for (c, h) in header.iter().enumerate() {
        width[c] = h.len();
    }
    for row in rows {
        for (c, cell) in row.iter().enumerate() {
            width[c] = width[c].max(cell.len());
            if cell.parse::<f64>().is_err() {
                numeric[c] = false;
            }
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, row: &[String], numeric: &[bool]| {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if numeric[c] {
                out.push_str(&format!("{cell:>w$}", w = width[c]));
            } else {
                out.push_str(&format!("{cell:<w$}", w = width[c]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    // header is always left-aligned-agnostic: use the column's alignment
    emit(&mut out, header, &numeric);
    let rule: usize = width.iter().sum::<usize>() + 2 * (ncols - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in rows {
        emit(&mut out, row, &numeric);
    }
    out
}

/// Read a CSV file and render it as an aligned text table.
pub fn render_csv_file(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let (header, rows) = parse_csv(&text)?;
    Ok(render_table(&header, &rows))
}

// ---------------------------------------------------------------------------
// Plot primitives
// ---------------------------------------------------------------------------

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 40;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// Distinct series colors, cycled.
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn blank_canvas() -> RgbImage {
    let mut img = RgbImage::new(PLOT_W, PLOT_H);
    for p in img.pixels_mut() {
        *p = BG;
    }
    img
}

fn draw_frame(img: &mut RgbImage) {
    let (x0, y0) = (MARGIN, MARGIN);
    let (x1, y1) = (PLOT_W - MARGIN, PLOT_H - MARGIN);
    // light horizontal gridlines at quarter heights
    for k in 1..4 {
        let y = y0 + (y1 - y0) * k / 4;
        draw_line(img, x0 as i32, y as i32, x1 as i32, y as i32, GRID);
    }
    draw_line(img, x0 as i32, y0 as i32, x0 as i32, y1 as i32, AXIS);
    draw_line(img, x0 as i32, y1 as i32, x1 as i32, y1 as i32, AXIS);
}

fn draw_line(img: &mut RgbImage, mut x0: i32, mut y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for x in x0..=x1.min(img.width() - 1) {
        for y in y0..=y1.min(img.height() - 1) {
            img.put_pixel(x, y, color);
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::config("plot", format!("cannot write {}: {e}", path.display())))
}

/// Draw one or more (x, y) series as a line plot and save it as a PNG.
/// Axis ranges are the joint data extent, padded by 5%.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::config("plot", "no data points to plot"));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = (*hi - *lo).max(1e-12);
        *lo -= 0.05 * span;
        *hi += 0.05 * span;
    };
    pad(&mut xmin, &mut xmax);
    pad(&mut ymin, &mut ymax);

    let mut img = blank_canvas();
    draw_frame(&mut img);
    let to_px = |x: f64, y: f64| -> (i32, i32) {
        let fx = (x - xmin) / (xmax - xmin);
        let fy = (y - ymin) / (ymax - ymin);
        let px = MARGIN as f64 + fx * (PLOT_W - 2 * MARGIN) as f64;
        let py = (PLOT_H - MARGIN) as f64 - fy * (PLOT_H - 2 * MARGIN) as f64;
        (px.round() as i32, py.round() as i32)
    };
    for (i, (_, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for w in s.windows(2) {
            let (x0, y0) = to_px(w[0].0, w[0].1);
            let (x1, y1) = to_px(w[1].0, w[1].1);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        if s.len() == 1 {
            let (x, y) = to_px(s[0].0, s[0].1);
            draw_line(&mut img, x - 2, y, x + 2, y, color);
            draw_line(&mut img, x, y - 2, x, y + 2, color);
        }
    }
    save_png(&img, path)
}

/// Draw labelled bars (values assumed ≥ 0; y axis starts at 0) and save as a
/// PNG. Labels are carried by the accompanying text table, not the image.
pub fn bar_chart(bars: &[(String, f64)], path: &Path) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::config("plot", "no bars to plot"));
    }
    let ymax = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-12) * 1.05;
    let mut img = blank_canvas();
    draw_frame(&mut img);
    let inner_w = PLOT_W - 2 * MARGIN;
    let slot = inner_w as f64 / bars.len() as f64;
    for (i, (_, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x_lo = MARGIN as f64 + slot * (i as f64 + 0.15);
        let x_hi = MARGIN as f64 + slot * (i as f64 + 0.85);
        let h = (v.max(0.0) / ymax) * (PLOT_H - 2 * MARGIN) as f64;
        let y_top = (PLOT_H - MARGIN) as f64 - h;
        fill_rect(
            &mut img,
            x_lo.round() as u32,
            y_top.round() as u32,
            x_hi.round() as u32,
            PLOT_H - MARGIN - 1,
            color,
        );
    }
    save_png(&img, path)
}

// ---------------------------------------------------------------------------
// File-level renderers
// ---------------------------------------------------------------------------

/// Render `train_log.csv` (step, loss, …) into a loss-curve PNG next to it.
/// Caption-pretraining rows (step `caption_<n>`) are plotted as their own
/// series when present. Returns the PNG path.
pub fn render_train_log(csv_path: &Path) -> Result<std::path::PathBuf> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let (header, rows) = parse_csv(&text)?;
    let step_col = column(&header, "step")?;
    let loss_col = column(&header, "loss")?;
    let mut main: Vec<(f64, f64)> = Vec::new();
    let mut caption: Vec<(f64, f64)> = Vec::new();
    for row in &rows {
        let loss: f64 = row[loss_col]
            .parse()
            .map_err(|_| Error::config("loss", format!("not a number: {}", row[loss_col])))?;
        if let Ok(step) = row[step_col].parse::<f64>() {
            main.push((step, loss));
        } else if let Some(n) = row[step_col].strip_prefix("caption_") {
            if let Ok(step) = n.parse::<f64>() {
                caption.push((step, loss));
            }
        }
    }
    let mut series = Vec::new();
    if !caption.is_empty() {
        series.push(("caption loss".to_string(), caption));
    }
    series.push(("train loss".to_string(), main));
    let out = csv_path.with_extension("png");
    line_plot(&series, &out)?;
    Ok(out)
}

/// Render `ablation.csv` (variant, seed, per-task SR columns, average) into a
/// bar chart of per-variant average SR (mean over seeds; failed cells are
/// skipped). Returns the PNG path.
pub fn render_ablation(csv_path: &Path) -> Result<std::path::PathBuf> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let (header, rows) = parse_csv(&text)?;
    let variant_col = column(&header, "variant")?;
    let avg_col = column(&header, "average")?;
    let mut bars: Vec<(String, f64, usize)> = Vec::new();
    for row in &rows {
        let Ok(v) = row[avg_col].parse::<f64>() else {
            continue; // failed cell
        };
        match bars.iter_mut().find(|(name, _, _)| *name == row[variant_col]) {
            Some((_, sum, n)) => {
                *sum += v;
                *n += 1;
            }
            None => bars.push((row[variant_col].clone(), v, 1)),
        }
    }
    let bars: Vec<(String, f64)> = bars
        .into_iter()
        .map(|(name, sum, n)| (name, sum / n as f64))
        .collect();
    let out = csv_path.with_extension("png");
    bar_chart(&bars, &out)?;
    Ok(out)
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::config("csv", format!("missing column `{name}`")))
}

/// Render any of the known artifact CSVs (`train_log.csv`, `ablation.csv`,
/// `report.csv`, or anything with the same shape) into a text table, and —
/// when the file carries plottable columns — a PNG sibling. Returns the
/// table plus the list of images written.
pub fn render_artifact(path: &Path) -> Result<(String, Vec<std::path::PathBuf>)> {
    let table = render_csv_file(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let mut images = Vec::new();
    if name == "train_log.csv" {
        images.push(render_train_log(path)?);
    } else if name == "ablation.csv" {
        images.push(render_ablation(path)?);
    }
    Ok((table, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_and_right_justifies_numbers() {
        let header = vec!["task".to_string(), "sr".to_string()];
        let rows = vec![
            vec!["reacher2/reach_color".to_string(), "96".to_string()],
            vec!["pusher3/push_block".to_string(), "100".to_string()],
        ];
        let t = render_table(&header, &rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("task"));
        assert!(lines[2].ends_with(" 96"));
        assert!(lines[3].ends_with("100"));
        // all rows share the rule width or less
        assert!(lines.iter().all(|l| l.len() <= lines[1].len()));
    }

    #[test]
    fn csv_shape_errors_are_reported() {
        assert!(parse_csv("a,b\n1,2,3\n").is_err());
        assert!(parse_csv("").is_err());
        let (h, r) = parse_csv("a,b\n1,2\n").unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(r, vec![vec!["1".to_string(), "2".to_string()]]);
    }

    #[test]
    fn train_log_renders_to_png() {
        let tmp = tempfile::tempdir().unwrap();
        let csv = tmp.path().join("train_log.csv");
        std::fs::write(
            &csv,
            "step,loss,lr_backbone,lr_head,wall_time\n\
             caption_0,2.0,0.001,0.01,0.0\n\
             0,1.5,0.001,0.01,0.1\n\
             50,0.7,0.0009,0.009,0.5\n\
             99,0.3,0.0,0.0,1.0\n",
        )
        .unwrap();
        let (table, images) = render_artifact(&csv).unwrap();
        assert!(table.contains("loss"));
        assert_eq!(images.len(), 1);
        let img = image::open(&images[0]).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (PLOT_W, PLOT_H));
        // something non-white was drawn
        assert!(img.pixels().any(|p| *p != BG));
    }

    #[test]
    fn ablation_renders_bar_chart_skipping_failed_cells() {
        let tmp = tempfile::tempdir().unwrap();
        let csv = tmp.path().join("ablation.csv");
        std::fs::write(
            &csv,
            "variant,seed,reacher2/reach_color,average\n\
             mlp,0,80,80\n\
             mlp,1,90,90\n\
             flow,0,failed,failed\n",
        )
        .unwrap();
        let (_, images) = render_artifact(&csv).unwrap();
        assert_eq!(images.len(), 1);
        assert!(images[0].exists());
    }

    #[test]
    fn plain_report_csv_gets_table_only() {
        let tmp = tempfile::tempdir().unwrap();
        let csv = tmp.path().join("report.csv");
        std::fs::write(&csv, "task,sr,progress\nreacher2/reach_color,96,98.5\n").unwrap();
        let (table, images) = render_artifact(&csv).unwrap();
        assert!(table.contains("96"));
        assert!(images.is_empty());
    }
}

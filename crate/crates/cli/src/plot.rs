use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail};
use hashjscc::metrics::{read_results, EvalRecord};
use plotters::prelude::*;

type Series = Vec<(String, Vec<(f64, f64)>)>;

/// Collects `(x, y)` points per `(mode, snr)` series, sorted by x.
fn series(
    runs: &[(String, Vec<EvalRecord>)],
    x: impl Fn(&EvalRecord) -> Option<f64>,
    y: impl Fn(&EvalRecord) -> Option<f64>,
) -> Series {
    let mut out: BTreeMap<(String, i64), Vec<(f64, f64)>> = BTreeMap::new();
    for (mode, records) in runs {
        for r in records {
            if let (Some(xv), Some(yv)) = (x(r), y(r)) {
                if yv.is_finite() {
                    out.entry((mode.clone(), (r.snr_db * 1000.0).round() as i64))
                        .or_default()
                        .push((xv, yv));
                }
            }
        }
    }
    out.into_iter()
        .map(|((mode, snr), mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (format!("{mode}, {} dB", snr as f64 / 1000.0), pts)
        })
        .collect()
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, data: &Series) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = bounds(data.iter().flat_map(|(_, p)| p.iter().map(|v| v.0)));
    let (y0, y1) = bounds(data.iter().flat_map(|(_, p)| p.iter().map(|v| v.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
    for (i, (name, pts)) in data.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    if !data.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()?;
    }
    root.present().map_err(|e| anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}

fn load_runs(eval_root: &Path, file: &str) -> anyhow::Result<Vec<(String, Vec<EvalRecord>)>> {
    let mut runs = Vec::new();
    if !eval_root.exists() {
        return Ok(runs);
    }
    let mut dirs: Vec<_> = std::fs::read_dir(eval_root)?.collect::<Result<_, _>>()?;
    dirs.sort_by_key(|d| d.file_name());
    for d in dirs {
        let path = d.path().join(file);
        if path.exists() {
            runs.push((d.file_name().to_string_lossy().into_owned(), read_results(&path)?));
        }
    }
    Ok(runs)
}

/// Draws quality-versus-hops and quality-versus-rate figures from every evaluated mode.
pub fn plot_cmd(out_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let eval_root = out_dir.join("eval");
    let df = load_runs(&eval_root, "df_results.csv")?;
    let qf = load_runs(&eval_root, "qf_results.csv")?;
    if df.is_empty() && qf.is_empty() {
        bail!(
            "no results under {}; run `hashjscc eval-df` or `hashjscc eval-qf` first",
            eval_root.display()
        );
    }
    let dir = out_dir.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let hops = |r: &EvalRecord| r.r.map(|v| v as f64);
    let bpp = |r: &EvalRecord| r.bpp;
    let figures: [(&str, &str, &str, &str, Series); 4] = [
        ("lpips_vs_r", "DF: perceptual distance", "relays r", "LPIPS", series(&df, hops, |r| r.lpips)),
        ("psnr_vs_r", "DF: PSNR", "relays r", "PSNR (dB)", series(&df, hops, |r| Some(r.psnr_db))),
        ("lpips_vs_bpp", "QF: perceptual distance", "bits per pixel", "LPIPS", series(&qf, bpp, |r| r.lpips)),
        ("psnr_vs_bpp", "QF: PSNR", "bits per pixel", "PSNR (dB)", series(&qf, bpp, |r| Some(r.psnr_db))),
    ];
    for (name, title, x, y, data) in &figures {
        let skip = if name.ends_with("_r") { df.is_empty() } else { qf.is_empty() };
        if skip {
            continue;
        }
        let path = dir.join(format!("{name}.svg"));
        line_chart(&path, title, x, y, data)?;
        written.push(path);
    }
    Ok(written)
}

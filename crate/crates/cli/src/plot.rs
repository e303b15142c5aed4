//! Static SVG renderings and aligned text tables for logs and reports.
//! Output depends only on the input bytes.

use std::fmt::Write as _;

use crate::CliError;

pub const TRAIN_LOG_HEADER: &str = "epoch,episode,loss,lr";
pub const ABLATION_HEADER: &str = "axis,variant,mean,ci95,episodes";
pub const EVAL_HEADER: &str = "mean,ci95,episodes,way,shot,queries,seed,digest";

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;

pub struct Rendered {
    pub svg: String,
    pub table: String,
}

/// Picks the renderer from the CSV header.
pub fn render(name: &str, text: &str) -> Result<Rendered, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::runtime(format!("{name}: empty file")))?
        .trim();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.trim().split(',').collect()).collect();
    if rows.is_empty() {
        return Err(CliError::runtime(format!("{name}: no records")));
    }
    let width = header.split(',').count();
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(CliError::runtime(format!("{name}: record {} has the wrong number of fields", i + 1)));
    }
    match header {
        TRAIN_LOG_HEADER => loss_curve(name, &rows),
        ABLATION_HEADER => {
            let bars = rows
                .iter()
                .map(|r| Ok((format!("{}/{}", r[0], r[1]), parse(name, r[2])?, parse(name, r[3])?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            let table = aligned(
                &["axis", "variant", "accuracy", "episodes"],
                &rows
                    .iter()
                    .zip(&bars)
                    .map(|(r, b)| vec![r[0].to_string(), r[1].to_string(), mean_ci(b.1, b.2), r[4].to_string()])
                    .collect::<Vec<_>>(),
            );
            Ok(Rendered {
                svg: bar_chart(name, &bars),
                table,
            })
        }
        EVAL_HEADER => {
            let bars = rows
                .iter()
                .map(|r| Ok((format!("{}-way {}-shot", r[3], r[4]), parse(name, r[0])?, parse(name, r[1])?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            let table = aligned(
                &["way", "shot", "accuracy", "episodes", "seed"],
                &rows
                    .iter()
                    .zip(&bars)
                    .map(|(r, b)| {
                        vec![r[3].to_string(), r[4].to_string(), mean_ci(b.1, b.2), r[2].to_string(), r[6].to_string()]
                    })
                    .collect::<Vec<_>>(),
            );
            Ok(Rendered {
                svg: bar_chart(name, &bars),
                table,
            })
        }
        _ => Err(CliError::runtime(format!("{name}: unrecognized header `{header}`"))),
    }
}

fn parse(name: &str, v: &str) -> Result<f64, CliError> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| CliError::runtime(format!("{name}: bad number `{v}`")))
}

fn mean_ci(m: f64, c: f64) -> String {
    hfcr::trainer::format_mean_ci(m, c)
}

fn loss_curve(name: &str, rows: &[Vec<&str>]) -> Result<Rendered, CliError> {
    let mut points = Vec::with_capacity(rows.len());
    let mut per_epoch: Vec<(usize, f64, usize, f64)> = Vec::new();
    for r in rows {
        let epoch: usize = r[0]
            .parse()
            .map_err(|_| CliError::runtime(format!("{name}: bad epoch `{}`", r[0])))?;
        let loss = parse(name, r[2])?;
        let lr = parse(name, r[3])?;
        points.push(loss);
        match per_epoch.last_mut() {
            Some(last) if last.0 == epoch => {
                last.1 += loss;
                last.2 += 1;
            }
            _ => per_epoch.push((epoch, loss, 1, lr)),
        }
    }
    let max = points.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let n = points.len();
    let mut svg = header_svg(name);
    axes(&mut svg, "episode", "loss", 0.0, max);
    let mut path = String::new();
    for (i, &l) in points.iter().enumerate() {
        let x = MARGIN + (W - 2.0 * MARGIN) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let y = H - MARGIN - (H - 2.0 * MARGIN) * l / max;
        let _ = write!(path, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
    }
    let _ = writeln!(svg, r##"<path d="{path}" fill="none" stroke="#1f77b4" stroke-width="1"/>"##);
    svg.push_str("</svg>\n");
    let table = aligned(
        &["epoch", "episodes", "mean_loss", "lr"],
        &per_epoch
            .iter()
            .map(|&(e, s, c, lr)| vec![e.to_string(), c.to_string(), format!("{:.4}", s / c as f64), format!("{lr}")])
            .collect::<Vec<_>>(),
    );
    Ok(Rendered { svg, table })
}

fn bar_chart(name: &str, bars: &[(String, f64, f64)]) -> String {
    let max = 100.0;
    let mut svg = header_svg(name);
    axes(&mut svg, "", "accuracy (%)", 0.0, max);
    let slot = (W - 2.0 * MARGIN) / bars.len() as f64;
    for (i, (label, mean, ci)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let bw = slot * 0.7;
        let scale = |v: f64| (H - 2.0 * MARGIN) * v.clamp(0.0, max) / max;
        let top = H - MARGIN - scale(*mean);
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{top:.2}" width="{bw:.2}" height="{:.2}" fill="#4c72b0"/>"##,
            scale(*mean)
        );
        let cx = x + bw / 2.0;
        let (lo, hi) = (H - MARGIN - scale(mean - ci), H - MARGIN - scale(mean + ci));
        let _ = writeln!(
            svg,
            r##"<line x1="{cx:.2}" y1="{lo:.2}" x2="{cx:.2}" y2="{hi:.2}" stroke="#000" stroke-width="1.5"/>"##
        );
        let _ = writeln!(
            svg,
            r##"<text x="{cx:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##,
            H - MARGIN + 14.0,
            escape(label)
        );
        let _ = writeln!(
            svg,
            r##"<text x="{cx:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##,
            top - 4.0,
            mean_ci(*mean, *ci)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn header_svg(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#fff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str, lo: f64, hi: f64) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000"/>"##);
    let _ = writeln!(s, r##"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000"/>"##);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" font-size="10" text-anchor="end">{v:.2}</text>"#,
            x0 - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{xlabel}</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.1})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Left-aligned columns separated by two spaces.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_log_is_rejected() {
        assert!(render("log", "epoch,episode,loss,lr\n").is_err());
        assert!(render("log", "").is_err());
    }

    #[test]
    fn loss_table_averages_per_epoch() {
        let r = render("log", "epoch,episode,loss,lr\n0,0,1.0,0.1\n0,1,3.0,0.1\n1,0,0.5,0.1\n").unwrap();
        assert!(r.table.contains("2.0000"));
        assert!(r.svg.starts_with("<svg"));
    }

    #[test]
    fn table_columns_align() {
        let t = aligned(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a    long");
        assert_eq!(lines[2], "xyz  1");
    }
}

//! Minimal SVG charts for sweep results.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::SweepRow;

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn header(title: &str) -> String {
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let (x0, y0, x1) = (MARGIN, H - MARGIN, W - MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}" stroke="black"/>"#);
    s
}

/// Training loss per step, first seed of each scheme and world size, log scale.
pub fn loss_chart(rows: &[SweepRow]) -> String {
    let mut firsts: Vec<&SweepRow> = Vec::new();
    for r in rows {
        if !firsts.iter().any(|f| f.scheme == r.scheme && f.world_size == r.world_size) {
            firsts.push(r);
        }
    }
    let finite = || firsts.iter().flat_map(|r| r.train_loss.iter().copied()).filter(|l| l.is_finite() && *l > 0.0);
    let lo = finite().fold(f64::INFINITY, f64::min).log10();
    let hi = finite().fold(f64::NEG_INFINITY, f64::max).log10();
    let steps = firsts.iter().map(|r| r.train_loss.len()).max().unwrap_or(0).max(2);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = header("training loss vs step");
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - 20.0);
    let _ = writeln!(s, r#"<text x="10" y="{MARGIN}">{:.3e}</text>"#, 10f64.powf(hi));
    let _ = writeln!(s, r#"<text x="10" y="{}">{:.3e}</text>"#, H - MARGIN, 10f64.powf(lo));
    for (i, r) in firsts.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = r
            .train_loss
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite() && **l > 0.0)
            .map(|(k, l)| {
                let x = MARGIN + (W - 2.0 * MARGIN) * k as f64 / (steps - 1) as f64;
                let y = H - MARGIN - (H - 2.0 * MARGIN) * (l.log10() - lo) / span;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{} ({})</text>"#, W - MARGIN - 150.0, MARGIN + 14.0 * i as f64, r.scheme, r.world_size);
    }
    s.push_str("</svg>\n");
    s
}

/// Mean samples/sec over seeds, one bar per (world size, scheme).
pub fn throughput_chart(rows: &[SweepRow]) -> String {
    let mut groups: Vec<((usize, String), Vec<f64>)> = Vec::new();
    let mut index: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for r in rows {
        let key = (r.world_size, r.scheme.clone());
        let i = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r.samples_per_sec);
    }
    let means: Vec<f64> = groups.iter().map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64).collect();
    let top = means.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut s = header("samples/sec");
    let slot = (W - 2.0 * MARGIN) / groups.len().max(1) as f64;
    for (i, (((world, scheme), _), mean)) in groups.iter().zip(&means).enumerate() {
        let h = (H - 2.0 * MARGIN) * mean / top;
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{color}"/>"#, H - MARGIN - h, slot * 0.8);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{mean:.0}</text>"#, x + slot * 0.4, H - MARGIN - h - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10" transform="rotate(-30 {:.1} {:.1})">{scheme} ({world})</text>"#,
            x + slot * 0.4,
            H - MARGIN + 14.0,
            x + slot * 0.4,
            H - MARGIN + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}

//! Markdown tables and SVG bar charts of an evaluation file.

use std::fmt::Write;

use elicit_core::corpus::DomainTag;
use elicit_core::metrics::{DomainRow, MetricReport};

use crate::stages::EvaluationFile;

type Pick = fn(&DomainRow) -> Option<f64>;

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn table(out: &mut String, sources: &[&MetricReport], pick: Pick, digits: usize) {
    let labels: Vec<&str> = DomainTag::ALL.iter().map(|d| d.short_label()).collect();
    let _ = writeln!(out, "| Source | {} | All |", labels.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(labels.len()));
    for s in sources {
        let cells: Vec<String> = DomainTag::ALL
            .iter()
            .map(|d| cell(s.row(*d).and_then(pick), digits))
            .collect();
        let _ = writeln!(out, "| {} | {} | {} |", s.source, cells.join(" | "), cell(pick(&s.total), digits));
    }
    out.push('\n');
}

fn decoding_label(eval: &EvaluationFile) -> String {
    let d = &eval.decoding;
    if d.temperature == 0.0 {
        format!("greedy, at most {} new tokens", d.max_new_tokens)
    } else {
        format!(
            "sampling at temperature {} (seed {}), at most {} new tokens",
            d.temperature, d.seed, d.max_new_tokens
        )
    }
}

pub fn markdown(eval: &EvaluationFile) -> String {
    let all: Vec<&MetricReport> = eval.sources.iter().collect();
    let models: Vec<&MetricReport> = all.iter().copied().filter(|s| s.providers.scorer.is_some()).collect();
    let real: Vec<&MetricReport> = all.iter().copied().filter(|s| s.source == "real").collect();
    let with_real: Vec<&MetricReport> = real.iter().chain(&models).copied().collect();

    let mut out = String::from("# Evaluation report\n\n");
    let legend: Vec<String> = DomainTag::ALL
        .iter()
        .map(|d| format!("{} = {}", d.short_label(), d.display_name()))
        .collect();
    let _ = writeln!(out, "Domains: {}.\n", legend.join(", "));
    if let Some(first) = all.first() {
        let p = &first.providers;
        let _ = writeln!(out, "Tokenizer `{}`, embedder `{}`.", p.tokenizer, p.embedder);
        let pc = first.progression_config;
        let _ = writeln!(out, "Progression window k = {}, decay = {}.", pc.k, pc.gamma);
    }
    let _ = writeln!(out, "Decoding: {}.\n", decoding_label(eval));

    out.push_str("## Conformity\n\n### Micro perplexity\n\n");
    if models.is_empty() {
        out.push_str("No model sources were evaluated.\n\n");
    } else {
        table(&mut out, &models, |r| r.micro_ppl, 2);
    }
    out.push_str("### Response length (tokens)\n\n");
    table(&mut out, &with_real, |r| r.mean_len, 1);
    if !models.is_empty() {
        out.push_str("### Macro perplexity (secondary)\n\n");
        table(&mut out, &models, |r| r.macro_ppl, 2);
    }
    out.push_str("## Progression\n\n");
    table(&mut out, &all, |r| r.progression, 3);
    out.push_str("## Turn-length ratio\n\n");
    table(&mut out, &all, |r| r.tlr, 3);

    out.push_str("## Counts\n\n| Source | Blocks | Skipped | Degenerate | Scorer |\n|---|---|---|---|---|\n");
    for s in &all {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            s.source,
            s.total.n_blocks,
            s.total.skipped,
            s.total.degenerate,
            s.providers.scorer.as_deref().unwrap_or("-")
        );
    }
    out
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per domain, one bar per source.
fn bar_chart(title: &str, sources: &[&MetricReport], pick: Pick) -> String {
    let (w, h, left, bottom, top) = (640.0, 320.0, 50.0, 40.0, 30.0);
    let plot_h = h - bottom - top;
    let max = sources
        .iter()
        .flat_map(|s| DomainTag::ALL.iter().filter_map(|d| s.row(*d).and_then(pick)))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let group_w = (w - left - 10.0) / DomainTag::ALL.len() as f64;
    let bar_w = group_w * 0.8 / sources.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - 10.0,
        h - bottom
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{max:.2}</text>"#, left - 4.0, top + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, left - 4.0, h - bottom);
    for (g, domain) in DomainTag::ALL.iter().enumerate() {
        let gx = left + g as f64 * group_w + group_w * 0.1;
        for (i, s) in sources.iter().enumerate() {
            if let Some(v) = s.row(*domain).and_then(pick) {
                let bh = v / max * plot_h;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {v:.3}</title></rect>"#,
                    gx + i as f64 * bar_w,
                    h - bottom - bh,
                    bar_w * 0.95,
                    bh,
                    PALETTE[i % PALETTE.len()],
                    escape(&s.source),
                    domain.short_label()
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            h - bottom + 16.0,
            domain.short_label()
        );
    }
    for (i, s) in sources.iter().enumerate() {
        let y = h - 8.0;
        let x = left + i as f64 * 100.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            escape(&s.source)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// `(file stem, svg)` pairs.
pub fn plots(eval: &EvaluationFile) -> Vec<(&'static str, String)> {
    let all: Vec<&MetricReport> = eval.sources.iter().collect();
    let models: Vec<&MetricReport> = all.iter().copied().filter(|s| s.providers.scorer.is_some()).collect();
    let mut out = vec![
        ("progression", bar_chart("Progression", &all, |r| r.progression)),
        ("turn_length_ratio", bar_chart("Turn-length ratio", &all, |r| r.tlr)),
        ("response_length", bar_chart("Response length (tokens)", &all, |r| r.mean_len)),
    ];
    if !models.is_empty() {
        out.push(("micro_perplexity", bar_chart("Micro perplexity", &models, |r| r.micro_ppl)));
    }
    out
}

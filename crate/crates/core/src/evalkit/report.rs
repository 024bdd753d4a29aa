use serde::{Deserialize, Serialize};

/// One row of a cross-run comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub iteration: Option<usize>,
    pub win_rate: Option<f64>,
    pub repeat_at_n: Option<f64>,
    pub f1: Option<f64>,
}

/// Rows ordered by win rate (highest first, missing last), then by name.
pub fn sort_rows(rows: &mut [RunRow]) {
    rows.sort_by(|a, b| {
        let key = |r: &RunRow| r.win_rate.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.name.cmp(&b.name))
    });
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Aligned plain-text table, sorted with [`sort_rows`].
pub fn comparison_table(rows: &[RunRow]) -> String {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let header = ["method", "iteration", "repeat@n", "f1", "win_rate"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.iteration.map_or_else(|| "-".to_string(), |i| i.to_string()),
                cell(r.repeat_at_n),
                cell(r.f1),
                cell(r.win_rate),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for line in &body {
        for (w, c) in widths.iter_mut().zip(line) {
            *w = (*w).max(c.len());
        }
    }
    let fmt_line = |cells: [&str; 5]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for (c, w) in cells[1..].iter().zip(&widths[1..]) {
            s.push_str(&format!("  {c:>w$}"));
        }
        s.trim_end().to_string()
    };
    let mut out = fmt_line(header);
    out.push('\n');
    for line in &body {
        out.push_str(&fmt_line(line.each_ref().map(String::as_str)));
        out.push('\n');
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of `(label, value)` pairs; bars scale to the largest
/// absolute value.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (bar_h, gap, label_w, chart_w) = (18.0, 6.0, 220.0, 360.0);
    let top = 30.0;
    let height = top + bars.len() as f64 * (bar_h + gap) + 10.0;
    let width = label_w + chart_w + 80.0;
    let max = bars.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let scale = if max > 0.0 { chart_w / max } else { 0.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"12\">\n"
    );
    s.push_str(&format!("<text x=\"10\" y=\"18\" font-weight=\"bold\">{}</text>\n", escape(title)));
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = top + i as f64 * (bar_h + gap);
        let w = (v.abs() * scale).max(0.5);
        let fill = if *v < 0.0 { "#c0504d" } else { "#4f81bd" };
        s.push_str(&format!(
            "<text x=\"10\" y=\"{:.1}\">{}</text>\n<rect x=\"{label_w}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{bar_h}\" fill=\"{fill}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{v:.4}</text>\n",
            y + 13.0,
            escape(label),
            label_w + w + 6.0,
            y + 13.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, w: Option<f64>) -> RunRow {
        RunRow {
            name: name.into(),
            iteration: Some(1),
            win_rate: w,
            repeat_at_n: Some(1.0),
            f1: None,
        }
    }

    #[test]
    fn rows_sort_by_win_rate_then_name() {
        let mut rows = vec![row("b", Some(0.5)), row("c", None), row("a", Some(0.5)), row("d", Some(0.9))];
        sort_rows(&mut rows);
        let names: Vec<_> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["d", "a", "b", "c"]);
    }

    #[test]
    fn table_is_aligned() {
        let t = comparison_table(&[row("long_name", Some(0.25)), row("x", Some(0.75))]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("x "));
        assert!(lines[1].ends_with("0.7500"));
        assert!(lines[2].contains("  -  "));
    }

    #[test]
    fn svg_has_one_bar_per_value() {
        let svg = bar_chart_svg("a<b", &[("x".into(), 1.0), ("y".into(), -0.5)]);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}

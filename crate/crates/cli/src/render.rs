use sagp_core::Matrix;

const CELL: usize = 28;
const MARGIN: usize = 80;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// White (0) to dark blue (1).
fn shade(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - 0.9 * v)).round() as u8;
    let g = (255.0 * (1.0 - 0.7 * v)).round() as u8;
    let b = (255.0 * (1.0 - 0.3 * v)).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub fn svg_heatmap(probs: &Matrix, labels: &[String], title: &str) -> String {
    let n = probs.rows();
    let size = MARGIN + n * CELL + 10;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" font-family=\"monospace\" font-size=\"11\">\n",
        size + 20
    );
    out += &format!("<text x=\"4\" y=\"14\">{}</text>\n", escape(title));
    for (i, label) in labels.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        out += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 4,
            MARGIN + 20 + i * CELL + CELL / 2 + 4,
            escape(label)
        );
        out += &format!(
            "<text x=\"{c}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN + 14,
            escape(label)
        );
    }
    for i in 0..n {
        for j in 0..n {
            let v = probs.get(i, j);
            out += &format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" stroke=\"#999\"><title>{} -> {}: {v:.4}</title></rect>\n",
                MARGIN + j * CELL,
                MARGIN + 20 + i * CELL,
                shade(v),
                escape(&labels[i]),
                escape(&labels[j])
            );
        }
    }
    out + "</svg>\n"
}

pub fn text_grid(probs: &Matrix, labels: &[String]) -> String {
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:width$}", "");
    for l in labels {
        out += &format!(" {l:>width$}");
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out += &format!("{l:width$}");
        for j in 0..probs.cols() {
            out += &format!(" {:>width$.3}", probs.get(i, j));
        }
        out.push('\n');
    }
    out
}

//! Finalization-order rendering of decode traces.
//!
//! A position finalized at step `k` of `N` has step index `i = N - k`
//! (0 for the first refinement step) and falls in tercile `floor(3i / N)`:
//! early, middle or late.

use std::fmt::Write as _;
use std::path::Path;

use scenediff::decode::DecodeTrace;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Early,
    Middle,
    Late,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Early => "early",
            Phase::Middle => "middle",
            Phase::Late => "late",
        }
    }

    pub fn svg_color(self) -> &'static str {
        match self {
            Phase::Early => "#f2c200",
            Phase::Middle => "#ff69b4",
            Phase::Late => "#1e6fd9",
        }
    }

    fn ansi(self) -> &'static str {
        match self {
            Phase::Early => "\x1b[33m",
            Phase::Middle => "\x1b[95m",
            Phase::Late => "\x1b[34m",
        }
    }
}

/// Phase of a position finalized at step `k` (1..=n); `None` if never finalized.
pub fn phase(k: usize, n: usize) -> Option<Phase> {
    if k == 0 || k > n {
        return None;
    }
    Some(match 3 * (n - k) / n {
        0 => Phase::Early,
        1 => Phase::Middle,
        _ => Phase::Late,
    })
}

/// Reads a trace, reporting the JSON path of the first bad field.
pub fn load_trace(path: &Path) -> Result<DecodeTrace, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let trace: DecodeTrace = serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::Runtime(anyhow::anyhow!("malformed trace {}: field `{}`: {}", path.display(), e.path(), e.inner()))
    })?;
    check_trace(&trace).map_err(|m| CliError::Runtime(anyhow::anyhow!("malformed trace {}: {m}", path.display())))?;
    Ok(trace)
}

/// Structural consistency beyond what deserialization checks.
pub fn check_trace(t: &DecodeTrace) -> Result<(), String> {
    let n = t.schedule.n;
    let l = t.finalization_step.len();
    if n == 0 {
        return Err("field `schedule.n`: must be at least 1".into());
    }
    if t.output_ids.len() != l {
        return Err(format!(
            "field `output_ids`: length {} differs from finalization_step length {l}",
            t.output_ids.len()
        ));
    }
    if !t.tokens.is_empty() && t.tokens.len() != l {
        return Err(format!("field `tokens`: length {} differs from finalization_step length {l}", t.tokens.len()));
    }
    if let Some((i, &k)) = t.finalization_step.iter().enumerate().find(|(_, &k)| k > n) {
        return Err(format!("field `finalization_step[{i}]`: step {k} exceeds N = {n}"));
    }
    Ok(())
}

fn token_labels(t: &DecodeTrace) -> Vec<String> {
    if t.tokens.is_empty() {
        t.output_ids.iter().map(|id| id.to_string()).collect()
    } else {
        t.tokens.clone()
    }
}

pub fn render_ansi(t: &DecodeTrace) -> String {
    let mut s = String::new();
    for (i, tok) in token_labels(t).iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        match phase(t.finalization_step[i], t.schedule.n) {
            Some(p) => {
                let _ = write!(s, "{}{tok}\x1b[0m", p.ansi());
            }
            None => s.push_str(tok),
        }
    }
    s.push('\n');
    let legend: Vec<String> = [Phase::Early, Phase::Middle, Phase::Late]
        .iter()
        .map(|p| format!("{}{}\x1b[0m", p.ansi(), p.label()))
        .collect();
    let _ = writeln!(s, "legend: {}", legend.join(" "));
    s
}

fn xml_escape(s: &str) -> String {
    let mut o = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => o.push_str("&lt;"),
            '>' => o.push_str("&gt;"),
            '&' => o.push_str("&amp;"),
            '"' => o.push_str("&quot;"),
            '\'' => o.push_str("&apos;"),
            _ => o.push(c),
        }
    }
    o
}

const CHAR_W: usize = 9;
const PAD: usize = 10;

/// Standalone SVG: one row of tokens colored by phase, then a legend row.
pub fn render_svg(t: &DecodeTrace) -> String {
    let labels = token_labels(t);
    let mut x = PAD;
    let mut body = String::new();
    for (i, tok) in labels.iter().enumerate() {
        let fill = phase(t.finalization_step[i], t.schedule.n).map_or("#808080", Phase::svg_color);
        let class = phase(t.finalization_step[i], t.schedule.n).map_or("none", Phase::label);
        let _ = writeln!(
            body,
            r#"  <text x="{x}" y="30" fill="{fill}" class="{class}" data-step="{}">{}</text>"#,
            t.finalization_step[i],
            xml_escape(tok)
        );
        x += (tok.chars().count() + 1) * CHAR_W;
    }
    let mut lx = PAD;
    for p in [Phase::Early, Phase::Middle, Phase::Late] {
        let _ = writeln!(body, r#"  <rect x="{lx}" y="50" width="12" height="12" fill="{}"/>"#, p.svg_color());
        let _ = writeln!(body, r##"  <text x="{}" y="61" fill="#000000">{}</text>"##, lx + 16, p.label());
        lx += 90;
    }
    let width = x.max(lx) + PAD;
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"75\" viewBox=\"0 0 {width} 75\" \
         font-family=\"monospace\" font-size=\"14\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n{body}</svg>\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terciles() {
        assert_eq!(phase(1, 1), Some(Phase::Early));
        let got: Vec<Phase> = (1..=9).rev().map(|k| phase(k, 9).unwrap()).collect();
        assert_eq!(got[..3], [Phase::Early; 3]);
        assert_eq!(got[3..6], [Phase::Middle; 3]);
        assert_eq!(got[6..], [Phase::Late; 3]);
        assert_eq!(phase(0, 4), None);
        assert_eq!(phase(5, 4), None);
        // N = 8: i = 0..2 early, 3..5 middle, 6..7 late.
        let got: Vec<Phase> = (1..=8).rev().map(|k| phase(k, 8).unwrap()).collect();
        assert_eq!(got.iter().filter(|&&p| p == Phase::Early).count(), 3);
        assert_eq!(got.iter().filter(|&&p| p == Phase::Late).count(), 2);
    }

    #[test]
    fn escaping() {
        assert_eq!(xml_escape("<c12>&\"'"), "&lt;c12&gt;&amp;&quot;&apos;");
    }
}

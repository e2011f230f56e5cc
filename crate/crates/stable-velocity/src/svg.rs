//! Minimal hand-emitted SVG line charts: axes with numeric tick
//! labels, one series, and an optional shaded band between a lower
//! and upper envelope.
//!
//! Rendering is a pure function of the input, so identical charts
//! produce byte-identical SVG; tick labels in particular are
//! formatted deterministically.

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 32.0;
const MARGIN_BOTTOM: f64 = 48.0;
const TICKS: usize = 5;

/// A lower/upper envelope drawn as a shaded polygon behind the series.
#[derive(Debug, Clone)]
pub struct Band {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// One line chart.
#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Shared x positions for the series and the band.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub band: Option<Band>,
}

impl Chart {
    pub fn new(title: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Chart {
            title: title.into(),
            x_label: String::new(),
            y_label: String::new(),
            x,
            y,
            band: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.x.is_empty() || self.x.len() != self.y.len() {
            return Err(Error::Shape(format!(
                "chart needs matching nonempty x/y (got {} and {})",
                self.x.len(),
                self.y.len()
            )));
        }
        if let Some(b) = &self.band {
            if b.lo.len() != self.x.len() || b.hi.len() != self.x.len() {
                return Err(Error::Shape(
                    "band envelopes must match the x grid length".into(),
                ));
            }
        }
        let all = self
            .x
            .iter()
            .chain(&self.y)
            .chain(self.band.iter().flat_map(|b| b.lo.iter().chain(&b.hi)));
        for &v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite("chart data".into()));
            }
        }
        Ok(())
    }
}

/// Formats a tick label: up to four significant digits, no trailing
/// zeros, plain notation in a sane range and scientific outside it.
pub fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    };
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Coordinate formatting inside paths: two decimals is well below a
/// pixel at this canvas size.
fn px(v: f64) -> String {
    format!("{v:.2}")
}

struct Scale {
    lo: f64,
    hi: f64,
    out_lo: f64,
    out_hi: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        self.out_lo + t * (self.out_hi - self.out_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..TICKS)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (TICKS - 1) as f64)
            .collect()
    }
}

fn data_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        // Degenerate range: widen symmetrically so the line is visible.
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

/// Renders the chart to a complete SVG document.
pub fn render(chart: &Chart) -> Result<String> {
    chart.validate()?;
    let (x_lo, x_hi) = data_range(chart.x.iter().copied());
    let y_values = chart
        .y
        .iter()
        .copied()
        .chain(chart.band.iter().flat_map(|b| b.lo.iter().chain(&b.hi).copied()));
    let (y_lo, y_hi) = data_range(y_values);

    let sx = Scale {
        lo: x_lo,
        hi: x_hi,
        out_lo: MARGIN_LEFT,
        out_hi: WIDTH - MARGIN_RIGHT,
    };
    // SVG y grows downward; flip the output range.
    let sy = Scale {
        lo: y_lo,
        hi: y_hi,
        out_lo: HEIGHT - MARGIN_BOTTOM,
        out_hi: MARGIN_TOP,
    };

    let mut out = String::with_capacity(4096);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if !chart.title.is_empty() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            px(WIDTH / 2.0),
            esc(&chart.title)
        ));
    }

    if let Some(band) = &chart.band {
        let mut pts = String::new();
        for (i, &x) in chart.x.iter().enumerate() {
            pts.push_str(&format!("{},{} ", px(sx.map(x)), px(sy.map(band.hi[i]))));
        }
        for (i, &x) in chart.x.iter().enumerate().rev() {
            pts.push_str(&format!("{},{} ", px(sx.map(x)), px(sy.map(band.lo[i]))));
        }
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"#9ecae1\" fill-opacity=\"0.45\" stroke=\"none\"/>\n",
            pts.trim_end()
        ));
    }

    // Axes.
    let x_axis_y = HEIGHT - MARGIN_BOTTOM;
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(MARGIN_LEFT),
        px(x_axis_y),
        px(WIDTH - MARGIN_RIGHT),
        px(x_axis_y)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(MARGIN_LEFT),
        px(MARGIN_TOP),
        px(MARGIN_LEFT),
        px(x_axis_y)
    ));

    for t in sx.ticks() {
        let x = sx.map(t);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
            px(x),
            px(x_axis_y),
            px(x_axis_y + 5.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px(x),
            px(x_axis_y + 18.0),
            fmt_tick(t)
        ));
    }
    for t in sy.ticks() {
        let y = sy.map(t);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"black\"/>\n",
            px(MARGIN_LEFT - 5.0),
            px(MARGIN_LEFT),
            px(y)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            px(MARGIN_LEFT - 8.0),
            px(y + 4.0),
            fmt_tick(t)
        ));
    }

    if !chart.x_label.is_empty() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px((MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0),
            px(HEIGHT - 10.0),
            esc(&chart.x_label)
        ));
    }
    if !chart.y_label.is_empty() {
        let cx = 16.0;
        let cy = (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 {} {})\">{}</text>\n",
            px(cx),
            px(cy),
            px(cx),
            px(cy),
            esc(&chart.y_label)
        ));
    }

    let mut pts = String::new();
    for (i, &x) in chart.x.iter().enumerate() {
        pts.push_str(&format!("{},{} ", px(sx.map(x)), px(sy.map(chart.y[i]))));
    }
    out.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"1.5\"/>\n",
        pts.trim_end()
    ));

    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_chart() -> Chart {
        let mut c = Chart::new("curve", vec![0.0, 0.5, 1.0], vec![0.0, 2.0, 1.0]);
        c.x_label = "t".into();
        c.y_label = "value".into();
        c
    }

    #[test]
    fn renders_axes_series_and_labels() {
        let svg = render(&simple_chart()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("<polyline"));
        assert_eq!(svg.matches("<line").count(), 2 + 2 * TICKS);
        // Tick labels cover the data range deterministically.
        assert!(svg.contains(">0</text>"));
        assert!(svg.contains(">1</text>"));
        assert!(svg.contains(">2</text>"));
        assert!(svg.contains(">0.5</text>"));
        assert!(svg.contains(">t</text>"));
    }

    #[test]
    fn band_adds_a_polygon() {
        let mut c = simple_chart();
        assert!(!render(&c).unwrap().contains("<polygon"));
        c.band = Some(Band {
            lo: vec![-0.5, 1.0, 0.5],
            hi: vec![0.5, 3.0, 1.5],
        });
        let svg = render(&c).unwrap();
        assert!(svg.contains("<polygon"));
        // Band extremes widen the y scale: max label is band's 3.
        assert!(svg.contains(">3</text>"));
    }

    #[test]
    fn output_is_deterministic() {
        let c = simple_chart();
        assert_eq!(render(&c).unwrap(), render(&c).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(render(&Chart::new("x", vec![], vec![])).is_err());
        assert!(render(&Chart::new("x", vec![1.0], vec![1.0, 2.0])).is_err());
        assert!(render(&Chart::new("x", vec![0.0], vec![f64::NAN])).is_err());
        let mut c = simple_chart();
        c.band = Some(Band {
            lo: vec![0.0],
            hi: vec![1.0],
        });
        assert!(render(&c).is_err());
    }

    #[test]
    fn degenerate_ranges_are_widened() {
        let c = Chart::new("flat", vec![0.0, 1.0], vec![2.0, 2.0]);
        let svg = render(&c).unwrap();
        assert!(svg.contains("<polyline"));
        // Flat value 2 with 10% padding: ticks 1.8 .. 2.2.
        assert!(svg.contains(">1.8</text>") && svg.contains(">2.2</text>"), "{svg}");
    }

    #[test]
    fn tick_formatting() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(0.5), "0.5");
        assert_eq!(fmt_tick(-1.25), "-1.25");
        assert_eq!(fmt_tick(3.0), "3");
        assert_eq!(fmt_tick(0.1235), "0.1235");
        assert_eq!(fmt_tick(1.0e-5), "1.00e-5");
        assert_eq!(fmt_tick(250000.0), "2.50e5");
    }

    #[test]
    fn escapes_markup_in_text() {
        let mut c = simple_chart();
        c.title = "a < b & c".into();
        let svg = render(&c).unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}

//! Minimal hand-rolled SVG charts: enough to plot protocol curves and the
//! policy-ranking scatter without a plotting dependency.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 5] = ["#1f6fb2", "#d95f02", "#2a9d5c", "#8a4fbf", "#b23b3b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Frame {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in series {
            for &(x, y) in &s.points {
                xs.push(x);
                ys.push(y);
            }
        }
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (min(&xs), max(&xs));
        let (mut y0, mut y1) = (min(&ys).min(0.0), max(&ys));
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(title: &str, config_hash: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<!-- config={config_hash} -->\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"15\">{title}</text>\n",
        x = WIDTH / 2.0
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    ));
    for i in 0..=4 {
        let fx = frame.x0 + (frame.x1 - frame.x0) * i as f64 / 4.0;
        let fy = frame.y0 + (frame.y1 - frame.y0) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{:.3}</text>\n",
            frame.px(fx),
            HEIGHT - MARGIN + 18.0,
            fx
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{:.3}</text>\n",
            MARGIN - 6.0,
            frame.py(fy) + 4.0,
            fy
        ));
    }
    out.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">{x_label}</text>\n",
        x = WIDTH / 2.0,
        y = HEIGHT - 14.0
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{y}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\" transform=\"rotate(-90 16 {y})\">{y_label}</text>\n",
        y = HEIGHT / 2.0
    ));
    out
}

fn legend(series: &[Series]) -> String {
    let mut out = String::new();
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let y = MARGIN + 16.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{ry}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            s.label,
            x = WIDTH - MARGIN - 120.0,
            ry = y - 9.0,
            tx = WIDTH - MARGIN - 105.0,
            ty = y
        ));
    }
    out
}

pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    config_hash: &str,
) -> String {
    let frame = Frame::from_series(series);
    let mut out = header(title, config_hash);
    out.push_str(&axes(&frame, x_label, y_label));
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                frame.px(x),
                frame.py(y)
            ));
        }
    }
    out.push_str(&legend(series));
    out.push_str("</svg>\n");
    out
}

pub fn scatter_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(String, f64, f64)],
    config_hash: &str,
) -> String {
    let series = [Series {
        label: String::new(),
        points: points.iter().map(|&(_, x, y)| (x, y)).collect(),
    }];
    let frame = Frame::from_series(&series);
    let mut out = header(title, config_hash);
    out.push_str(&axes(&frame, x_label, y_label));
    // Identity reference line over the shared span.
    let lo = frame.x0.max(frame.y0);
    let hi = frame.x1.min(frame.y1);
    if hi > lo {
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999999\" \
             stroke-dasharray=\"4 3\"/>\n",
            frame.px(lo),
            frame.py(lo),
            frame.px(hi),
            frame.py(hi)
        ));
    }
    for (label, x, y) in points {
        out.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"{}\"/>\n\
             <text x=\"{tx:.2}\" y=\"{ty:.2}\" font-family=\"sans-serif\" \
             font-size=\"10\">{label}</text>\n",
            COLORS[0],
            px = frame.px(*x),
            py = frame.py(*y),
            tx = frame.px(*x) + 6.0,
            ty = frame.py(*y) - 6.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_valid_looking_svg_and_deterministic() {
        let series = [
            Series { label: "full".into(), points: vec![(5.0, 0.1), (10.0, 0.2)] },
            Series { label: "bare".into(), points: vec![(5.0, 0.2), (10.0, 0.4)] },
        ];
        let a = line_chart("drift", "H", "distance", &series, "cafe");
        let b = line_chart("drift", "H", "distance", &series, "cafe");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("polyline"));
        assert!(a.contains("config=cafe"));

        let pts = vec![("p0".to_string(), 0.1, 0.2), ("p1".to_string(), 0.8, 0.7)];
        let s = scatter_chart("ranking", "real", "imagined", &pts, "beef");
        assert!(s.contains("circle"));
        assert!(s.contains("p1"));
    }

    #[test]
    fn degenerate_single_point_does_not_divide_by_zero() {
        let series = [Series { label: "one".into(), points: vec![(1.0, 1.0)] }];
        let svg = line_chart("t", "x", "y", &series, "00");
        assert!(!svg.contains("NaN"));
        assert!(!svg.contains("inf"));
    }
}

//! Static report artifacts: an accuracy-vs-epsilon SVG curve, per-layer
//! attention maps as binary PGM, a tutor histogram CSV, and a one-row
//! summary table. Everything is written as plain deterministic text or
//! bytes; there is no plotting dependency.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::distill::connection_histogram;
use crate::dtype::Real;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Network;
use crate::tensor::Tensor;

/// One point of the perturbation sweep: budget in 1/255 units plus the
/// measured accuracy.
#[derive(Clone, Copy, Debug)]
pub struct SweepPoint {
    pub eps255: u32,
    pub accuracy: f64,
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn sweep_csv(path: &Path, attack: &str, steps: usize, points: &[SweepPoint]) -> Result<()> {
    let mut lines = vec!["attack,eps_255,epsilon,steps,accuracy".to_string()];
    for p in points {
        lines.push(format!(
            "{attack},{},{},{steps},{}",
            p.eps255,
            p.eps255 as f64 / 255.0,
            p.accuracy
        ));
    }
    write_lines(path, &lines)
}

/// Accuracy (y, 0..1) against perturbation budget (x, in 1/255 units),
/// drawn with axis lines, tick labels, and one polyline.
pub fn sweep_svg(path: &Path, title: &str, points: &[SweepPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Config {
            message: "sweep has no points to plot".into(),
        });
    }
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const L: f64 = 56.0;
    const R: f64 = 16.0;
    const T: f64 = 32.0;
    const B: f64 = 44.0;
    let x_max = points.iter().map(|p| p.eps255).max().unwrap().max(1) as f64;
    let px = |e: f64| L + (W - L - R) * e / x_max;
    let py = |a: f64| T + (H - T - B) * (1.0 - a);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"20\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{title}</text>",
        (L + W - R) / 2.0
    );
    // Axes.
    let _ = writeln!(
        s,
        "<line x1=\"{L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - B,
        W - R,
        H - B
    );
    let _ = writeln!(
        s,
        "<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - B
    );
    for p in points {
        let x = px(p.eps255 as f64);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            H - B,
            H - B + 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            H - B + 16.0,
            p.eps255
        );
    }
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let y = py(a);
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{L}\" y2=\"{y:.1}\" stroke=\"black\"/>",
            L - 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{a:.1}</text>",
            L - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">epsilon (1/255)</text>",
        (L + W - R) / 2.0,
        H - 8.0
    );
    let pts: Vec<String> = points
        .iter()
        .map(|p| format!("{:.1},{:.1}", px(p.eps255 as f64), py(p.accuracy)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
    for p in points {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"crimson\"/>",
            px(p.eps255 as f64),
            py(p.accuracy)
        );
    }
    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s)?;
    Ok(())
}

/// Binary (P5) PGM, min-max scaled per map; a constant map renders black.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "write_pgm",
            shape: vec![h, w],
            reason: format!("got {} values", values.len()),
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in values {
        let byte = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        };
        out.push(byte);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Per-layer attention maps (channel-wise sum of squares) for one image,
/// as (h, w, values) triples in layer order.
pub fn attention_images<E: Real>(
    net: &Network<E>,
    image: &Tensor<E>,
) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut g = Graph::new();
    let x = g.leaf(image.clone(), false);
    let vars = net.bind(&mut g, false);
    let (_, acts) = net.forward(&mut g, &vars, x, true)?;
    let mut maps = Vec::with_capacity(acts.len());
    for act in acts {
        let m = g.attention_map_batched(act)?;
        let v = g.value(m);
        let (h, w) = (v.shape()[1], v.shape()[2]);
        maps.push((h, w, v.data().iter().map(|e| e.as_f64()).collect()));
    }
    Ok(maps)
}

pub fn tutor_histogram_csv(path: &Path, tutors: &[usize], n_t: usize) -> Result<()> {
    let counts = connection_histogram(tutors, n_t);
    let mut lines = vec!["teacher_layer,count".to_string()];
    for (layer, count) in counts.iter().enumerate() {
        lines.push(format!("{layer},{count}"));
    }
    write_lines(path, &lines)
}

/// Table-2-style row: robustness numbers plus the model's cost columns.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub model_id: String,
    pub clean: f64,
    pub fgsm: f64,
    pub pgd: f64,
    pub mi_fgsm: f64,
    pub params: usize,
    pub macs: u64,
}

pub fn summary_csv(path: &Path, row: &SummaryRow) -> Result<()> {
    write_lines(
        path,
        &[
            "model_id,clean,fgsm,pgd,mi_fgsm,params,macs".to_string(),
            format!(
                "{},{},{},{},{},{},{}",
                row.model_id, row.clean, row.fgsm, row.pgd, row.mi_fgsm, row.params, row.macs
            ),
        ],
    )
}

//! SVG lineage renderer for report figures.
//!
//! The classic lineage layout: leaves spread along the x axis, time runs
//! downward, each cell is a vertical line whose length is its lifetime,
//! divisions are horizontal connectors. Each measured point tints its step
//! of the cell line on a white-to-black ramp. Accepted branches get an
//! outline box, onset points a marker.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lineage::{CellId, LineageTree};

const MARGIN: f64 = 20.0;
const LEAF_SPACING: f64 = 8.0;
const MINUTE_HEIGHT: f64 = 2.0;

/// Render a lineage tree; `accepted` branch roots are outlined and
/// `onsets` marked.
pub fn render_svg(
    tree: &LineageTree,
    accepted: &[CellId],
    onsets: &[(CellId, i64)],
) -> Result<String> {
    let topo = tree.topology();
    if topo.is_empty() {
        return Err(Error::Argument("cannot render an empty tree".to_string()));
    }

    // Leaf positions in traversal order, internal cells centred over their
    // children.
    let mut x = vec![0.0f64; topo.len()];
    let mut next_leaf = 0usize;
    for ix in topo.post_order() {
        let kids = topo.children_ix(ix);
        if kids.is_empty() {
            x[ix] = MARGIN + next_leaf as f64 * LEAF_SPACING;
            next_leaf += 1;
        } else {
            x[ix] = kids.iter().map(|&c| x[c]).sum::<f64>() / kids.len() as f64;
        }
    }

    let t_min = tree.records().map(|r| r.times[0]).min().unwrap();
    let t_max = tree
        .records()
        .map(|r| *r.times.last().unwrap())
        .max()
        .unwrap();
    let y_of = |t: i64| MARGIN + (t - t_min) as f64 * MINUTE_HEIGHT;

    let (v_lo, v_hi) = intensity_range(tree);
    let gray = |v: f64| {
        let norm = if v_hi > v_lo {
            ((v - v_lo) / (v_hi - v_lo)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (255.0 * (1.0 - norm)).round() as u8
    };

    let width = MARGIN * 2.0 + (next_leaf.max(1) - 1) as f64 * LEAF_SPACING;
    let height = y_of(t_max + 1) + MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    // Division connectors.
    for ix in 0..topo.len() {
        let kids = topo.children_ix(ix);
        if kids.len() == 2 {
            let y = y_of(tree.record_ix(kids[0]).times[0]);
            let _ = writeln!(
                svg,
                r#"<line class="division" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="0.8"/>"#,
                x[kids[0]], x[kids[1]]
            );
        }
    }

    // Cell lines, one tinted step per measured minute.
    for ix in 0..topo.len() {
        let rec = tree.record_ix(ix);
        let _ = writeln!(svg, r#"<g class="cell" data-cell="{}">"#, rec.id);
        for (t, v) in rec.times.iter().zip(&rec.intensities) {
            let g = gray(*v);
            let _ = writeln!(
                svg,
                r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="rgb({g},{g},{g})" stroke-width="2.4"/>"#,
                x0 = x[ix],
                y0 = y_of(*t),
                y1 = y_of(t + 1),
            );
        }
        let _ = writeln!(svg, "</g>");
    }

    // Accepted-branch outlines.
    for root in accepted {
        let root_ix = topo.lookup(root)?;
        let sub = topo.subtree_ix(root_ix);
        let x_lo = sub.iter().map(|&i| x[i]).fold(f64::INFINITY, f64::min) - 3.0;
        let x_hi = sub.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max) + 3.0;
        let t_lo = sub
            .iter()
            .map(|&i| tree.record_ix(i).times[0])
            .min()
            .unwrap();
        let t_hi = sub
            .iter()
            .map(|&i| *tree.record_ix(i).times.last().unwrap())
            .max()
            .unwrap();
        let _ = writeln!(
            svg,
            r#"<rect class="branch" data-root="{root}" x="{x_lo:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="red" stroke-width="1.2"/>"#,
            y_of(t_lo) - 2.0,
            x_hi - x_lo,
            y_of(t_hi + 1) - y_of(t_lo) + 4.0,
        );
    }

    // Onset markers.
    for (cell, minute) in onsets {
        let ix = topo.lookup(cell)?;
        let _ = writeln!(
            svg,
            r#"<circle class="onset" data-cell="{cell}" cx="{:.2}" cy="{:.2}" r="2.6" fill="none" stroke="red" stroke-width="1.2"/>"#,
            x[ix],
            y_of(*minute) + MINUTE_HEIGHT / 2.0,
        );
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

fn intensity_range(tree: &LineageTree) -> (f64, f64) {
    let mut values: Vec<f64> = tree
        .records()
        .flat_map(|r| r.intensities.iter().copied())
        .collect();
    values.sort_by(|a, b| a.total_cmp(b));
    // Clip the ramp at the 1% and 99% quantiles so single outliers do not
    // flatten the palette.
    let lo = values[(values.len() - 1) / 100];
    let hi = values[(values.len() - 1) * 99 / 100];
    (lo, hi)
}

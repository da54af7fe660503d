//! Static SVG rendering of maps, predictions, and plans.
//!
//! Everything is drawn in world meters; the y axis is flipped at emission
//! time (SVG grows downward) and the viewBox is fitted to the drawn geometry
//! with a margin. Output is deterministic: fixed palette, fixed coordinate
//! formatting, no timestamps.

use nalgebra::Point2;

use crate::aime::ScenarioTree;
use crate::contingency::TrajectoryTree;
use crate::gmm::{Gaussian2, ScenePrediction};
use crate::world::LaneGraph;

/// Okabe–Ito palette (colorblind-safe), cycled per scenario.
const PALETTE: [&str; 8] = [
    "#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9", "#f0e442", "#999999",
];

/// Stroke color of the ego plan overlay.
const PLAN_COLOR: &str = "#000000";

/// How many meters of padding the fitted viewBox keeps around the geometry.
const MARGIN: f64 = 5.0;

/// Every n-th prediction step gets an uncertainty ellipse; drawing all of
/// them hides the means.
const ELLIPSE_STRIDE: usize = 5;

fn fmt(x: f64) -> String {
    format!("{x:.2}")
}

/// An SVG figure under construction: shapes plus the world-space bounding
/// box they cover.
pub struct Figure {
    shapes: Vec<String>,
    min: Point2<f64>,
    max: Point2<f64>,
}

impl Default for Figure {
    fn default() -> Self {
        Self::new()
    }
}

impl Figure {
    pub fn new() -> Self {
        Figure {
            shapes: Vec::new(),
            min: Point2::new(f64::INFINITY, f64::INFINITY),
            max: Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn cover(&mut self, p: Point2<f64>, r: f64) {
        self.min.x = self.min.x.min(p.x - r);
        self.min.y = self.min.y.min(p.y - r);
        self.max.x = self.max.x.max(p.x + r);
        self.max.y = self.max.y.max(p.y + r);
    }

    /// A stroked open path through `pts`.
    pub fn polyline(&mut self, pts: &[Point2<f64>], stroke: &str, width: f64, opacity: f64) {
        if pts.len() < 2 {
            return;
        }
        let mut d = String::new();
        for (i, p) in pts.iter().enumerate() {
            self.cover(*p, width / 2.0);
            let cmd = if i == 0 { 'M' } else { 'L' };
            d.push_str(&format!("{cmd}{} {} ", fmt(p.x), fmt(-p.y)));
        }
        self.shapes.push(format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{}\" \
             stroke-opacity=\"{}\" stroke-linecap=\"round\" stroke-linejoin=\"round\"/>",
            d.trim_end(),
            fmt(width),
            fmt(opacity),
        ));
    }

    /// A filled disc.
    pub fn disc(&mut self, c: Point2<f64>, r: f64, fill: &str, opacity: f64) {
        self.cover(c, r);
        self.shapes.push(format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{fill}\" fill-opacity=\"{}\"/>",
            fmt(c.x),
            fmt(-c.y),
            fmt(r),
            fmt(opacity),
        ));
    }

    /// The k-sigma ellipse of a Gaussian: axes from the covariance
    /// eigenvalues, orientation from the leading eigenvector. The rotation
    /// angle is negated along with y because the flip mirrors orientation.
    pub fn gaussian_ellipse(&mut self, g: &Gaussian2, k: f64, fill: &str, opacity: f64) {
        let eig = g.cov_mat().symmetric_eigen();
        let major = usize::from(eig.eigenvalues[1] > eig.eigenvalues[0]);
        let (rx, ry) = (
            k * eig.eigenvalues[major].max(0.0).sqrt(),
            k * eig.eigenvalues[1 - major].max(0.0).sqrt(),
        );
        let axis = eig.eigenvectors.column(major);
        let angle = axis.y.atan2(axis.x).to_degrees();
        let c = g.mean_point();
        self.cover(c, rx.max(ry));
        self.shapes.push(format!(
            "<ellipse cx=\"{}\" cy=\"{}\" rx=\"{}\" ry=\"{}\" transform=\"rotate({} {} {})\" \
             fill=\"{fill}\" fill-opacity=\"{}\"/>",
            fmt(c.x),
            fmt(-c.y),
            fmt(rx.max(0.05)),
            fmt(ry.max(0.05)),
            fmt(-angle),
            fmt(c.x),
            fmt(-c.y),
            fmt(opacity),
        ));
    }

    /// Lane corridors as wide light strokes with dashed centerlines.
    pub fn map(&mut self, map: &LaneGraph, corridor_half_width: f64) {
        let mut lanes = map.lanes.clone();
        lanes.sort_by(|a, b| a.id.cmp(&b.id));
        for lane in &lanes {
            let pts: Vec<Point2<f64>> = lane
                .centerline
                .iter()
                .map(|&[x, y]| Point2::new(x, y))
                .collect();
            self.polyline(&pts, "#d0d0d0", 2.0 * corridor_half_width, 1.0);
        }
        for lane in &lanes {
            let pts: Vec<Point2<f64>> = lane
                .centerline
                .iter()
                .map(|&[x, y]| Point2::new(x, y))
                .collect();
            if pts.len() < 2 {
                continue;
            }
            let mut d = String::new();
            for (i, p) in pts.iter().enumerate() {
                let cmd = if i == 0 { 'M' } else { 'L' };
                d.push_str(&format!("{cmd}{} {} ", fmt(p.x), fmt(-p.y)));
            }
            self.shapes.push(format!(
                "<path d=\"{}\" fill=\"none\" stroke=\"#a0a0a0\" stroke-width=\"0.15\" \
                 stroke-dasharray=\"1.5 1.5\"/>",
                d.trim_end(),
            ));
        }
    }

    /// Assembles the document: fitted viewBox, white background, then the
    /// shapes in insertion order.
    pub fn finish(self) -> String {
        let (min, max) = if self.min.x.is_finite() {
            (self.min, self.max)
        } else {
            (Point2::new(0.0, 0.0), Point2::new(1.0, 1.0))
        };
        let x = min.x - MARGIN;
        let y = -(max.y + MARGIN);
        let w = max.x - min.x + 2.0 * MARGIN;
        let h = max.y - min.y + 2.0 * MARGIN;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\" width=\"900\">\n",
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h),
        );
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h),
        ));
        for s in &self.shapes {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str("</svg>\n");
        out
    }
}

/// One scene prediction: mean trajectories per entity, colored by scenario,
/// with 2-sigma ellipses every few steps. The ego mean is drawn wider.
pub fn render_prediction(
    map: &LaneGraph,
    pred: &ScenePrediction,
    corridor_half_width: f64,
) -> String {
    let mut fig = Figure::new();
    fig.map(map, corridor_half_width);
    for (si, scenario) in pred.scenarios.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (ei, entity) in scenario.entities.iter().enumerate() {
            for g in entity.steps.iter().step_by(ELLIPSE_STRIDE) {
                fig.gaussian_ellipse(g, 2.0, color, 0.08);
            }
            let width = if ei == 0 { 0.5 } else { 0.3 };
            fig.polyline(&entity.means(), color, width, 0.9);
        }
    }
    fig.finish()
}

/// A scenario tree's predicted segments (thin, colored by root policy) with
/// the chosen trajectory tree drawn on top in black.
pub fn render_plan(
    map: &LaneGraph,
    tree: &ScenarioTree,
    traj: &TrajectoryTree,
    corridor_half_width: f64,
) -> String {
    let mut fig = Figure::new();
    fig.map(map, corridor_half_width);

    // Color a node by the root child it descends from.
    let policy_of = |mut id: usize| -> usize {
        let mut child = id;
        while let Some(p) = tree.node(id).parent {
            child = id;
            id = p;
        }
        tree.root()
            .children
            .iter()
            .position(|&c| c == child)
            .unwrap_or(0)
    };

    for node in &tree.nodes {
        let Some(segment) = &node.segment else {
            continue;
        };
        let color = PALETTE[policy_of(node.id) % PALETTE.len()];
        for (ei, entity) in segment.entities.iter().enumerate() {
            for g in entity.steps.iter().step_by(ELLIPSE_STRIDE) {
                fig.gaussian_ellipse(g, 2.0, color, 0.06);
            }
            let width = if ei == 0 { 0.35 } else { 0.25 };
            fig.polyline(&entity.means(), color, width, 0.8);
        }
    }

    for seg in &traj.segments {
        let pts: Vec<Point2<f64>> = seg.states.iter().map(|s| s.pos()).collect();
        fig.polyline(&pts, PLAN_COLOR, 0.6, 1.0);
    }
    if let Some(seg) = traj.segments.first() {
        fig.disc(seg.states[0].pos(), 0.8, PLAN_COLOR, 1.0);
    }
    fig.finish()
}

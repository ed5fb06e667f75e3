//! SVG rendering of a single planned scenario.

use std::fmt::Write;

use crate::kinematics::Trajectory;
use crate::pipeline::Plan;
use crate::scenario::{Scenario, EGO_RADIUS};

const MARGIN: f64 = 6.0;
const PIXELS_PER_METER: f64 = 8.0;

fn polyline(out: &mut String, points: &[[f64; 2]], style: &str) {
    let pts: Vec<String> = points.iter().map(|p| format!("{:.3},{:.3}", p[0], -p[1])).collect();
    let _ = writeln!(out, r#"  <polyline points="{}" fill="none" {style}/>"#, pts.join(" "));
}

fn path_points(scenario: &Scenario, traj: &Trajectory) -> Vec<[f64; 2]> {
    std::iter::once(scenario.ego_init.position()).chain(traj.positions()).collect()
}

fn corridor_edges(scenario: &Scenario) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let line = &scenario.corridor.centerline;
    let w = scenario.corridor.half_width;
    let mut left = Vec::with_capacity(line.len());
    let mut right = Vec::with_capacity(line.len());
    for i in 0..line.len() {
        let a = line[i.saturating_sub(1)];
        let b = line[(i + 1).min(line.len() - 1)];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let n = dx.hypot(dy).max(1e-12);
        let (nx, ny) = (-dy / n, dx / n);
        left.push([line[i][0] + nx * w, line[i][1] + ny * w]);
        right.push([line[i][0] - nx * w, line[i][1] - ny * w]);
    }
    (left, right)
}

/// Corridor, obstacles, expert, proposals, refined candidates and the
/// selected trajectory of `plan`.
pub fn render_plan(scenario: &Scenario, plan: &Plan) -> String {
    let mut all: Vec<[f64; 2]> = path_points(scenario, &scenario.expert);
    for t in plan.proposals.trajectories.iter().chain(&plan.refined) {
        all.extend(t.positions());
    }
    for o in &scenario.obstacles {
        all.push([o.center[0] - o.radius, o.center[1] - o.radius]);
        all.push([o.center[0] + o.radius, o.center[1] + o.radius]);
    }
    let min_x = all.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - MARGIN;
    let max_x = all.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + MARGIN;
    let min_y = all.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - MARGIN;
    let max_y = all.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + MARGIN;
    let (w, h) = (max_x - min_x, max_y - min_y);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{min_x:.3} {:.3} {w:.3} {h:.3}">"#,
        w * PIXELS_PER_METER,
        h * PIXELS_PER_METER,
        -max_y
    );
    let _ = writeln!(out, "  <title>{} ({:?})</title>", scenario.id, scenario.maneuver);
    let _ = writeln!(
        out,
        r##"  <rect x="{min_x:.3}" y="{:.3}" width="{w:.3}" height="{h:.3}" fill="#ffffff"/>"##,
        -max_y
    );

    let (left, right) = corridor_edges(scenario);
    let mut area = left.clone();
    area.extend(right.iter().rev());
    let pts: Vec<String> = area.iter().map(|p| format!("{:.3},{:.3}", p[0], -p[1])).collect();
    let _ = writeln!(out, r##"  <polygon class="corridor" points="{}" fill="#eeeeee"/>"##, pts.join(" "));
    polyline(&mut out, &left, r##"class="corridor-edge" stroke="#555555" stroke-width="0.15""##);
    polyline(&mut out, &right, r##"class="corridor-edge" stroke="#555555" stroke-width="0.15""##);
    polyline(
        &mut out,
        &scenario.corridor.centerline,
        r##"class="centerline" stroke="#999999" stroke-width="0.1" stroke-dasharray="1,1""##,
    );

    for o in &scenario.obstacles {
        let _ = writeln!(
            out,
            r##"  <circle class="obstacle" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="#d9534f" fill-opacity="0.6"/>"##,
            o.center[0],
            -o.center[1],
            o.radius
        );
    }

    for t in &plan.proposals.trajectories {
        polyline(
            &mut out,
            &path_points(scenario, t),
            r##"class="proposal" stroke="#5b8def" stroke-width="0.15" stroke-opacity="0.7""##,
        );
    }
    for t in &plan.refined {
        polyline(
            &mut out,
            &path_points(scenario, t),
            r##"class="refined" stroke="#f0ad4e" stroke-width="0.15" stroke-opacity="0.8""##,
        );
    }
    polyline(
        &mut out,
        &path_points(scenario, &scenario.expert),
        r##"class="expert" stroke="#222222" stroke-width="0.25" stroke-dasharray="0.8,0.4""##,
    );
    polyline(
        &mut out,
        &path_points(scenario, &plan.trajectory),
        r##"class="selected" stroke="#2e9d4a" stroke-width="0.45""##,
    );
    let ego = scenario.ego_init.position();
    let _ = writeln!(
        out,
        r##"  <circle class="ego" cx="{:.3}" cy="{:.3}" r="{EGO_RADIUS:.3}" fill="none" stroke="#2e9d4a" stroke-width="0.2"/>"##,
        ego[0], -ego[1]
    );
    out.push_str("</svg>\n");
    out
}

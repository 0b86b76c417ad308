//! Self-contained SVG emission: the collection-ratio learning curve on a
//! log-scale episode axis, and top-view trajectory maps with device
//! markers and position estimates.

use std::fmt::Write as _;

use crate::env::DeviceSpec;
use crate::envlearn::LocalizationResult;
use crate::federation::IterationMetrics;
use crate::learner::TrajStep;
use crate::world::CityMap;

/// Colors for per-device trajectory segments and markers.
const PALETTE: [&str; 10] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
    "#008080", "#9a6324",
];

fn device_color(id: usize) -> &'static str {
    PALETTE[id % PALETTE.len()]
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Learning curve: collection ratio against real-world episodes on a
/// logarithmic x-axis.
pub fn render_metrics_svg(rows: &[IterationMetrics], title: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let max_episode = rows
        .iter()
        .map(|r| r.real_world_episodes)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let log_max = max_episode.log10().max(1e-9);
    let x_of = |episodes: f64| ml + (episodes.max(1.0).log10() / log_max) * plot_w;
    let y_of = |ratio: f64| mt + (1.0 - ratio.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"##
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="white"/>"##);
    let _ = writeln!(
        s,
        r##"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"##,
        w / 2.0
    );
    // Axes.
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"##,
        fmt(ml),
        fmt(mt + plot_h),
        fmt(ml + plot_w),
        fmt(mt + plot_h)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"##,
        fmt(ml),
        fmt(mt),
        fmt(ml),
        fmt(mt + plot_h)
    );
    // Log-decade x ticks.
    let mut decade = 1.0;
    while decade <= max_episode {
        let x = x_of(decade);
        let _ = writeln!(
            s,
            r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"##,
            fmt(x),
            fmt(mt + plot_h),
            fmt(mt + plot_h + 6.0)
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"##,
            fmt(x),
            fmt(mt + plot_h + 20.0),
            decade as u64
        );
        decade *= 10.0;
    }
    // Ratio ticks.
    for i in 0..=5 {
        let ratio = i as f64 / 5.0;
        let y = y_of(ratio);
        let _ = writeln!(
            s,
            r##"<line x1="{1}" y1="{0}" x2="{2}" y2="{0}" stroke="black"/>"##,
            fmt(y),
            fmt(ml - 6.0),
            fmt(ml)
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{}</text>"##,
            fmt(ml - 10.0),
            fmt(y + 4.0),
            fmt(ratio)
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">real-world episodes (log scale)</text>"##,
        fmt(ml + plot_w / 2.0),
        fmt(h - 12.0)
    );
    let _ = writeln!(
        s,
        r##"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">collection ratio</text>"##,
        fmt(mt + plot_h / 2.0),
        fmt(mt + plot_h / 2.0)
    );
    if !rows.is_empty() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{}",
                    fmt(x_of(r.real_world_episodes as f64)),
                    fmt(y_of(r.collection_ratio))
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#4363d8" stroke-width="2"/>"##,
            points.join(" ")
        );
        for p in &points {
            let mut it = p.split(',');
            let (x, y) = (it.next().unwrap(), it.next().unwrap());
            let _ = writeln!(s, r##"<circle cx="{x}" cy="{y}" r="3" fill="#4363d8"/>"##);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Top view of one episode: building cells shaded by height, per-device
/// colored trajectory segments (black while idle), anchor devices drawn
/// as triangles, unknown devices as diamonds, estimates as crosses.
pub fn render_trajectory_svg(
    map: &CityMap,
    devices: &[DeviceSpec],
    trajectory: &[TrajStep],
    estimates: &[LocalizationResult],
) -> String {
    let scale = (720.0 / map.width_m()).min(720.0 / map.height_m());
    let (w, h) = (map.width_m() * scale + 40.0, map.height_m() * scale + 40.0);
    let x_of = |xm: f64| 20.0 + xm * scale;
    let y_of = |ym: f64| h - 20.0 - ym * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"##,
        fmt(w),
        fmt(h),
        fmt(w),
        fmt(h)
    );
    let _ = writeln!(s, r##"<rect width="{}" height="{}" fill="white"/>"##, fmt(w), fmt(h));
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#f4f4f4" stroke="black"/>"##,
        fmt(x_of(0.0)),
        fmt(y_of(map.height_m())),
        fmt(map.width_m() * scale),
        fmt(map.height_m() * scale)
    );
    // Buildings.
    let max_height = (0..map.height_cells)
        .flat_map(|iy| (0..map.width_cells).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| map.height_at(crate::world::Cell::new(ix, iy)))
        .fold(0.0f64, f64::max)
        .max(1.0);
    for iy in 0..map.height_cells {
        for ix in 0..map.width_cells {
            let height = map.height_at(crate::world::Cell::new(ix, iy));
            if height > 0.0 {
                let shade = 220.0 - 140.0 * (height / max_height);
                let shade = shade as u8;
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="rgb({shade},{shade},{shade})"/>"##,
                    fmt(x_of(ix as f64 * map.cell_size_m)),
                    fmt(y_of((iy + 1) as f64 * map.cell_size_m)),
                    fmt(map.cell_size_m * scale),
                    fmt(map.cell_size_m * scale)
                );
            }
        }
    }
    // Trajectory segments, colored by the device being served.
    let n_uavs = trajectory.first().map(|t| t.uavs.len()).unwrap_or(0);
    for uav in 0..n_uavs {
        for pair in trajectory.windows(2) {
            let (a, b) = (&pair[0].uavs[uav], &pair[1].uavs[uav]);
            let (ax, ay) = map.cell_center(crate::world::Cell::new(a.ix, a.iy));
            let (bx, by) = map.cell_center(crate::world::Cell::new(b.ix, b.iy));
            let color = match b.assigned {
                Some(k) => device_color(k),
                None => "black",
            };
            let _ = writeln!(
                s,
                r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2" stroke-linecap="round"/>"##,
                fmt(x_of(ax)),
                fmt(y_of(ay)),
                fmt(x_of(bx)),
                fmt(y_of(by))
            );
        }
    }
    // Start/terminal marker.
    let (sx, sy) = map.cell_center(map.start_cell);
    let _ = writeln!(
        s,
        r##"<circle cx="{}" cy="{}" r="6" fill="none" stroke="black" stroke-width="2"/>"##,
        fmt(x_of(sx)),
        fmt(y_of(sy))
    );
    let (tx, ty) = map.cell_center(map.terminal_cell);
    let _ = writeln!(
        s,
        r##"<circle cx="{}" cy="{}" r="9" fill="none" stroke="black" stroke-width="2"/>"##,
        fmt(x_of(tx)),
        fmt(y_of(ty))
    );
    // Devices.
    for d in devices {
        let (x, y) = map.cell_center(d.cell);
        let (x, y) = (x_of(x), y_of(y));
        let color = device_color(d.id);
        if d.anchor {
            let _ = writeln!(
                s,
                r##"<polygon points="{},{} {},{} {},{}" fill="{color}" stroke="black"/>"##,
                fmt(x),
                fmt(y - 7.0),
                fmt(x - 6.0),
                fmt(y + 5.0),
                fmt(x + 6.0),
                fmt(y + 5.0)
            );
        } else {
            let _ = writeln!(
                s,
                r##"<polygon points="{},{} {},{} {},{} {},{}" fill="{color}" stroke="black"/>"##,
                fmt(x),
                fmt(y - 7.0),
                fmt(x + 7.0),
                fmt(y),
                fmt(x),
                fmt(y + 7.0),
                fmt(x - 7.0),
                fmt(y)
            );
        }
    }
    // Estimated unknown positions.
    for e in estimates {
        let (x, y) = (x_of(e.x_m), y_of(e.y_m));
        let _ = writeln!(
            s,
            r##"<path d="M {} {} L {} {} M {} {} L {} {}" stroke="red" stroke-width="2.5"/>"##,
            fmt(x - 6.0),
            fmt(y - 6.0),
            fmt(x + 6.0),
            fmt(y + 6.0),
            fmt(x - 6.0),
            fmt(y + 6.0),
            fmt(x + 6.0),
            fmt(y - 6.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

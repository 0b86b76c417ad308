//! Diagnostic probe (run explicitly with --ignored): maps the
//! localization likelihood over the RBM grid for a troublesome device to
//! size the attraction basin.

use std::sync::Arc;

use rand::Rng;

use skyharvest::channel::ChannelParams;
use skyharvest::config::fixtures;
use skyharvest::envlearn::{nll_cached, synthesize_measurements, LearnedChannel, LosCache};
use skyharvest::seed;
use skyharvest::world::{Cell, GridPos};

#[test]
#[ignore = "diagnostic"]
fn probe_localization_landscape() {
    let (map, devices) = fixtures::rbm_map();
    let map = Arc::new(map);
    let truth = ChannelParams::default();
    let learned = LearnedChannel::exact(&truth);
    let altitudes = [55.0, 60.0, 65.0];

    for (seed_value, dev_id) in [(2u64, 9usize), (12, 3), (16, 2)] {
        let dev = devices[dev_id];
        let mut rng = seed::rng(seed_value, "accept-loc", 0);
        let positions: Vec<GridPos> = (0..200)
            .map(|_| {
                GridPos::new(
                    rng.gen_range(0..map.width_cells),
                    rng.gen_range(0..map.height_cells),
                    altitudes[rng.gen_range(0..altitudes.len())],
                )
            })
            .collect();
        // Device order matters for the rng stream: replay earlier devices.
        let unknowns: Vec<_> = devices.iter().filter(|d| !d.anchor).collect();
        let mut records = Vec::new();
        for d in &unknowns {
            let r = synthesize_measurements(&map, &truth, d, &positions, &mut rng);
            if d.id == dev_id {
                records = r;
            }
        }
        let mut cache = LosCache::new();
        let mut best = f64::INFINITY;
        let mut values = Vec::new();
        for iy in 0..map.height_cells {
            for ix in 0..map.width_cells {
                let pos = map.cell_center(Cell::new(ix, iy));
                let v = nll_cached(&records, pos, &learned, &map, &mut cache);
                best = best.min(v);
                values.push(v);
            }
        }
        let below = |thr: f64| values.iter().filter(|&&v| v < thr).count();
        println!(
            "seed {seed_value} dev {dev_id} (cell {:?}): min {best:.1}, cells within +100: {}, +500: {}, +1000: {}, +2000: {}, total {}",
            dev.cell,
            below(best + 100.0),
            below(best + 500.0),
            below(best + 1000.0),
            below(best + 2000.0),
            values.len()
        );
    }
}

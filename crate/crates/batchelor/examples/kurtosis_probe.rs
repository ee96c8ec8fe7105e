// scratch: kurtosis and timing probe for both window modes
use batchelor::flow::*;
use batchelor::geom::*;
use batchelor::scalar::*;
use std::time::Instant;

fn run(mode: WindowMode, n_per_area: f64, side: f64, rd: f64, t_end: f64) {
    let f = FlowRealization::new(FlowParams { d: 1.0, kappa_d: 1e-4, dt: 1e-2, seed: 4242 }).unwrap();
    let theta_rms = (std::f64::consts::PI * n_per_area * 5.6).sqrt();
    let cull = 0.1 * theta_rms;
    let mut db = BlobDatabase::new(Rect::centered_square(side), mode, cull, 5.0);
    let pump = PumpingConfig { nu: n_per_area, amp_sigma: 1.0, spawn_margin: 5.0 };
    let tstart = Instant::now();
    let step = 0.1;
    let mut k = 0u64;
    let mut t = 0.0;
    while t < t_end {
        let t1 = t + step;
        db.spawn(&pump, &f, t, t1, 90_000 + k).unwrap();
        db.evolve_to(&f, t1).unwrap();
        if k % 5 == 4 { db.cull(); }
        t = t1;
        k += 1;
    }
    let evolve_time = tstart.elapsed();
    let nx = (side / rd).round() as usize;
    let rstart = Instant::now();
    let g = db
        .render(&GridSpec { origin: Vec2::new(-side / 2.0, -side / 2.0), pixel_size: rd, nx, ny: nx })
        .unwrap();
    let render_time = rstart.elapsed();
    let m = field_moments(&g).unwrap();
    println!(
        "{:?}: blobs={} evolve={:.1?} render={:.1?} var={:.2} (pred {:.2}) skew={:.3} K={:.3}",
        mode, db.blobs.len(), evolve_time, render_time, m.variance,
        std::f64::consts::PI * n_per_area * 5.6,
        m.skewness.unwrap(), m.excess_kurtosis.unwrap()
    );
}

fn main() {
    run(WindowMode::Periodic, 1.0, 40.0, 0.1, 12.0);
    run(WindowMode::Open, 1.0, 40.0, 0.1, 12.0);
}

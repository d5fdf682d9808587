//! Prints sampled `κ̈_max` and `V⃛_max` for a scenario over a Hill-frame box.
//!
//! cargo run --release -p itcbf --example calibrate -- [scenario.toml]

use itcbf::bounding::StateBox;
use itcbf::docking::ScenarioConfig;

fn main() -> itcbf::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ScenarioConfig::load(p.as_ref())?,
        None => ScenarioConfig::default_scenario(),
    };
    let s = cfg.build()?;
    let lo = vec![-3000.0, -14000.0, -15.0, -15.0, cfg.t0];
    let hi = vec![3000.0, 2000.0, 15.0, 15.0, cfg.t_end];
    let cal = s.calibrate(&StateBox::new(lo, hi)?, 200_000, 1)?;
    for (label, k) in &cal.kappa_ddot_max {
        println!("{label}: kappa_ddot_max = {k:.6e}");
    }
    println!("v_dddot_max = {:.6e}", cal.v_dddot_max);
    Ok(())
}

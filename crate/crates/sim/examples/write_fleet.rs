//! Regenerates `fleets/hackathon2019.fleet`:
//!
//! ```sh
//! cargo run -p ilog-sim --example write_fleet > crates/sim/fleets/hackathon2019.fleet
//! ```

use ilog_sim::calibration::{hackathon_fleet, DEFAULT_SEED};

fn main() {
    print!("{}", ilog_sim::calibration::render(&hackathon_fleet(DEFAULT_SEED)));
}

//! Feeders shipped with the crate: a 4-bus mixed-phase feeder (one 3-phase,
//! one 2-phase, one 1-phase branch) used throughout the tests, and a
//! 13-bus-scale feeder for timing runs. Each comes with a matching load
//! dynamics document; the same files live under `feeders/` for CLI use.

use crate::network::{load_network_str, NetworkModel};
use crate::sim::LoadDynamics;

pub const FOUR_BUS_JSON: &str = include_str!("../../../feeders/four_bus.json");
pub const FOUR_BUS_DYNAMICS_JSON: &str = include_str!("../../../feeders/four_bus_dynamics.json");
pub const THIRTEEN_BUS_JSON: &str = include_str!("../../../feeders/thirteen_bus.json");
pub const THIRTEEN_BUS_DYNAMICS_JSON: &str =
    include_str!("../../../feeders/thirteen_bus_dynamics.json");

pub fn four_bus() -> NetworkModel {
    load_network_str(FOUR_BUS_JSON).expect("bundled feeder is valid")
}

pub fn four_bus_dynamics(net: &NetworkModel) -> LoadDynamics {
    LoadDynamics::from_str(net, FOUR_BUS_DYNAMICS_JSON).expect("bundled dynamics are valid")
}

pub fn thirteen_bus() -> NetworkModel {
    load_network_str(THIRTEEN_BUS_JSON).expect("bundled feeder is valid")
}

pub fn thirteen_bus_dynamics(net: &NetworkModel) -> LoadDynamics {
    LoadDynamics::from_str(net, THIRTEEN_BUS_DYNAMICS_JSON).expect("bundled dynamics are valid")
}

use serde::{Deserialize, Serialize};

/// Natural units with `hbar = 1`.
///
/// Internally every energy is a multiple of one reference energy and every
/// time a multiple of `hbar / reference`. `ghz_per_unit` records the
/// reference energy as `h * f` with `f` in GHz, the convention used by
/// annealing hardware; it is only needed at ingestion and report boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSystem {
    pub energy_label: String,
    pub ghz_per_unit: f64,
}

impl Default for UnitSystem {
    fn default() -> Self {
        UnitSystem { energy_label: "J".into(), ghz_per_unit: 1.0 }
    }
}

impl UnitSystem {
    pub fn with_reference_ghz(label: &str, ghz: f64) -> Self {
        UnitSystem { energy_label: label.into(), ghz_per_unit: ghz }
    }

    pub fn energy_from_ghz(&self, ghz: f64) -> f64 {
        ghz / self.ghz_per_unit
    }

    pub fn energy_to_ghz(&self, e: f64) -> f64 {
        e * self.ghz_per_unit
    }

    /// Seconds per internal time unit: `hbar / E_ref = 1 / (2 pi f)`.
    pub fn seconds_per_time_unit(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.ghz_per_unit * 1e9)
    }

    pub fn time_from_us(&self, us: f64) -> f64 {
        us * 1e-6 / self.seconds_per_time_unit()
    }

    pub fn time_to_us(&self, t: f64) -> f64 {
        t * self.seconds_per_time_unit() * 1e6
    }
}

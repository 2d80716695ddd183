//! Net power injections per bus per phase, the input shared by both solvers.

use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::{BusIdx, Feeder, PerPhase, Phase};

#[derive(Debug, Error, PartialEq)]
#[error("bus `{bus}` has no phase {phase}")]
pub struct PhaseMismatch {
    pub bus: String,
    pub phase: Phase,
}

/// Net complex power injection (generation minus demand) per bus per phase,
/// in per-unit. Entries exist exactly for each bus's present phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    s: Vec<PerPhase<Complex64>>,
}

impl Injections {
    /// All-zero injections on every present phase of every bus.
    pub fn zeros(feeder: &Feeder) -> Injections {
        Injections {
            s: feeder
                .buses()
                .iter()
                .map(|b| PerPhase::uniform(b.phases, Complex64::new(0.0, 0.0)))
                .collect(),
        }
    }

    /// Injections from the feeder's constant-power loads alone
    /// (net = -demand), with demand scaled by `load_scale`.
    pub fn from_loads(feeder: &Feeder, load_scale: f64) -> Injections {
        let mut inj = Injections::zeros(feeder);
        for (i, bus) in feeder.buses().iter().enumerate() {
            for (ph, p) in bus.load_p.iter() {
                inj.add(BusIdx(i), ph, -p * load_scale, 0.0).unwrap();
            }
            for (ph, q) in bus.load_q.iter() {
                inj.add(BusIdx(i), ph, 0.0, -q * load_scale).unwrap();
            }
        }
        inj
    }

    pub fn get(&self, bus: BusIdx) -> &PerPhase<Complex64> {
        &self.s[bus.0]
    }

    /// Adds `p + jq` (per-unit) to the net injection at a bus phase.
    pub fn add(&mut self, bus: BusIdx, phase: Phase, p: f64, q: f64) -> Result<(), PhaseMismatch> {
        match self.s[bus.0].get(phase) {
            Some(cur) => {
                self.s[bus.0].set(phase, cur + Complex64::new(p, q));
                Ok(())
            }
            None => Err(PhaseMismatch {
                bus: format!("#{}", bus.0),
                phase,
            }),
        }
    }

    /// Component-wise `self + rhs` (used by the superposition tests).
    pub fn sum(&self, rhs: &Injections) -> Injections {
        let s = self
            .s
            .iter()
            .zip(&rhs.s)
            .map(|(a, b)| a.map(|ph, v| v + b.get(ph).unwrap_or_default()))
            .collect();
        Injections { s }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn loads_become_negative_injections() {
        let f = fixtures::twobus();
        let inj = Injections::from_loads(&f, 1.0);
        let leaf = f.bus_idx("b1").unwrap();
        let s = inj.get(leaf).get(Phase::A).unwrap();
        assert!(s.re < 0.0);
        assert!(s.im < 0.0);
    }

    #[test]
    fn add_on_absent_phase_is_rejected() {
        let f = fixtures::twobus();
        let mut inj = Injections::zeros(&f);
        let leaf = f.bus_idx("b1").unwrap();
        assert!(inj.add(leaf, Phase::B, 0.1, 0.0).is_err());
    }
}

//! In-memory model of a radial three-phase unbalanced distribution feeder.
//!
//! A feeder is a rooted directed tree: the substation is the root, line
//! segments point away from it, and every other bus has exactly one parent
//! segment. All electrical quantities are stored in per-unit on the bases
//! recorded in [`Bases`]; conversion from engineering units happens once at
//! load time (see [`crate::io`]).

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One phase of a three-phase system.
///
/// The ordering `A < B < C` is relied on for deterministic iteration
/// everywhere phases are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    /// Index 0/1/2 for A/B/C, used to address dense per-phase storage.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        match i {
            0 => Some(Phase::A),
            1 => Some(Phase::B),
            2 => Some(Phase::C),
            _ => None,
        }
    }

    /// Lower-case letter used in file formats and reports.
    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_letter(c: char) -> Option<Phase> {
        match c.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A subset of the three phases, stored as a bitset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const EMPTY: PhaseSet = PhaseSet(0);
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn single(p: Phase) -> PhaseSet {
        PhaseSet(1 << p.index())
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn insert(&mut self, p: Phase) {
        self.0 |= 1 << p.index();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Phases present in both sets.
    pub fn intersection(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    /// Iterates in A, B, C order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Parses strings like `"abc"`, `"bc"`, `"a"`.
    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut set = PhaseSet::EMPTY;
        for c in s.chars() {
            set.insert(Phase::from_letter(c)?);
        }
        Some(set)
    }
}

impl FromIterator<Phase> for PhaseSet {
    fn from_iter<T: IntoIterator<Item = Phase>>(iter: T) -> Self {
        let mut s = PhaseSet::EMPTY;
        for p in iter {
            s.insert(p);
        }
        s
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

/// A value for each present phase; absent phases hold nothing rather than zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerPhase<T> {
    vals: [Option<T>; 3],
}

impl<T> Default for PerPhase<T> {
    fn default() -> Self {
        PerPhase {
            vals: [None, None, None],
        }
    }
}

impl<T: Copy> PerPhase<T> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_fn(phases: PhaseSet, mut f: impl FnMut(Phase) -> T) -> Self {
        let mut out = Self::default();
        for p in phases.iter() {
            out.vals[p.index()] = Some(f(p));
        }
        out
    }

    pub fn uniform(phases: PhaseSet, v: T) -> Self {
        Self::from_fn(phases, |_| v)
    }

    pub fn get(&self, p: Phase) -> Option<T> {
        self.vals[p.index()]
    }

    pub fn set(&mut self, p: Phase, v: T) {
        self.vals[p.index()] = Some(v);
    }

    pub fn phases(&self) -> PhaseSet {
        Phase::ALL
            .into_iter()
            .filter(|p| self.vals[p.index()].is_some())
            .collect()
    }

    /// Iterates present phases in A, B, C order.
    pub fn iter(&self) -> impl Iterator<Item = (Phase, T)> + '_ {
        Phase::ALL
            .into_iter()
            .filter_map(move |p| self.vals[p.index()].map(|v| (p, v)))
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(Phase, T) -> U) -> PerPhase<U> {
        let mut out = PerPhase::default();
        for (p, v) in self.iter() {
            out.set(p, f(p, v));
        }
        out
    }
}

impl PerPhase<f64> {
    pub fn zeros(phases: PhaseSet) -> Self {
        Self::uniform(phases, 0.0)
    }
}

/// Index of a bus in the feeder's sorted bus table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BusIdx(pub usize);

/// Index of a segment in the feeder's segment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegIdx(pub usize);

/// Per-unit bases for the feeder. All solver quantities are per-unit on these.
///
/// `power_kva` is the per-phase base power; `voltage_v` the line-to-neutral
/// base voltage, so `z_base = voltage_v^2 / (power_kva * 1000)` ohms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub power_kva: f64,
    pub voltage_v: f64,
}

impl Bases {
    pub fn impedance_ohm(&self) -> f64 {
        self.voltage_v * self.voltage_v / (self.power_kva * 1000.0)
    }
}

/// A bus (node) of the feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    /// Constant-power demand, per present phase, in per-unit (positive = consumption).
    pub load_p: PerPhase<f64>,
    pub load_q: PerPhase<f64>,
    /// Line-to-neutral nominal voltage in volts.
    pub nominal_voltage_v: f64,
}

/// A line segment (directed edge parent → child) with its per-phase series
/// impedance matrix in per-unit.
///
/// The matrix is dense over the segment's present phases; entries for absent
/// phases do not exist (`None`), distinguishing "no conductor" from "zero
/// impedance".
#[derive(Debug, Clone, PartialEq)]
pub struct LineSegment {
    pub from: String,
    pub to: String,
    pub phases: PhaseSet,
    z: [[Option<Complex64>; 3]; 3],
}

impl LineSegment {
    pub fn new(
        from: impl Into<String>,
        to: impl Into<String>,
        entries: &[(Phase, Phase, Complex64)],
    ) -> LineSegment {
        let mut z = [[None; 3]; 3];
        let mut phases = PhaseSet::EMPTY;
        for &(p, q, v) in entries {
            z[p.index()][q.index()] = Some(v);
            if p == q {
                phases.insert(p);
            }
        }
        LineSegment {
            from: from.into(),
            to: to.into(),
            phases,
            z,
        }
    }

    /// Convenience constructor for a segment with identical self impedance on
    /// each phase and a shared mutual impedance between phase pairs.
    pub fn symmetric(
        from: impl Into<String>,
        to: impl Into<String>,
        phases: PhaseSet,
        z_self: Complex64,
        z_mutual: Complex64,
    ) -> LineSegment {
        let mut entries = Vec::new();
        for p in phases.iter() {
            for q in phases.iter() {
                entries.push((p, q, if p == q { z_self } else { z_mutual }));
            }
        }
        LineSegment::new(from, to, &entries)
    }

    pub fn z(&self, p: Phase, q: Phase) -> Option<Complex64> {
        self.z[p.index()][q.index()]
    }

    /// Diagonal (self) impedance for a present phase.
    pub fn z_self(&self, p: Phase) -> Option<Complex64> {
        self.z(p, p)
    }
}

/// A PV unit with a smart inverter. `rating_kva` / `rating_pu` are per phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PvUnit {
    pub id: String,
    pub bus: String,
    pub phases: PhaseSet,
    pub rating_kva_per_phase: f64,
    pub rating_pu: f64,
}

/// A violation found by [`Feeder::validate`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("bus `{0}` appears more than once")]
    DuplicateBus(String),
    #[error("segment {from}->{to} references unknown bus `{bus}`")]
    UnknownBus {
        from: String,
        to: String,
        bus: String,
    },
    #[error("root bus `{0}` does not exist")]
    UnknownRoot(String),
    #[error("bus `{bus}` has more than one parent segment ({first} and {second})")]
    MultipleParents {
        bus: String,
        first: String,
        second: String,
    },
    #[error("root bus `{0}` has a parent segment")]
    RootHasParent(String),
    #[error("not a tree: bus `{0}` is not reachable from the root")]
    Unreachable(String),
    #[error("not a tree: segment count {segments} != bus count {buses} - 1")]
    EdgeCount { segments: usize, buses: usize },
    #[error("bus `{0}` has no phases")]
    EmptyPhases(String),
    #[error("segment {from}->{to}: phase {phase} has zero series reactance")]
    ZeroReactance {
        from: String,
        to: String,
        phase: Phase,
    },
    #[error("segment {from}->{to}: phases {seg} not carried by parent bus `{from}` ({parent})")]
    SegmentPhasesExceedParent {
        from: String,
        to: String,
        seg: PhaseSet,
        parent: PhaseSet,
    },
    #[error("bus `{bus}`: phases {bus_phases} not carried by its feeding segment ({seg})")]
    BusPhasesExceedSegment {
        bus: String,
        bus_phases: PhaseSet,
        seg: PhaseSet,
    },
    #[error("segment {from}->{to}: off-diagonal impedance on absent phase pair {p}{q}")]
    ImpedanceOutsidePhases {
        from: String,
        to: String,
        p: Phase,
        q: Phase,
    },
    #[error("bus `{bus}`: load on absent phase {phase}")]
    LoadOnAbsentPhase { bus: String, phase: Phase },
    #[error("bus `{bus}`: nominal voltage must be positive (got {value})")]
    BadNominalVoltage { bus: String, value: f64 },
    #[error("pv `{pv}`: references unknown bus `{bus}`")]
    PvUnknownBus { pv: String, bus: String },
    #[error("pv `{pv}`: phases {pv_phases} not present at bus `{bus}` ({bus_phases})")]
    PvPhasesAbsent {
        pv: String,
        bus: String,
        pv_phases: PhaseSet,
        bus_phases: PhaseSet,
    },
    #[error("pv `{pv}`: rating must be positive (got {value})")]
    BadPvRating { pv: String, value: f64 },
    #[error("base {name} must be positive (got {value})")]
    BadBase { name: String, value: f64 },
}

#[derive(Debug, Error)]
#[error("unknown bus id `{0}`")]
pub struct UnknownBusId(pub String);

/// A validated radial feeder. Immutable after construction and safe to share
/// across threads; mutable simulation state (inverter setpoints) lives in the
/// engine, not here.
#[derive(Debug, Clone)]
pub struct Feeder {
    buses: Vec<Bus>,
    index: BTreeMap<String, BusIdx>,
    segments: Vec<LineSegment>,
    seg_from: Vec<BusIdx>,
    seg_to: Vec<BusIdx>,
    /// Parent segment of each bus (`None` for the root).
    parent_seg: Vec<Option<SegIdx>>,
    /// Child segments of each bus, ordered by child bus id.
    child_segs: Vec<Vec<SegIdx>>,
    /// Depth of each bus (root = 0).
    depth: Vec<usize>,
    pv_units: Vec<PvUnit>,
    root: BusIdx,
    bases: Bases,
}

impl Feeder {
    /// Builds and validates a feeder from parts already converted to per-unit.
    ///
    /// Returns every violation found, not just the first.
    pub fn new(
        buses: Vec<Bus>,
        segments: Vec<LineSegment>,
        pv_units: Vec<PvUnit>,
        root: &str,
        bases: Bases,
    ) -> Result<Feeder, Vec<Violation>> {
        let mut violations = Vec::new();

        if !(bases.power_kva > 0.0) {
            violations.push(Violation::BadBase {
                name: "power_kva".into(),
                value: bases.power_kva,
            });
        }
        if !(bases.voltage_v > 0.0) {
            violations.push(Violation::BadBase {
                name: "voltage_v".into(),
                value: bases.voltage_v,
            });
        }

        // Sorted-by-id bus table gives deterministic iteration everywhere.
        let mut buses = buses;
        buses.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = BTreeMap::new();
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id.clone(), BusIdx(i)).is_some() {
                violations.push(Violation::DuplicateBus(bus.id.clone()));
            }
        }

        let mut segments = segments;
        segments.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));

        let root_idx = match index.get(root) {
            Some(&i) => i,
            None => {
                violations.push(Violation::UnknownRoot(root.to_string()));
                return Err(violations);
            }
        };

        let n = buses.len();
        let mut seg_from = Vec::with_capacity(segments.len());
        let mut seg_to = Vec::with_capacity(segments.len());
        let mut parent_seg: Vec<Option<SegIdx>> = vec![None; n];
        let mut child_segs: Vec<Vec<SegIdx>> = vec![Vec::new(); n];

        for (s, seg) in segments.iter().enumerate() {
            let (from, to) = (index.get(&seg.from), index.get(&seg.to));
            for (end, opt) in [(&seg.from, from), (&seg.to, to)] {
                if opt.is_none() {
                    violations.push(Violation::UnknownBus {
                        from: seg.from.clone(),
                        to: seg.to.clone(),
                        bus: end.clone(),
                    });
                }
            }
            let (Some(&from), Some(&to)) = (from, to) else {
                continue;
            };
            seg_from.push(from);
            seg_to.push(to);
            if to == root_idx {
                violations.push(Violation::RootHasParent(root.to_string()));
            } else if let Some(prev) = parent_seg[to.0] {
                violations.push(Violation::MultipleParents {
                    bus: seg.to.clone(),
                    first: format!("{}->{}", segments[prev.0].from, segments[prev.0].to),
                    second: format!("{}->{}", seg.from, seg.to),
                });
            } else {
                parent_seg[to.0] = Some(SegIdx(s));
            }
            child_segs[from.0].push(SegIdx(s));
        }
        if seg_from.len() != segments.len() {
            // Unknown endpoints already reported; topology checks below would
            // only produce noise on a broken index.
            return Err(violations);
        }

        if segments.len() != n.saturating_sub(1) {
            violations.push(Violation::EdgeCount {
                segments: segments.len(),
                buses: n,
            });
        }

        // Reachability from the root along parent links; with |E| = |N| - 1
        // and unique parents this also excludes cycles.
        let mut depth = vec![usize::MAX; n];
        depth[root_idx.0] = 0;
        let mut stack = vec![root_idx];
        while let Some(i) = stack.pop() {
            for &s in &child_segs[i.0] {
                let to = seg_to[s.0];
                if depth[to.0] == usize::MAX {
                    depth[to.0] = depth[i.0] + 1;
                    stack.push(to);
                }
            }
        }
        for (i, bus) in buses.iter().enumerate() {
            if depth[i] == usize::MAX {
                violations.push(Violation::Unreachable(bus.id.clone()));
            }
        }

        // Phase consistency and electrical sanity.
        for bus in &buses {
            if bus.phases.is_empty() {
                violations.push(Violation::EmptyPhases(bus.id.clone()));
            }
            if !(bus.nominal_voltage_v > 0.0) {
                violations.push(Violation::BadNominalVoltage {
                    bus: bus.id.clone(),
                    value: bus.nominal_voltage_v,
                });
            }
            for series in [&bus.load_p, &bus.load_q] {
                for (p, _) in series.iter() {
                    if !bus.phases.contains(p) {
                        violations.push(Violation::LoadOnAbsentPhase {
                            bus: bus.id.clone(),
                            phase: p,
                        });
                        break;
                    }
                }
            }
        }

        for (s, seg) in segments.iter().enumerate() {
            let from_phases = buses[seg_from[s].0].phases;
            let to_phases = buses[seg_to[s].0].phases;
            if !seg.phases.is_subset_of(from_phases) {
                violations.push(Violation::SegmentPhasesExceedParent {
                    from: seg.from.clone(),
                    to: seg.to.clone(),
                    seg: seg.phases,
                    parent: from_phases,
                });
            }
            if !to_phases.is_subset_of(seg.phases) {
                violations.push(Violation::BusPhasesExceedSegment {
                    bus: seg.to.clone(),
                    bus_phases: to_phases,
                    seg: seg.phases,
                });
            }
            for p in Phase::ALL {
                for q in Phase::ALL {
                    if seg.z(p, q).is_some() && !(seg.phases.contains(p) && seg.phases.contains(q))
                    {
                        violations.push(Violation::ImpedanceOutsidePhases {
                            from: seg.from.clone(),
                            to: seg.to.clone(),
                            p,
                            q,
                        });
                    }
                }
            }
            for p in seg.phases.iter() {
                // The control laws divide by the series reactance; a zero
                // diagonal x is rejected up front.
                match seg.z_self(p) {
                    Some(z) if z.im != 0.0 => {}
                    _ => violations.push(Violation::ZeroReactance {
                        from: seg.from.clone(),
                        to: seg.to.clone(),
                        phase: p,
                    }),
                }
            }
        }

        let mut pv_units = pv_units;
        pv_units.sort_by(|a, b| a.id.cmp(&b.id));
        for pv in &pv_units {
            match index.get(&pv.bus) {
                None => violations.push(Violation::PvUnknownBus {
                    pv: pv.id.clone(),
                    bus: pv.bus.clone(),
                }),
                Some(&b) => {
                    if !pv.phases.is_subset_of(buses[b.0].phases) {
                        violations.push(Violation::PvPhasesAbsent {
                            pv: pv.id.clone(),
                            bus: pv.bus.clone(),
                            pv_phases: pv.phases,
                            bus_phases: buses[b.0].phases,
                        });
                    }
                }
            }
            if !(pv.rating_pu > 0.0) {
                violations.push(Violation::BadPvRating {
                    pv: pv.id.clone(),
                    value: pv.rating_kva_per_phase,
                });
            }
        }

        if !violations.is_empty() {
            return Err(violations);
        }

        Ok(Feeder {
            buses,
            index,
            segments,
            seg_from,
            seg_to,
            parent_seg,
            child_segs,
            depth,
            pv_units,
            root: root_idx,
            bases,
        })
    }

    pub fn bases(&self) -> Bases {
        self.bases
    }

    pub fn root(&self) -> BusIdx {
        self.root
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Buses in sorted-by-id order; `BusIdx` indexes this slice.
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn bus(&self, i: BusIdx) -> &Bus {
        &self.buses[i.0]
    }

    pub fn segments(&self) -> &[LineSegment] {
        &self.segments
    }

    pub fn segment(&self, s: SegIdx) -> &LineSegment {
        &self.segments[s.0]
    }

    pub fn seg_from(&self, s: SegIdx) -> BusIdx {
        self.seg_from[s.0]
    }

    pub fn seg_to(&self, s: SegIdx) -> BusIdx {
        self.seg_to[s.0]
    }

    pub fn pv_units(&self) -> &[PvUnit] {
        &self.pv_units
    }

    pub fn bus_idx(&self, id: &str) -> Result<BusIdx, UnknownBusId> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| UnknownBusId(id.to_string()))
    }

    pub fn depth(&self, i: BusIdx) -> usize {
        self.depth[i.0]
    }

    /// Parent segment of a bus; `None` for the root.
    pub fn parent_segment(&self, i: BusIdx) -> Option<SegIdx> {
        self.parent_seg[i.0]
    }

    /// Child segments of a bus, ordered by child bus id.
    pub fn child_segments(&self, i: BusIdx) -> &[SegIdx] {
        &self.child_segs[i.0]
    }

    /// Child bus ids of `bus_id`, in sorted order; empty for leaves.
    pub fn children(&self, bus_id: &str) -> Result<Vec<&str>, UnknownBusId> {
        let i = self.bus_idx(bus_id)?;
        Ok(self.child_segs[i.0]
            .iter()
            .map(|&s| self.buses[self.seg_to[s.0].0].id.as_str())
            .collect())
    }

    /// Segments from the substation down to `bus_id`, in downstream order;
    /// empty for the root.
    pub fn path_to_root(&self, bus_id: &str) -> Result<Vec<SegIdx>, UnknownBusId> {
        let mut i = self.bus_idx(bus_id)?;
        let mut path = Vec::with_capacity(self.depth[i.0]);
        while let Some(s) = self.parent_seg[i.0] {
            path.push(s);
            i = self.seg_from[s.0];
        }
        path.reverse();
        Ok(path)
    }

    /// Bus indices ordered so that every bus appears before its children
    /// (root first).
    pub fn topo_order(&self) -> Vec<BusIdx> {
        let mut order = Vec::with_capacity(self.buses.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            order.push(i);
            // Reverse so sorted-id children pop in ascending order.
            for &s in self.child_segs[i.0].iter().rev() {
                stack.push(self.seg_to[s.0]);
            }
        }
        order
    }

    /// All bus indices in the subtree hanging off `i`, including `i` itself.
    pub fn subtree(&self, i: BusIdx) -> Vec<BusIdx> {
        let mut out = Vec::new();
        let mut stack = vec![i];
        while let Some(b) = stack.pop() {
            out.push(b);
            for &s in &self.child_segs[b.0] {
                stack.push(self.seg_to[s.0]);
            }
        }
        out
    }
}

/// Re-runs every structural check against an already-built feeder.
///
/// `Feeder::new` rejects invalid input, so this returns the violations of a
/// hypothetical rebuild; it exists so corrupted variants can be probed in one
/// call.
pub fn validate(
    buses: Vec<Bus>,
    segments: Vec<LineSegment>,
    pv_units: Vec<PvUnit>,
    root: &str,
    bases: Bases,
) -> Vec<Violation> {
    match Feeder::new(buses, segments, pv_units, root, bases) {
        Ok(_) => Vec::new(),
        Err(v) => v,
    }
}

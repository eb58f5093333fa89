//! Electron-state-dependent nuclear precession and phase bookkeeping.
//!
//! All angular frequencies are in rad/s and all times in seconds. Phases are
//! reported in the frame rotating at the bare Larmor frequency, so only the
//! hyperfine shifts (of order the coupling strength) ever enter a sum.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check, Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// 13C gyromagnetic ratio in Hz/G.
pub const C13_GYROMAGNETIC_HZ_PER_GAUSS: f64 = 1070.84;

/// Default Hahn-echo coherence time of a 13C memory in the spin bath.
pub const DEFAULT_T2_HAHN: f64 = 60e-3;

/// Converts a frequency in Hz to an angular frequency.
#[inline]
pub fn angular(hz: f64) -> f64 {
    TWO_PI * hz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Bare nuclear Larmor frequency omega_0 (rad/s).
    larmor: f64,
}

impl FieldParams {
    pub fn from_larmor(larmor: f64) -> Result<Self> {
        check(larmor.is_finite() && larmor > 0.0, "larmor_frequency", || {
            format!("must be positive, got {larmor}")
        })?;
        Ok(Self { larmor })
    }

    /// omega_0 = 2 pi gamma B with gamma in Hz/G and B in gauss.
    pub fn from_field(gauss: f64, gamma_hz_per_gauss: f64) -> Result<Self> {
        check(gauss.is_finite() && gauss > 0.0, "magnetic_field", || {
            format!("must be positive, got {gauss}")
        })?;
        check(gamma_hz_per_gauss.is_finite() && gamma_hz_per_gauss > 0.0, "gyromagnetic_ratio", || {
            format!("must be positive, got {gamma_hz_per_gauss}")
        })?;
        Self::from_larmor(TWO_PI * gamma_hz_per_gauss * gauss)
    }

    /// The 414 G operating point, omega_0 / 2 pi = 443.275 kHz.
    pub fn reference_414g() -> Self {
        Self { larmor: angular(443_275.0) }
    }

    /// Field scaled by `factor` relative to this one (omega_0 is linear in B).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::from_larmor(self.larmor * factor)
    }

    pub fn larmor(&self) -> f64 {
        self.larmor
    }

    /// Nuclear Larmor period 2 pi / omega_0.
    pub fn larmor_period(&self) -> f64 {
        TWO_PI / self.larmor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    /// Parallel and perpendicular hyperfine components (rad/s). A_par may be negative.
    Hyperfine { a_par: f64, a_perp: f64 },
    /// Published frequency shift only (rad/s).
    Direct { delta_omega: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearSpinParams {
    pub label: String,
    pub coupling: Coupling,
    /// Free-induction decay time (s).
    pub t2_star: f64,
    /// Hahn-echo decay time (s).
    pub t2_hahn: f64,
    /// Treat omega_(-1) = omega_0 + dw and omega_(+1) = omega_0 - dw for direct couplings.
    pub delta_omega_approximation: bool,
}

impl NuclearSpinParams {
    /// Spin described by its frequency shift only. The delta-omega approximation
    /// is switched on, as for every tabulated memory spin.
    pub fn direct(label: impl Into<String>, delta_omega: f64, t2_star: f64) -> Result<Self> {
        let spin = Self {
            label: label.into(),
            coupling: Coupling::Direct { delta_omega },
            t2_star,
            t2_hahn: DEFAULT_T2_HAHN,
            delta_omega_approximation: true,
        };
        spin.validate()?;
        Ok(spin)
    }

    pub fn hyperfine(label: impl Into<String>, a_par: f64, a_perp: f64, t2_star: f64) -> Result<Self> {
        let spin = Self {
            label: label.into(),
            coupling: Coupling::Hyperfine { a_par, a_perp },
            t2_star,
            t2_hahn: DEFAULT_T2_HAHN,
            delta_omega_approximation: false,
        };
        spin.validate()?;
        Ok(spin)
    }

    pub fn with_t2_hahn(mut self, t2_hahn: f64) -> Result<Self> {
        self.t2_hahn = t2_hahn;
        self.validate()?;
        Ok(self)
    }

    /// Disables the delta-omega approximation; direct spins then reject ms=+-1 queries.
    pub fn strict(mut self) -> Self {
        self.delta_omega_approximation = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.coupling {
            Coupling::Direct { delta_omega } => {
                check(delta_omega.is_finite() && delta_omega >= 0.0, "delta_omega", || {
                    format!("must be >= 0, got {delta_omega}")
                })?;
            }
            Coupling::Hyperfine { a_par, a_perp } => {
                check(a_par.is_finite(), "a_par", || "must be finite".into())?;
                check(a_perp.is_finite() && a_perp >= 0.0, "a_perp", || {
                    format!("must be >= 0, got {a_perp}")
                })?;
            }
        }
        check(self.t2_star.is_finite() && self.t2_star > 0.0, "t2_star", || {
            format!("must be positive, got {}", self.t2_star)
        })?;
        check(self.t2_hahn > 0.0, "t2_hahn", || format!("must be positive, got {}", self.t2_hahn))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectronState {
    Ms0,
    MsMinus1,
    MsPlus1,
    ExcitedEPrime,
    ExcitedEx,
    Singlet,
}

impl ElectronState {
    pub fn is_ground_triplet(self) -> bool {
        matches!(self, Self::Ms0 | Self::MsMinus1 | Self::MsPlus1)
    }

    pub fn is_bright(self) -> bool {
        matches!(self, Self::MsMinus1 | Self::MsPlus1)
    }
}

/// Nuclear precession frequency (rad/s) with the electron in `state`.
pub fn precession_frequency(state: ElectronState, spin: &NuclearSpinParams, field: &FieldParams) -> Result<f64> {
    let w0 = field.larmor();
    match state {
        ElectronState::Ms0 => Ok(w0),
        ElectronState::MsMinus1 | ElectronState::MsPlus1 => {
            let minus = state == ElectronState::MsMinus1;
            match spin.coupling {
                Coupling::Hyperfine { a_par, a_perp } => {
                    let shifted = if minus { w0 + a_par } else { w0 - a_par };
                    Ok(shifted.hypot(a_perp))
                }
                Coupling::Direct { delta_omega } => {
                    if !spin.delta_omega_approximation {
                        return Err(Error::MissingHyperfine { label: spin.label.clone() });
                    }
                    Ok(if minus { w0 + delta_omega } else { w0 - delta_omega })
                }
            }
        }
        other => Err(Error::InvalidState(other)),
    }
}

/// Coupling strength |omega_0 - omega_(-1)| (rad/s).
pub fn delta_omega(spin: &NuclearSpinParams, field: &FieldParams) -> f64 {
    match spin.coupling {
        Coupling::Direct { delta_omega } => delta_omega,
        Coupling::Hyperfine { a_par, a_perp } => {
            let w0 = field.larmor();
            ((w0 + a_par).hypot(a_perp) - w0).abs()
        }
    }
}

/// Delay k * 2 pi / dw at which all electron branches acquire congruent phases.
pub fn phase_match_delay(spin: &NuclearSpinParams, field: &FieldParams, k: u32) -> Result<f64> {
    check(k >= 1, "k", || "must be a positive integer".into())?;
    let dw = delta_omega(spin, field);
    if dw <= 0.0 {
        return Err(Error::NoPhaseMatching);
    }
    Ok(f64::from(k) * TWO_PI / dw)
}

/// Frequency offsets omega_s - omega_0 for the three ground-triplet states,
/// indexed by [`triplet_index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detunings([f64; 3]);

impl Detunings {
    pub fn new(spin: &NuclearSpinParams, field: &FieldParams) -> Result<Self> {
        let w0 = field.larmor();
        Ok(Self([
            0.0,
            precession_frequency(ElectronState::MsMinus1, spin, field)? - w0,
            precession_frequency(ElectronState::MsPlus1, spin, field)? - w0,
        ]))
    }

    #[inline]
    pub fn of(&self, state: ElectronState) -> f64 {
        self.0[triplet_index(state)]
    }
}

#[inline]
pub(crate) fn triplet_index(state: ElectronState) -> usize {
    match state {
        ElectronState::Ms0 => 0,
        ElectronState::MsMinus1 => 1,
        ElectronState::MsPlus1 => 2,
        _ => unreachable!("optical states have no triplet index"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state: ElectronState,
    pub duration: f64,
}

/// Piecewise-constant electron timeline with nuclear inversion times.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElectronTrajectory {
    segments: Vec<Segment>,
    echo_marks: Vec<f64>,
}

impl ElectronTrajectory {
    pub fn new(segments: Vec<Segment>, echo_marks: Vec<f64>) -> Result<Self> {
        for s in &segments {
            check(s.duration.is_finite() && s.duration >= 0.0, "duration", || {
                format!("segment durations must be >= 0, got {}", s.duration)
            })?;
        }
        let total: f64 = segments.iter().map(|s| s.duration).sum();
        check(echo_marks.windows(2).all(|w| w[0] < w[1]), "echo_marks", || {
            "must be strictly increasing".into()
        })?;
        check(
            echo_marks.iter().all(|&m| m >= 0.0 && m <= total * (1.0 + 1e-12)),
            "echo_marks",
            || format!("must lie within [0, {total}]"),
        )?;
        Ok(Self { segments, echo_marks })
    }

    pub(crate) fn with_capacity(n: usize) -> Self {
        Self { segments: Vec::with_capacity(n), echo_marks: Vec::new() }
    }

    /// Appends a segment, merging it into the previous one when the state repeats.
    pub fn push(&mut self, state: ElectronState, duration: f64) {
        debug_assert!(duration >= 0.0);
        match self.segments.last_mut() {
            Some(last) if last.state == state => last.duration += duration,
            _ => self.segments.push(Segment { state, duration }),
        }
    }

    /// Adds a nuclear inversion at the current end of the trajectory.
    pub fn mark_echo(&mut self) {
        let t = self.total_duration();
        if self.echo_marks.last().is_some_and(|&m| m >= t) {
            // two inversions at the same instant cancel
            self.echo_marks.pop();
        } else {
            self.echo_marks.push(t);
        }
    }

    /// Appends `other`, shifting its echo marks by the current duration.
    pub fn extend(&mut self, other: &ElectronTrajectory) {
        let offset = self.total_duration();
        self.echo_marks.extend(other.echo_marks.iter().map(|m| m + offset));
        for s in &other.segments {
            self.push(s.state, s.duration);
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn echo_marks(&self) -> &[f64] {
        &self.echo_marks
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn final_state(&self) -> Option<ElectronState> {
        self.segments.last().map(|s| s.state)
    }
}

/// Nuclear phase (rad) accumulated over `traj` in the omega_0 rotating frame.
/// Each echo mark flips the sign of all subsequently accumulated phase.
pub fn accumulate_phase(traj: &ElectronTrajectory, spin: &NuclearSpinParams, field: &FieldParams) -> Result<f64> {
    if let Some(s) = traj.segments.iter().find(|s| !s.state.is_ground_triplet()) {
        return Err(Error::InvalidState(s.state));
    }
    let det = Detunings::new(spin, field).or_else(|e| match e {
        // ms0-only trajectories do not need the hyperfine split
        Error::MissingHyperfine { .. } if traj.segments.iter().all(|s| s.state == ElectronState::Ms0) => {
            Ok(Detunings([0.0; 3]))
        }
        e => Err(e),
    })?;

    let marks = &traj.echo_marks;
    let mut next = 0;
    let mut sign = 1.0;
    let mut start = 0.0;
    let mut phase = 0.0;
    for seg in &traj.segments {
        let rate = det.of(seg.state);
        let end = start + seg.duration;
        let mut cursor = start;
        while next < marks.len() && marks[next] < end {
            let m = marks[next].max(cursor);
            phase += sign * rate * (m - cursor);
            cursor = m;
            sign = -sign;
            next += 1;
        }
        phase += sign * rate * (end - cursor);
        start = end;
    }
    Ok(phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn field() -> FieldParams {
        FieldParams::reference_414g()
    }

    fn c1() -> NuclearSpinParams {
        NuclearSpinParams::direct("C1", angular(376.5e3), 9.9e-3).unwrap()
    }

    #[test]
    fn larmor_from_field_is_two_pi_gamma_b() {
        let f = FieldParams::from_field(414.0, 1070.7125).unwrap();
        assert_relative_eq!(f.larmor(), TWO_PI * 1070.7125 * 414.0, max_relative = 1e-15);
        assert!(FieldParams::from_field(0.0, 1.0).is_err());
        assert!(FieldParams::from_larmor(-1.0).is_err());
    }

    #[test]
    fn ms0_frequency_is_larmor() {
        let f = field();
        assert_eq!(precession_frequency(ElectronState::Ms0, &c1(), &f).unwrap(), angular(443_275.0));
        let hf = NuclearSpinParams::hyperfine("x", 1e6, 3e5, 1e-2).unwrap();
        assert_eq!(precession_frequency(ElectronState::Ms0, &hf, &f).unwrap(), f.larmor());
    }

    #[test]
    fn zero_coupling_gives_larmor_in_every_triplet_state() {
        let spin = NuclearSpinParams::hyperfine("zero", 0.0, 0.0, 1e-2).unwrap();
        for s in [ElectronState::MsMinus1, ElectronState::MsPlus1] {
            assert_eq!(precession_frequency(s, &spin, &field()).unwrap(), field().larmor());
        }
        assert_eq!(delta_omega(&spin, &field()), 0.0);
    }

    #[test]
    fn pure_parallel_coupling_shifts_by_a_par() {
        let spin = NuclearSpinParams::hyperfine("p", angular(50e3), 0.0, 1e-2).unwrap();
        let w = precession_frequency(ElectronState::MsMinus1, &spin, &field()).unwrap();
        assert_relative_eq!(w, angular(443_275.0 + 50e3), max_relative = 1e-14);
        assert_relative_eq!(delta_omega(&spin, &field()), angular(50e3), max_relative = 1e-9);
        let spin = NuclearSpinParams::hyperfine("p", angular(62.4e3), 0.0, 1e-2).unwrap();
        assert_relative_eq!(delta_omega(&spin, &field()), angular(62.4e3), max_relative = 1e-9);
    }

    #[test]
    fn direct_spin_reports_tabulated_coupling() {
        assert_relative_eq!(delta_omega(&c1(), &field()), angular(376.5e3));
    }

    #[test]
    fn optical_states_and_strict_direct_spins_are_rejected() {
        assert_eq!(
            precession_frequency(ElectronState::Singlet, &c1(), &field()),
            Err(Error::InvalidState(ElectronState::Singlet))
        );
        let strict = c1().strict();
        assert!(matches!(
            precession_frequency(ElectronState::MsMinus1, &strict, &field()),
            Err(Error::MissingHyperfine { .. })
        ));
        assert!(precession_frequency(ElectronState::Ms0, &strict, &field()).is_ok());
    }

    #[test]
    fn phase_match_delays() {
        let c2 = NuclearSpinParams::direct("C2", angular(62.4e3), 9.9e-3).unwrap();
        assert_relative_eq!(phase_match_delay(&c1(), &field(), 1).unwrap(), 1.0 / 376.5e3, max_relative = 1e-12);
        assert_relative_eq!(phase_match_delay(&c2, &field(), 1).unwrap(), 16.03e-6, max_relative = 1e-3);
        let slow = NuclearSpinParams::direct("s", angular(1.0), 1.0).unwrap();
        assert_relative_eq!(phase_match_delay(&slow, &field(), 2).unwrap(), 2.0, max_relative = 1e-12);
        let none = NuclearSpinParams::direct("n", 0.0, 1.0).unwrap();
        assert_eq!(phase_match_delay(&none, &field(), 1), Err(Error::NoPhaseMatching));
    }

    #[test]
    fn rotating_frame_phase_of_ms0_is_zero() {
        let traj = ElectronTrajectory::new(vec![Segment { state: ElectronState::Ms0, duration: 10e-6 }], vec![]).unwrap();
        assert_eq!(accumulate_phase(&traj, &c1(), &field()).unwrap(), 0.0);
    }

    #[test]
    fn echo_after_first_segment_keeps_only_the_shift() {
        let t = 1.3e-6;
        let traj = ElectronTrajectory::new(
            vec![
                Segment { state: ElectronState::MsMinus1, duration: t },
                Segment { state: ElectronState::Ms0, duration: t },
            ],
            vec![t],
        )
        .unwrap();
        let dw = delta_omega(&c1(), &field());
        assert_relative_eq!(accumulate_phase(&traj, &c1(), &field()).unwrap(), dw * t, max_relative = 1e-12);
    }

    #[test]
    fn matched_dwell_accumulates_a_full_turn() {
        let t = phase_match_delay(&c1(), &field(), 1).unwrap();
        let traj = ElectronTrajectory::new(
            vec![
                Segment { state: ElectronState::Ms0, duration: t },
                Segment { state: ElectronState::MsMinus1, duration: t },
            ],
            vec![],
        )
        .unwrap();
        let phi = accumulate_phase(&traj, &c1(), &field()).unwrap();
        assert_relative_eq!(phi, TWO_PI, max_relative = 1e-12);
    }

    #[test]
    fn optical_segment_rejected() {
        let traj = ElectronTrajectory::new(vec![Segment { state: ElectronState::ExcitedEPrime, duration: 1.0 }], vec![]).unwrap();
        assert!(matches!(accumulate_phase(&traj, &c1(), &field()), Err(Error::InvalidState(_))));
    }

    #[test]
    fn trajectory_validation() {
        assert!(ElectronTrajectory::new(vec![Segment { state: ElectronState::Ms0, duration: -1.0 }], vec![]).is_err());
        let seg = vec![Segment { state: ElectronState::Ms0, duration: 1.0 }];
        assert!(ElectronTrajectory::new(seg.clone(), vec![0.5, 0.5]).is_err());
        assert!(ElectronTrajectory::new(seg.clone(), vec![2.0]).is_err());
        assert!(ElectronTrajectory::new(seg, vec![0.2, 0.7]).is_ok());
    }

    fn arb_state() -> impl Strategy<Value = ElectronState> {
        prop_oneof![Just(ElectronState::Ms0), Just(ElectronState::MsMinus1), Just(ElectronState::MsPlus1)]
    }

    fn arb_segments() -> impl Strategy<Value = Vec<Segment>> {
        prop::collection::vec((arb_state(), 0.0f64..5e-6).prop_map(|(state, duration)| Segment { state, duration }), 1..8)
    }

    proptest! {
        #[test]
        fn perpendicular_coupling_only_raises_the_frequency(a_par in -2e6f64..2e6, a_perp in 0.0f64..2e6, bump in 1.0f64..1e5) {
            let f = field();
            let lo = NuclearSpinParams::hyperfine("a", a_par, a_perp, 1e-2).unwrap();
            let hi = NuclearSpinParams::hyperfine("b", a_par, a_perp + bump, 1e-2).unwrap();
            for s in [ElectronState::MsMinus1, ElectronState::MsPlus1] {
                let bare = if s == ElectronState::MsMinus1 { f.larmor() + a_par } else { f.larmor() - a_par };
                let w_lo = precession_frequency(s, &lo, &f).unwrap();
                let w_hi = precession_frequency(s, &hi, &f).unwrap();
                prop_assert!(w_lo >= bare.abs() * (1.0 - 1e-15));
                prop_assert!(w_hi > w_lo);
            }
        }

        #[test]
        fn phase_is_additive_under_concatenation(a in arb_segments(), b in arb_segments()) {
            let ta = ElectronTrajectory::new(a.clone(), vec![]).unwrap();
            let tb = ElectronTrajectory::new(b, vec![]).unwrap();
            let mut joined = ta.clone();
            joined.extend(&tb);
            let spin = c1();
            let f = field();
            let sum = accumulate_phase(&ta, &spin, &f).unwrap() + accumulate_phase(&tb, &spin, &f).unwrap();
            let whole = accumulate_phase(&joined, &spin, &f).unwrap();
            prop_assert!((sum - whole).abs() <= 1e-9 * (1.0 + sum.abs()));
        }

        #[test]
        fn midpoint_echo_cancels_identical_halves(state in arb_state(), t in 1e-9f64..1e-4) {
            let traj = ElectronTrajectory::new(
                vec![Segment { state, duration: t }, Segment { state, duration: t }],
                vec![t],
            ).unwrap();
            let phi = accumulate_phase(&traj, &c1(), &field()).unwrap();
            prop_assert!(phi.abs() <= 1e-9 * angular(376.5e3) * t);
        }

        #[test]
        fn subdividing_a_segment_changes_nothing(segs in arb_segments(), pick in 0usize..8, frac in 0.0f64..1.0) {
            let idx = pick % segs.len();
            let mut split = Vec::new();
            for (i, s) in segs.iter().enumerate() {
                if i == idx {
                    split.push(Segment { state: s.state, duration: s.duration * frac });
                    split.push(Segment { state: s.state, duration: s.duration * (1.0 - frac) });
                } else {
                    split.push(*s);
                }
            }
            let total: f64 = segs.iter().map(|s| s.duration).sum();
            let marks = vec![total * 0.37];
            let a = accumulate_phase(&ElectronTrajectory::new(segs, marks.clone()).unwrap(), &c1(), &field()).unwrap();
            let b = accumulate_phase(&ElectronTrajectory::new(split, marks).unwrap(), &c1(), &field()).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}

//! Conv energy estimates for an equivalent ANN (multiply-accumulates) and
//! for the spiking network (accumulates driven by measured firing rates).
//!
//! ```text
//! E_ANN = O · C_in · C_out · k² · E_MAC
//! E_SNN = T · D · fr · O · C_in · C_out · k² · E_AC
//! ```
//!
//! `O` is the number of output positions, and `C_in` is taken per group.

use std::fmt::Write as _;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::layers::{ConvRecord, Probe};
use crate::model::SpikeYolo;
use crate::neuron::SpikeTensor;
use crate::spike_codec::BinarySpikeTrain;
use crate::tensor::Tensor4;

/// Energy of one multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy of one accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

/// Geometry entering the energy formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub out_h: usize,
    pub out_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
}

impl ConvDims {
    /// Square `o × o` output, dense connectivity.
    pub fn square(o: usize, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvDims {
            out_h: o,
            out_w: o,
            c_in,
            c_out,
            k,
            groups: 1,
        }
    }

    pub fn of(spec: &ConvSpec, out_h: usize, out_w: usize) -> Self {
        ConvDims {
            out_h,
            out_w,
            c_in: spec.c_in,
            c_out: spec.c_out,
            k: spec.k,
            groups: spec.groups,
        }
    }

    pub fn out_elems(&self) -> u64 {
        (self.out_h * self.out_w) as u64
    }

    /// Multiply-accumulates of one dense pass.
    pub fn macs(&self) -> u64 {
        if self.groups == 0 {
            return 0;
        }
        self.out_elems() * (self.c_in / self.groups) as u64 * self.c_out as u64 * (self.k * self.k) as u64
    }
}

/// Average binary spikes per neuron per virtual step, kept as an exact
/// ratio when measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FiringRate {
    Measured { spikes: u64, slots: u64 },
    Value(f64),
}

impl FiringRate {
    pub fn measured(spikes: u64, slots: u64) -> Result<Self> {
        if slots == 0 || spikes > slots {
            return Err(Error::Domain(format!("firing rate {spikes}/{slots} outside [0, 1]")));
        }
        Ok(FiringRate::Measured { spikes, slots })
    }

    pub fn value(v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("firing rate {v} outside [0, 1]")));
        }
        Ok(FiringRate::Value(v))
    }

    pub fn get(&self) -> f64 {
        match *self {
            FiringRate::Measured { spikes, slots } => spikes as f64 / slots as f64,
            FiringRate::Value(v) => v,
        }
    }

    fn check(&self) -> Result<()> {
        match *self {
            FiringRate::Measured { spikes, slots } => Self::measured(spikes, slots).map(|_| ()),
            FiringRate::Value(v) => Self::value(v).map(|_| ()),
        }
    }
}

/// Anything whose binary spike content can be counted.
pub trait SpikeSource {
    fn spike_total(&self) -> u64;
    /// Neurons × timesteps × virtual steps.
    fn slot_total(&self) -> u64;
}

impl SpikeSource for SpikeTensor {
    fn spike_total(&self) -> u64 {
        self.spike_count()
    }

    fn slot_total(&self) -> u64 {
        self.shape().len() as u64 * u64::from(self.ceiling())
    }
}

impl SpikeSource for BinarySpikeTrain {
    fn spike_total(&self) -> u64 {
        self.spike_count()
    }

    fn slot_total(&self) -> u64 {
        self.bits().len() as u64
    }
}

pub fn measure_firing_rate(spikes: &impl SpikeSource) -> Result<FiringRate> {
    let slots = spikes.slot_total();
    if slots == 0 {
        return Err(Error::Domain("firing rate of an empty tensor".into()));
    }
    FiringRate::measured(spikes.spike_total(), slots)
}

pub fn layer_energy_ann(dims: &ConvDims) -> f64 {
    dims.macs() as f64 * E_MAC_PJ
}

/// Accumulates implied by the closed form. For a measured rate the value
/// is computed as one rounded division, so integral counts come out exact.
pub fn snn_accumulates(dims: &ConvDims, t: usize, d: usize, fr: FiringRate) -> Result<f64> {
    fr.check()?;
    let work = (t * d) as u128 * u128::from(dims.macs());
    Ok(match fr {
        FiringRate::Measured { spikes, slots } => (work * u128::from(spikes)) as f64 / slots as f64,
        FiringRate::Value(v) => work as f64 * v,
    })
}

pub fn layer_energy_snn(dims: &ConvDims, t: usize, d: usize, fr: FiringRate) -> Result<f64> {
    Ok(snn_accumulates(dims, t, d, fr)? * E_AC_PJ)
}

/// Accumulates a spike-driven conv performs: each 1-spike adds one weight
/// into every output position its kernel reaches. Plain loops.
pub fn brute_force_synops(spec: &ConvSpec, spikes: &BinarySpikeTrain) -> u64 {
    let f = spikes.frame_shape();
    let (k, s, p) = (spec.k as i64, spec.stride as i64, spec.padding as i64);
    let out_h = (f.h as i64 + 2 * p - k) / s + 1;
    let out_w = (f.w as i64 + 2 * p - k) / s + 1;
    let group_in = spec.c_in / spec.groups;
    let group_out = spec.c_out / spec.groups;
    let mut count = 0u64;
    for t in 0..f.t {
        for d in 0..spikes.slots() {
            let bits = spikes.slot(t, d);
            for ci in 0..f.c {
                for iy in 0..f.h as i64 {
                    for ix in 0..f.w as i64 {
                        if bits[(ci * f.h + iy as usize) * f.w + ix as usize] == 0 {
                            continue;
                        }
                        let g = ci / group_in;
                        for _co in g * group_out..(g + 1) * group_out {
                            for oy in 0..out_h {
                                for ox in 0..out_w {
                                    let ky = iy + p - oy * s;
                                    let kx = ix + p - ox * s;
                                    if (0..k).contains(&ky) && (0..k).contains(&kx) {
                                        count += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    count
}

/// Per-layer counters of an instrumented run. Counters add, so probes from
/// independent runs can be merged in any order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCounter {
    pub name: String,
    pub dims: ConvDims,
    pub t: usize,
    pub d: usize,
    pub runs: u64,
    pub spikes: u64,
    pub slots: u64,
    pub synops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyProbe {
    pub layers: Vec<LayerCounter>,
    pub neuron_updates: u64,
    pub adds: u64,
}

impl Probe for EnergyProbe {
    fn on_conv(&mut self, r: &ConvRecord<'_>) {
        let f = r.input.frame_shape();
        self.layers.push(LayerCounter {
            name: r.name.to_string(),
            dims: ConvDims::of(r.spec, r.output.h, r.output.w),
            t: f.t,
            d: r.input.slots(),
            runs: 1,
            spikes: r.input.spike_total(),
            slots: r.input.slot_total(),
            synops: r.synops,
        });
    }

    fn on_neurons(&mut self, count: u64) {
        self.neuron_updates += count;
    }

    fn on_adds(&mut self, count: u64) {
        self.adds += count;
    }
}

impl EnergyProbe {
    /// Adds the counters of a run over the same network.
    pub fn merge(&mut self, other: &EnergyProbe) -> Result<()> {
        if self.layers.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::dims("energy probe layers", &[self.layers.len()], &[other.layers.len()]));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.name != b.name || a.dims != b.dims || a.t != b.t || a.d != b.d {
                return Err(Error::Domain(format!("cannot merge layer {} with {}", a.name, b.name)));
            }
            a.runs += b.runs;
            a.spikes += b.spikes;
            a.slots += b.slots;
            a.synops += b.synops;
        }
        self.neuron_updates += other.neuron_updates;
        self.adds += other.adds;
        Ok(())
    }

    pub fn report(&self) -> Result<EnergyReport> {
        let mut rows = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let fr = FiringRate::measured(l.spikes, l.slots)?;
            let macs = l.dims.macs() * l.runs;
            // per-run closed form, summed over runs
            let acs = snn_accumulates(&l.dims, l.t, l.d, fr)? * l.runs as f64;
            rows.push(LayerRow {
                name: l.name.clone(),
                dims: l.dims,
                t: l.t,
                d: l.d,
                fr,
                macs,
                acs,
                acs_edge: l.synops,
                e_ann_pj: macs as f64 * E_MAC_PJ,
                e_snn_pj: acs * E_AC_PJ,
            });
        }
        Ok(EnergyReport {
            total_macs: rows.iter().map(|r| r.macs).sum(),
            total_acs: rows.iter().map(|r| r.acs).sum(),
            total_acs_edge: rows.iter().map(|r| r.acs_edge).sum(),
            total_e_ann_pj: rows.iter().map(|r| r.e_ann_pj).sum(),
            total_e_snn_pj: rows.iter().map(|r| r.e_snn_pj).sum(),
            rows,
            neuron_updates: self.neuron_updates,
            adds: self.adds,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub dims: ConvDims,
    pub t: usize,
    pub d: usize,
    pub fr: FiringRate,
    pub macs: u64,
    /// Closed-form accumulates (uniform fan-out).
    pub acs: f64,
    /// Accumulates actually performed, border fan-out loss included.
    pub acs_edge: u64,
    pub e_ann_pj: f64,
    pub e_snn_pj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<LayerRow>,
    pub total_macs: u64,
    pub total_acs: f64,
    pub total_acs_edge: u64,
    pub total_e_ann_pj: f64,
    pub total_e_snn_pj: f64,
    /// Neuron updates; informational, not part of the totals.
    pub neuron_updates: u64,
    /// Residual additions; informational, not part of the totals.
    pub adds: u64,
}

pub const CSV_HEADER: &str = "layer,o,c_in,c_out,k,groups,T,D,fr,macs,acs,acs_edge,e_ann_pj,e_snn_pj";

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.dims.out_elems(),
                r.dims.c_in,
                r.dims.c_out,
                r.dims.k,
                r.dims.groups,
                r.t,
                r.d,
                r.fr.get(),
                r.macs,
                r.acs,
                r.acs_edge,
                r.e_ann_pj,
                r.e_snn_pj
            );
        }
        let _ = writeln!(
            s,
            "total,,,,,,,,,{},{},{},{},{}",
            self.total_macs, self.total_acs, self.total_acs_edge, self.total_e_ann_pj, self.total_e_snn_pj
        );
        let _ = writeln!(
            s,
            "non_conv_excluded,neuron_updates={},residual_adds={},,,,,,,,,,,",
            self.neuron_updates, self.adds
        );
        let _ = writeln!(s, "constants,e_mac_pj={E_MAC_PJ},e_ac_pj={E_AC_PJ},,,,,,,,,,,");
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>5} {:>5} {:>2} {:>6} {:>12} {:>14} {:>12} {:>14} {:>12}",
            "layer", "O", "c_in", "c_out", "k", "fr", "MACs", "ACs", "ACs(edge)", "E_ANN (pJ)", "E_SNN (pJ)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>5} {:>5} {:>2} {:>6.4} {:>12} {:>14.1} {:>12} {:>14.1} {:>12.1}",
                r.name,
                r.dims.out_elems(),
                r.dims.c_in,
                r.dims.c_out,
                r.dims.k,
                r.fr.get(),
                r.macs,
                r.acs,
                r.acs_edge,
                r.e_ann_pj,
                r.e_snn_pj
            );
        }
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>5} {:>5} {:>2} {:>6} {:>12} {:>14.1} {:>12} {:>14.1} {:>12.1}",
            "total", "", "", "", "", "", self.total_macs, self.total_acs, self.total_acs_edge, self.total_e_ann_pj, self.total_e_snn_pj
        );
        let _ = writeln!(
            s,
            "excluded from totals: {} neuron updates, {} residual adds; E_MAC = {E_MAC_PJ} pJ, E_AC = {E_AC_PJ} pJ",
            self.neuron_updates, self.adds
        );
        s
    }
}

/// Runs `pass` with an energy probe and reports what it recorded.
pub fn profile_with(pass: impl FnOnce(&mut dyn Probe) -> Result<()>) -> Result<EnergyReport> {
    let mut probe = EnergyProbe::default();
    pass(&mut probe)?;
    probe.report()
}

/// Energy report of one spike-driven inference of `model` on `input`.
/// A train-mode model is re-parameterized first.
pub fn profile(model: &SpikeYolo, input: &Tensor4) -> Result<EnergyReport> {
    let merged;
    let model = if model.mode == crate::layers::Mode::Train {
        merged = model.reparameterize()?;
        &merged
    } else {
        model
    };
    profile_with(|probe| model.forward_probed(input, probe).map(|_| ()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ConvLayer, NoProbe};
    use crate::spike_codec::expand;
    use crate::testutil::{random_spec, tiny_config};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_examples() {
        assert!((layer_energy_ann(&ConvDims::square(1, 1, 1, 1)) - 4.6).abs() < 1e-12);
        let d = ConvDims::square(2, 3, 8, 3);
        assert_eq!(d.macs(), 864);
        assert!((layer_energy_ann(&d) - 3974.4).abs() < 1e-9);
        let snn = layer_energy_snn(&d, 1, 4, FiringRate::value(0.25).unwrap()).unwrap();
        assert!((snn - 777.6).abs() < 1e-9);
        assert_eq!(layer_energy_ann(&ConvDims::square(0, 3, 8, 3)), 0.0);
        assert_eq!(layer_energy_snn(&d, 1, 4, FiringRate::value(0.0).unwrap()).unwrap(), 0.0);
        let ratio = layer_energy_snn(&d, 1, 1, FiringRate::value(1.0).unwrap()).unwrap() / layer_energy_ann(&d);
        assert!((ratio - 0.9 / 4.6).abs() < 1e-15);
        assert!(FiringRate::value(1.5).is_err());
        assert!(layer_energy_snn(&d, 1, 1, FiringRate::Value(-0.1)).is_err());
    }

    #[test]
    fn firing_rates() {
        let zero = SpikeTensor::zeros((2, 2, 2, 2), 4).unwrap();
        assert_eq!(measure_firing_rate(&zero).unwrap().get(), 0.0);
        let full = SpikeTensor::new((1, 2, 2, 2), vec![4; 8], 4).unwrap();
        assert_eq!(measure_firing_rate(&full).unwrap().get(), 1.0);
        let half = SpikeTensor::new((1, 1, 2, 2), vec![1, 1, 0, 0], 2).unwrap();
        assert_eq!(measure_firing_rate(&half).unwrap().get(), 0.25);
        assert_eq!(measure_firing_rate(&expand(&half).unwrap()).unwrap(), measure_firing_rate(&half).unwrap());
        assert!(measure_firing_rate(&SpikeTensor::zeros((1, 0, 2, 2), 2).unwrap()).is_err());
    }

    #[test]
    fn brute_force_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random_spec(&mut rng, 3, 8, 1, 1, 0, 1, false);
        let mut v = vec![0; 3 * 16];
        v[5] = 1;
        let one = expand(&SpikeTensor::new((1, 3, 4, 4), v, 1).unwrap()).unwrap();
        assert_eq!(brute_force_synops(&spec, &one), 8);
        let none = expand(&SpikeTensor::zeros((1, 3, 4, 4), 2).unwrap()).unwrap();
        assert_eq!(brute_force_synops(&spec, &none), 0);
        // corner spike of a padded 3×3 conv reaches 4 of 9 positions
        let spec = random_spec(&mut rng, 1, 2, 3, 1, 1, 1, false);
        let mut v = vec![0; 16];
        v[0] = 1;
        let corner = expand(&SpikeTensor::new((1, 1, 4, 4), v, 1).unwrap()).unwrap();
        assert_eq!(brute_force_synops(&spec, &corner), 4 * 2);
    }

    #[test]
    fn event_driven_conv_counts_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, stride, pad, groups) in [(3, 1, 1, 1), (3, 2, 1, 1), (1, 1, 0, 2), (7, 1, 3, 4), (3, 2, 0, 4)] {
            let spec = random_spec(&mut rng, 4, 8, k, stride, pad, groups, true);
            let vals = (0..2 * 4 * 6 * 6).map(|_| rng.gen_range(0..=3)).collect();
            let train = expand(&SpikeTensor::new((2, 4, 6, 6), vals, 3).unwrap()).unwrap();
            let layer = ConvLayer { name: "c".into(), spec: spec.clone(), id: 0 };
            let report = profile_with(|p| layer.forward_spikes(&train, p).map(|_| ())).unwrap();
            assert_eq!(report.rows[0].acs_edge, brute_force_synops(&spec, &train));
            let _ = layer.forward_spikes(&train, &mut NoProbe).unwrap();
        }
    }

    #[test]
    fn interior_spikes_match_closed_form_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random_spec(&mut rng, 2, 4, 3, 1, 1, 1, false);
        let mut vals = vec![0u32; 2 * 2 * 6 * 6];
        for (i, v) in vals.iter_mut().enumerate() {
            let (y, x) = ((i / 6) % 6, i % 6);
            if (1..5).contains(&y) && (1..5).contains(&x) {
                *v = rng.gen_range(0..=4);
            }
        }
        let train = expand(&SpikeTensor::new((2, 2, 6, 6), vals, 4).unwrap()).unwrap();
        let fr = measure_firing_rate(&train).unwrap();
        let e = layer_energy_snn(&ConvDims::of(&spec, 6, 6), 2, 4, fr).unwrap();
        assert_eq!(e, brute_force_synops(&spec, &train) as f64 * E_AC_PJ);
    }

    #[test]
    fn model_report_totals_and_parity() {
        let m = SpikeYolo::new(&tiny_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::from_fn((1, 1, 16, 16), |_, _, _, _| rng.gen_range(0.0..1.0));
        let r = profile(&m, &x).unwrap();
        assert_eq!(r.rows.len(), m.reparameterize().unwrap().convs().len());
        let sum: f64 = r.rows.iter().map(|r| r.e_snn_pj).sum();
        assert_eq!(sum, r.total_e_snn_pj);
        assert_eq!(r.total_macs, r.rows.iter().map(|r| r.macs).sum::<u64>());
        assert!(r.rows.iter().all(|row| (0.0..=1.0).contains(&row.fr.get())));
        assert_eq!(r.to_csv(), profile(&m, &x).unwrap().to_csv());
        assert!(r.to_csv().lines().any(|l| l == "constants,e_mac_pj=4.6,e_ac_pj=0.9,,,,,,,,,,,"));
        assert!(r.neuron_updates > 0 && r.adds > 0);

        // a dark image only fires through bias-driven spikes
        let dark = profile(&m, &Tensor4::zeros((1, 1, 16, 16))).unwrap();
        assert_eq!(dark.rows[0].e_snn_pj, 0.0);
        assert!(dark.total_e_snn_pj < r.total_e_snn_pj);
    }

    #[test]
    fn merged_probes_add() {
        let m = SpikeYolo::new(&tiny_config(), 1).unwrap().reparameterize().unwrap();
        let x = Tensor4::full((1, 1, 16, 16), 0.7);
        let mut a = EnergyProbe::default();
        m.forward_probed(&x, &mut a).unwrap();
        let mut both = a.clone();
        both.merge(&a).unwrap();
        let (one, two) = (a.report().unwrap(), both.report().unwrap());
        assert_eq!(two.total_macs, 2 * one.total_macs);
        assert_eq!(two.total_acs_edge, 2 * one.total_acs_edge);
        assert!((two.total_e_snn_pj - 2.0 * one.total_e_snn_pj).abs() < 1e-9 * one.total_e_snn_pj.max(1.0));
    }
}

use crate::layers::{ConvRecord, Probe};

/// Checks, conv by conv, that an inference pass was spike-driven: every
/// input value of every virtual step is 0 or 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeAudit {
    pub convs_seen: usize,
    pub values_checked: u64,
    /// `(layer, bad value count)` for each offending conv.
    pub violations: Vec<(String, u64)>,
}

impl SpikeAudit {
    pub fn passed(&self) -> bool {
        self.convs_seen > 0 && self.violations.is_empty()
    }
}

impl Probe for SpikeAudit {
    fn on_conv(&mut self, r: &ConvRecord<'_>) {
        self.convs_seen += 1;
        let bits = r.input.bits();
        self.values_checked += bits.len() as u64;
        let bad = bits.iter().filter(|&&b| b > 1).count() as u64;
        if bad > 0 || r.spec.bn.is_some() {
            self.violations.push((r.name.to_string(), bad));
        }
    }
}

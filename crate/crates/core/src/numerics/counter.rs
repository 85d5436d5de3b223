//! Multiply-accumulate and allocation accounting.
//!
//! Conventions used by every kernel:
//! - one MAC per multiply (a fused multiply-add is one MAC); pure additions,
//!   comparisons and activation functions cost zero;
//! - the sinusoidal embedding costs one MAC per output entry;
//! - a bilinear tap costs one MAC per channel (four per sampled point);
//! - allocations are counted per output element (8 bytes each); layout-only
//!   ops such as reshape are views and count zero.

use std::collections::BTreeMap;

use serde::Serialize;

pub const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    macs: u64,
    elements: u64,
    per_kernel: BTreeMap<&'static str, KernelCount>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KernelCount {
    pub calls: u64,
    pub macs: u64,
    pub elements: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&mut self, kernel: &'static str, macs: u64, elements: u64) {
        self.macs += macs;
        self.elements += elements;
        let entry = self.per_kernel.entry(kernel).or_default();
        entry.calls += 1;
        entry.macs += macs;
        entry.elements += elements;
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Output elements allocated by counted kernels.
    pub fn elements(&self) -> u64 {
        self.elements
    }

    pub fn bytes(&self) -> u64 {
        self.elements * BYTES_PER_ELEMENT
    }

    pub fn per_kernel(&self) -> &BTreeMap<&'static str, KernelCount> {
        &self.per_kernel
    }

    /// Counts accumulated since `earlier`, which must be a prior snapshot of
    /// this counter.
    pub fn since(&self, earlier: &OpCounter) -> OpCounter {
        let mut per_kernel = BTreeMap::new();
        for (k, now) in &self.per_kernel {
            let before = earlier.per_kernel.get(k).copied().unwrap_or_default();
            let d = KernelCount {
                calls: now.calls - before.calls,
                macs: now.macs - before.macs,
                elements: now.elements - before.elements,
            };
            if d.calls > 0 {
                per_kernel.insert(*k, d);
            }
        }
        OpCounter {
            macs: self.macs - earlier.macs,
            elements: self.elements - earlier.elements,
            per_kernel,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

use std::ops::{Add, AddAssign};

/// Exact work accounting for attention stages, derived from tensor shapes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounter {
    /// (point, neighbor) feature slots entering an attention pooling.
    pub neighbor_slots: u64,
    /// Multiply-accumulates performed by pointwise MLPs.
    pub mlp_macs: u64,
    /// Feature rows copied by gathers.
    pub gathers: u64,
}

impl Add for WorkCounter {
    type Output = WorkCounter;

    fn add(self, rhs: WorkCounter) -> WorkCounter {
        WorkCounter {
            neighbor_slots: self.neighbor_slots + rhs.neighbor_slots,
            mlp_macs: self.mlp_macs + rhs.mlp_macs,
            gathers: self.gathers + rhs.gathers,
        }
    }
}

impl AddAssign for WorkCounter {
    fn add_assign(&mut self, rhs: WorkCounter) {
        *self = *self + rhs;
    }
}

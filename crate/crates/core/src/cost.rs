use serde::Serialize;

/// Parameter and FLOP count of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { params: self.params + o.params, flops: self.flops + o.flops }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub path: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer costs in evaluation order, with running totals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    entries: Vec<CostEntry>,
    total_params: u64,
    total_flops: u64,
}

impl CostReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, path: impl Into<String>, cost: Cost) {
        self.total_params += cost.params;
        self.total_flops += cost.flops;
        self.entries.push(CostEntry { path: path.into(), params: cost.params, flops: cost.flops });
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn total_params(&self) -> u64 {
        self.total_params
    }

    pub fn total_flops(&self) -> u64 {
        self.total_flops
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// Sum over entries whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> Cost {
        self.entries
            .iter()
            .filter(|e| e.path.starts_with(prefix))
            .fold(Cost::default(), |acc, e| acc + Cost { params: e.params, flops: e.flops })
    }

    /// True when the stored totals equal the entry sums.
    pub fn is_consistent(&self) -> bool {
        let sum = self.subtotal("");
        sum.params == self.total_params && sum.flops == self.total_flops
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "entries": self.entries,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "params_m": self.params_m(),
            "gflops": self.gflops(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_track_entries() {
        let mut r = CostReport::new();
        r.push("a.x", Cost { params: 3, flops: 10 });
        r.push("b", Cost { params: 4, flops: 1 });
        assert_eq!(r.total_params(), 7);
        assert_eq!(r.total_flops(), 11);
        assert_eq!(r.subtotal("a.").params, 3);
        assert!(r.is_consistent());
    }
}

use crate::pool::BackendPool;
use crate::server::{HardwareProfile, MaxConn, ServerSpec};

/// A named set of backend machines.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentProfile {
    pub name: String,
    pub servers: Vec<HardwareProfile>,
}

impl EnvironmentProfile {
    /// Five identical 16-core 1.80 GHz / 32 GB application servers.
    pub fn homogeneous() -> Self {
        EnvironmentProfile {
            name: "homogeneous".into(),
            servers: (0..5)
                .map(|_| HardwareProfile::new("16c-32g", 16, 1.80, 32.0).expect("valid"))
                .collect(),
        }
    }

    /// The m5 family from xlarge to 12xlarge, all at 1.80 GHz.
    pub fn heterogeneous() -> Self {
        let rows = [
            ("m5.xlarge", 4, 16.0),
            ("m5.2xlarge", 8, 32.0),
            ("m5.4xlarge", 16, 64.0),
            ("m5.8xlarge", 32, 128.0),
            ("m5.12xlarge", 48, 192.0),
        ];
        EnvironmentProfile {
            name: "heterogeneous".into(),
            servers: rows
                .into_iter()
                .map(|(label, cores, ram)| HardwareProfile::new(label, cores, 1.80, ram).expect("valid"))
                .collect(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "homogeneous" => Some(Self::homogeneous()),
            "heterogeneous" => Some(Self::heterogeneous()),
            _ => None,
        }
    }

    pub fn total_cores(&self) -> u32 {
        self.servers.iter().map(|s| s.cores).sum()
    }

    /// Pool with ids `1..=n` in profile order, weight 1 each.
    pub fn pool(&self, maxconn: impl Fn(&HardwareProfile) -> MaxConn) -> BackendPool {
        let specs = self
            .servers
            .iter()
            .enumerate()
            .map(|(i, hw)| {
                let mut spec = ServerSpec::new(i as u32 + 1, format!("app{}", i + 1)).with_profile(hw.clone());
                spec.maxconn = maxconn(hw);
                spec
            })
            .collect();
        BackendPool::new(specs).expect("profiles define at least one server")
    }
}

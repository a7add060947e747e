use std::fmt;

/// Administrator-assigned server id; defines pool order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServerId(pub u32);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaxConn {
    #[default]
    Unlimited,
    Limit(u32),
}

impl MaxConn {
    pub fn admits(self, active: u32) -> bool {
        match self {
            MaxConn::Unlimited => true,
            MaxConn::Limit(n) => active < n,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, MaxConn::Limit(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub label: String,
    pub cores: u32,
    pub core_speed_ghz: f64,
    pub ram_gb: f64,
}

impl HardwareProfile {
    /// Returns `None` unless `cores >= 1` and the speed is positive.
    pub fn new(label: impl Into<String>, cores: u32, core_speed_ghz: f64, ram_gb: f64) -> Option<Self> {
        (cores >= 1 && core_speed_ghz > 0.0 && ram_gb > 0.0).then(|| HardwareProfile {
            label: label.into(),
            cores,
            core_speed_ghz,
            ram_gb,
        })
    }
}

impl Default for HardwareProfile {
    fn default() -> Self {
        HardwareProfile {
            label: "app-16c".into(),
            cores: 16,
            core_speed_ghz: 1.8,
            ram_gb: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerSpec {
    pub id: ServerId,
    pub name: String,
    pub weight: u32,
    pub maxconn: MaxConn,
    pub profile: HardwareProfile,
}

impl ServerSpec {
    /// Weight 1, unlimited connections, default hardware.
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        ServerSpec {
            id: ServerId(id),
            name: name.into(),
            weight: 1,
            maxconn: MaxConn::Unlimited,
            profile: HardwareProfile::default(),
        }
    }

    pub fn with_weight(mut self, weight: u32) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_maxconn(mut self, maxconn: u32) -> Self {
        self.maxconn = MaxConn::Limit(maxconn);
        self
    }

    pub fn with_profile(mut self, profile: HardwareProfile) -> Self {
        self.profile = profile;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub active_connections: u32,
    pub cpu_utilization: f64,
    pub up: bool,
    pub total_dispatched: u64,
}

impl Default for ServerState {
    fn default() -> Self {
        ServerState {
            active_connections: 0,
            cpu_utilization: 0.0,
            up: true,
            total_dispatched: 0,
        }
    }
}

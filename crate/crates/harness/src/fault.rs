//! Fault injection and artificial latency, seen from the faulty device.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum DisappearFrom {
    AtStart,
    AfterMs { ms: u64 },
    BeforeReceive { operation: String },
    /// Processes the message, then vanishes without answering.
    AfterReceive { operation: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSpec {
    /// Unreachable in both directions from the trigger on, for
    /// `duration_ms` or until the run ends.
    Disappear {
        #[serde(flatten)]
        from: DisappearFrom,
        #[serde(default)]
        duration_ms: Option<u64>,
    },
    /// Closes every n-th inbound connection without answering.
    DropEveryNth { n: u32 },
    /// Accepts connections and never answers.
    NeverRespond,
}

impl FaultSpec {
    pub fn check(&self) -> Result<(), String> {
        match self {
            FaultSpec::DropEveryNth { n: 0 } => Err("drop_every_nth needs n >= 1".into()),
            FaultSpec::Disappear {
                from: DisappearFrom::BeforeReceive { operation } | DisappearFrom::AfterReceive { operation },
                ..
            } if operation.is_empty() => Err("disappear needs an operation".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latency {
    #[default]
    None,
    Fixed { ms: u64 },
    Uniform { min_ms: u64, max_ms: u64 },
    /// Uniform 100 to 800 ms per hop, for histograms comparable to the
    /// hardware runs.
    Radio,
}

impl Latency {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Duration {
        let ms = match *self {
            Latency::None => 0,
            Latency::Fixed { ms } => ms,
            Latency::Uniform { min_ms, max_ms } => rng.random_range(min_ms.min(max_ms)..=max_ms.max(min_ms)),
            Latency::Radio => rng.random_range(100..=800),
        };
        Duration::from_millis(ms)
    }
}

/// What to do with one inbound request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inbound {
    Process,
    /// Process, then close without answering.
    ProcessThenVanish,
    Close,
    Silent,
}

/// Faults of one device during one run.
#[derive(Debug, Clone, Default)]
pub struct FaultState {
    specs: Vec<FaultSpec>,
    started: Option<Instant>,
    gone_from: Option<Instant>,
    gone_for: Option<Duration>,
    received: u64,
}

impl FaultState {
    pub fn new(specs: Vec<FaultSpec>) -> Self {
        FaultState { specs, ..Self::default() }
    }

    pub fn specs(&self) -> &[FaultSpec] {
        &self.specs
    }

    /// Re-arms every fault for a run starting at `now`.
    pub fn arm(&mut self, now: Instant) {
        self.started = Some(now);
        self.gone_from = None;
        self.gone_for = None;
        self.received = 0;
        for spec in self.specs.clone() {
            if let FaultSpec::Disappear { from, duration_ms } = spec {
                let at = match from {
                    DisappearFrom::AtStart => Some(now),
                    DisappearFrom::AfterMs { ms } => Some(now + Duration::from_millis(ms)),
                    _ => None,
                };
                if let Some(at) = at {
                    self.vanish(at, duration_ms);
                }
            }
        }
    }

    fn vanish(&mut self, at: Instant, duration_ms: Option<u64>) {
        if self.gone_from.is_none() {
            self.gone_from = Some(at);
            self.gone_for = duration_ms.map(Duration::from_millis);
        }
    }

    pub fn is_gone(&self, now: Instant) -> bool {
        match self.gone_from {
            Some(from) if now >= from => self.gone_for.is_none_or(|d| now < from + d),
            _ => false,
        }
    }

    /// Decides how to treat an inbound request for `operation` (`None` for
    /// protocol traffic that is not a choreography operation).
    pub fn on_inbound(&mut self, operation: Option<&str>, now: Instant) -> Inbound {
        if self.is_gone(now) {
            return Inbound::Close;
        }
        self.received += 1;
        let mut decision = Inbound::Process;
        for spec in self.specs.clone() {
            match spec {
                FaultSpec::NeverRespond => return Inbound::Silent,
                FaultSpec::DropEveryNth { n } if self.received.is_multiple_of(u64::from(n)) => return Inbound::Close,
                FaultSpec::Disappear { from: DisappearFrom::BeforeReceive { operation: op }, duration_ms }
                    if operation == Some(op.as_str()) && self.gone_from.is_none() =>
                {
                    self.vanish(now, duration_ms);
                    return Inbound::Close;
                }
                FaultSpec::Disappear { from: DisappearFrom::AfterReceive { operation: op }, duration_ms }
                    if operation == Some(op.as_str()) && self.gone_from.is_none() =>
                {
                    self.vanish(now, duration_ms);
                    decision = Inbound::ProcessThenVanish;
                }
                _ => {}
            }
        }
        decision
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn before_receive_vanishes_for_its_duration() {
        let mut f = FaultState::new(vec![FaultSpec::Disappear {
            from: DisappearFrom::BeforeReceive { operation: "alertaIncidente".into() },
            duration_ms: Some(100),
        }]);
        let t0 = Instant::now();
        f.arm(t0);
        assert_eq!(f.on_inbound(Some("otra"), t0), Inbound::Process);
        assert_eq!(f.on_inbound(Some("alertaIncidente"), t0), Inbound::Close);
        assert!(f.is_gone(t0 + Duration::from_millis(99)));
        assert!(!f.is_gone(t0 + Duration::from_millis(100)));
        // Fires once per run.
        assert_eq!(f.on_inbound(Some("alertaIncidente"), t0 + Duration::from_millis(150)), Inbound::Process);
        f.arm(t0);
        assert_eq!(f.on_inbound(Some("alertaIncidente"), t0), Inbound::Close);
    }

    #[test]
    fn after_receive_processes_first() {
        let mut f = FaultState::new(vec![FaultSpec::Disappear {
            from: DisappearFrom::AfterReceive { operation: "x".into() },
            duration_ms: None,
        }]);
        let t0 = Instant::now();
        f.arm(t0);
        assert_eq!(f.on_inbound(Some("x"), t0), Inbound::ProcessThenVanish);
        assert!(f.is_gone(t0 + Duration::from_secs(3600)));
    }

    #[test]
    fn timed_disappearance() {
        let mut f = FaultState::new(vec![FaultSpec::Disappear { from: DisappearFrom::AfterMs { ms: 10 }, duration_ms: Some(5) }]);
        let t0 = Instant::now();
        f.arm(t0);
        assert!(!f.is_gone(t0));
        assert!(f.is_gone(t0 + Duration::from_millis(12)));
        assert!(!f.is_gone(t0 + Duration::from_millis(15)));
    }

    #[test]
    fn drop_every_third() {
        let mut f = FaultState::new(vec![FaultSpec::DropEveryNth { n: 3 }]);
        f.arm(Instant::now());
        let got: Vec<Inbound> = (0..6).map(|_| f.on_inbound(Some("a"), Instant::now())).collect();
        assert_eq!(got.iter().filter(|d| **d == Inbound::Close).count(), 2);
        assert_eq!(got[2], Inbound::Close);
    }

    #[test]
    fn never_respond_is_silent() {
        let mut f = FaultState::new(vec![FaultSpec::NeverRespond]);
        f.arm(Instant::now());
        assert_eq!(f.on_inbound(None, Instant::now()), Inbound::Silent);
    }

    #[test]
    fn latency_samples_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let d = Latency::Radio.sample(&mut rng).as_millis();
            assert!((100..=800).contains(&d));
        }
        assert_eq!(Latency::Fixed { ms: 7 }.sample(&mut rng), Duration::from_millis(7));
        assert_eq!(Latency::None.sample(&mut rng), Duration::ZERO);
    }

    #[test]
    fn serde_shapes() {
        let f: FaultSpec = toml::from_str("kind = \"disappear\"\nfrom = \"after_ms\"\nms = 40").unwrap();
        assert_eq!(f, FaultSpec::Disappear { from: DisappearFrom::AfterMs { ms: 40 }, duration_ms: None });
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<FaultSpec>(&json).unwrap(), f);
        assert!(FaultSpec::DropEveryNth { n: 0 }.check().is_err());
    }
}

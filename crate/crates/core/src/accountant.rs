//! Renyi-DP ledger for the Gaussian mechanism.
//!
//! Each aggregation event (a consensus check or an answer) costs
//! `lambda * delta^2 / (2 * sigma^2)` RDP at every order `lambda` in a fixed
//! grid. Composition is additive, so the ledger keeps one running sum per
//! order, and the conversion to an (epsilon, delta)-DP statement minimizes
//! `eps_rdp(lambda) + ln(1/delta) / (lambda - 1)` over the grid.
//!
//! Only data-independent bounds are tracked here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensitivity of a consensus-check event: one teacher changes the max count
/// by at most 1.
pub const CHECK_SENSITIVITY: f64 = 1.0;

/// Sensitivity of an answer event: one teacher moves one vote between two
/// histogram bins, an L2 change of sqrt(2).
pub const ANSWER_SENSITIVITY: f64 = std::f64::consts::SQRT_2;

/// The fixed order grid, spanning tight to loose regimes.
pub const DEFAULT_ORDERS: [f64; 14] = [
    1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Check,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEvent {
    pub kind: EventKind,
    pub delta: f64,
    pub sigma: f64,
}

/// Accumulated RDP cost per order plus the ordered event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdpLedger {
    pub orders: Vec<f64>,
    pub eps_rdp: Vec<f64>,
    pub events: Vec<PrivacyEvent>,
}

/// A concrete (epsilon, delta)-DP statement and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
    pub order: f64,
}

/// RDP of the Gaussian mechanism: `lambda * delta^2 / (2 * sigma^2)`.
pub fn gaussian_rdp(delta: f64, sigma: f64, lambda: f64) -> Result<f64> {
    if delta <= 0.0 || sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "sensitivity and sigma must be positive".into(),
        ));
    }
    if lambda <= 1.0 {
        return Err(Error::InvalidArgument("order must exceed 1".into()));
    }
    Ok(lambda * delta * delta / (2.0 * sigma * sigma))
}

impl Default for RdpLedger {
    fn default() -> Self {
        Self::new(&DEFAULT_ORDERS)
    }
}

impl RdpLedger {
    pub fn new(orders: &[f64]) -> Self {
        assert!(!orders.is_empty() && orders.iter().all(|&l| l > 1.0));
        RdpLedger {
            orders: orders.to_vec(),
            eps_rdp: vec![0.0; orders.len()],
            events: Vec::new(),
        }
    }

    pub fn record_event(&mut self, kind: EventKind, delta: f64, sigma: f64) -> Result<()> {
        for (i, &lambda) in self.orders.iter().enumerate() {
            self.eps_rdp[i] += gaussian_rdp(delta, sigma, lambda)?;
        }
        self.events.push(PrivacyEvent { kind, delta, sigma });
        Ok(())
    }

    /// Tightest (epsilon, delta)-DP over the order grid.
    pub fn to_dp(&self, delta: f64) -> Result<DpGuarantee> {
        if !(0.0..1.0).contains(&delta) || delta == 0.0 {
            return Err(Error::InvalidArgument("need 0 < delta < 1".into()));
        }
        let log_inv = (1.0 / delta).ln();
        let mut best = DpGuarantee {
            epsilon: f64::INFINITY,
            delta,
            order: self.orders[0],
        };
        for (i, &lambda) in self.orders.iter().enumerate() {
            let eps = self.eps_rdp[i] + log_inv / (lambda - 1.0);
            if eps < best.epsilon {
                best.epsilon = eps;
                best.order = lambda;
            }
        }
        Ok(best)
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ledger: RdpLedger = serde_json::from_str(s)?;
        if ledger.orders.len() != ledger.eps_rdp.len() {
            return Err(Error::Parse("orders/eps_rdp length mismatch".into()));
        }
        if ledger.orders.iter().any(|&l| l <= 1.0) {
            return Err(Error::Parse("orders must exceed 1".into()));
        }
        Ok(ledger)
    }
}

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Target Metropolis acceptance rate during burn-in adaptation.
    pub adapt_target: f64,
    /// Iterations between step-size adjustments.
    pub adapt_window: usize,
    /// Gain `κ` in `sd ← sd · exp(κ (rate − target))`.
    pub adapt_gain: f64,
    /// When false, step sizes stay at `initial_step_sd` for the whole run.
    pub adapt: bool,
    /// Initial random-walk sd on the logit scale, for both φ and r.
    pub initial_step_sd: f64,
    pub seed: u64,
    /// Keep the latent field with every stored draw (needed for prediction).
    pub store_epsilon: bool,
    /// Add `2M` to the inverse-Wishart degrees of freedom.
    pub nu_includes_predictions: bool,
    /// `M`, the number of prediction sites counted when the flag above is set.
    pub n_prediction_sites: usize,
}

pub const STEP_SD_MIN: f64 = 1e-4;
pub const STEP_SD_MAX: f64 = 10.0;

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 70_000,
            burn_in: 20_000,
            thin: 5,
            adapt_target: 0.40,
            adapt_window: 100,
            adapt_gain: 1.0,
            adapt: true,
            initial_step_sd: 0.5,
            seed: 0,
            store_epsilon: true,
            nu_includes_predictions: false,
            n_prediction_sites: 0,
        }
    }
}

impl McmcConfig {
    /// Shortened chain used for simulation replicates and cross-validation.
    pub fn short() -> Self {
        Self {
            n_iter: 6_000,
            burn_in: 1_000,
            thin: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::domain(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::domain("thin must be at least 1"));
        }
        if self.adapt_window == 0 {
            return Err(Error::domain("adapt_window must be at least 1"));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::domain("adapt_target must lie in (0, 1)"));
        }
        if !(self.initial_step_sd > 0.0) {
            return Err(Error::domain("initial_step_sd must be positive"));
        }
        Ok(())
    }

    /// Number of stored draws: `⌊(n_iter − burn_in) / thin⌋`.
    pub fn n_stored(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

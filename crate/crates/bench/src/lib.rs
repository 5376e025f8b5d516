//! Fixtures shared by the criterion benches.

use pws_core::config::RunConfig;
use pws_core::net::{Network, NormMode};
use pws_core::optim::Sgd;
use pws_core::train::build_network;
use pws_core::{Result, Rng, Tensor};

/// A smoke-size network with its optimizer and one fixed batch.
pub struct StepFixture {
    pub net: Network<f32>,
    pub opt: Sgd<f32>,
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl StepFixture {
    pub fn new(mode: NormMode, batch: usize) -> Result<Self> {
        let mut cfg = RunConfig::smoke();
        cfg.norm = mode;
        let net = build_network::<f32>(&cfg)?;
        let opt = Sgd::new(cfg.sgd(), net.registry())?;
        let mut rng = Rng::new(1);
        let x = rng.gaussian_tensor(&[batch, 3, 32, 32], 0.0, 1.0)?;
        let labels = (0..batch).map(|_| rng.below(10)).collect();
        Ok(StepFixture { net, opt, x, labels })
    }
}

//! Pricing and calibration engine for European options under
//! stochastic-volatility models whose drawdown and drawup processes are
//! sticky at 1.
//!
//! Two independent pricers cross-validate each other: a continuous-time
//! Markov chain Monte Carlo simulator of the sticky diffusion ([`ctmc`]) and
//! a deep-Galerkin network trained on the pricing PDE residuals ([`net`],
//! [`pde`]). A Levenberg-Marquardt calibrator with a scaling-factor search
//! fits the model to option chains ([`calibrate`]), and a semi-analytic
//! Heston pricer serves as the no-stickiness baseline ([`heston`]).
//!
//! The `book/` directory holds a guided tour; its chapters are compiled as
//! doc-tests through the [`guide`] module, so every snippet in the book is
//! checked by `cargo test --doc`.

pub mod calibrate;
pub mod cli;
pub mod ctmc;
pub mod heston;
pub mod market;
pub mod model;
pub mod net;
pub mod pde;

/// The book, chapter by chapter, as doc-tested modules.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
    #[doc = include_str!("../../../book/src/deep-solver.md")]
    pub mod deep_solver {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    pub mod calibration {}
    #[doc = include_str!("../../../book/src/market-data.md")]
    pub mod market_data {}
}

// SPDX-License-Identifier: Apache-2.0

pub mod config;
pub mod cli;
pub mod features;
pub mod golden;
pub mod gridio;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod models;
pub mod pipeline;

#![allow(dead_code)]

use std::sync::Arc;

use distal::config::Config;
use distal::orchestrator::{Engine, StepOutcome, Workspace};
use distal::sim::{synthetic_instances, SimSpec};
use distal::transport::Transport;

/// A small skewed pool: 8 groups, 600 instances.
pub fn small_spec() -> SimSpec {
    SimSpec {
        total: 600,
        bootstrap: 40,
        ..SimSpec::default()
    }
}

/// Loop config for `spec` that also carves out a test set.
pub fn config(spec: &SimSpec, seed: u64, test_size: usize) -> Config {
    let mut cfg = spec.config(seed);
    cfg.loop_.test_size = test_size;
    cfg.logical_clock = true;
    cfg
}

pub fn workspace(spec: &SimSpec, cfg: &Config, seed: u64) -> Workspace {
    let mut ws = Workspace::new(cfg, true);
    ws.add_instances(synthetic_instances(spec, seed).unwrap())
        .unwrap();
    ws
}

pub fn engine(cfg: &Config) -> Engine {
    Engine::new(cfg.clone(), cfg.providers(cfg.transport().unwrap())).unwrap()
}

pub fn engine_with(cfg: &Config, transport: Arc<dyn Transport>) -> Engine {
    Engine::new(cfg.clone(), cfg.providers(transport)).unwrap()
}

/// Steps to completion, checking invariants after every step.
pub fn run_checked(engine: &mut Engine, ws: &mut Workspace) -> usize {
    let mut steps = 0;
    loop {
        ws.check_invariants().unwrap();
        match engine.step(ws).unwrap() {
            StepOutcome::Progressed => steps += 1,
            StepOutcome::Done => return steps,
            other => panic!("unexpected {other:?}"),
        }
    }
}

pub fn canonical(ws: &Workspace) -> String {
    distal::store::to_canonical(ws).unwrap()
}

#![allow(dead_code)]

use std::net::TcpListener;
use std::thread;

use pocketrl::distributed::{Tcp, WorkerIdentity, DEFAULT_TIMEOUT};
use pocketrl::env::{EnvConfig, EnvName};
use pocketrl::nn::ParamSet;
use pocketrl::ppo::PpoConfig;
use pocketrl::runner::{AlgoConfig, RunConfig, Trainer};

/// A loopback address that was free a moment ago.
pub fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

pub fn ppo_run(name: EnvName, num_envs: usize, iterations: usize, ppo: PpoConfig) -> RunConfig {
    let mut cfg = RunConfig::new(EnvConfig::new(name, num_envs), AlgoConfig::Ppo(ppo), iterations);
    cfg.record_timing = false;
    cfg
}

/// Trains `config` (with `env.num_envs` per worker) on `world` in-process
/// workers joined over loopback TCP; returns every rank's final parameters.
pub fn train_tcp(config: &RunConfig, world: usize, iterations: usize) -> Vec<ParamSet> {
    let addr = free_addr();
    let handles: Vec<_> = (0..world)
        .map(|rank| {
            let cfg = config.clone();
            let id = WorkerIdentity {
                rank,
                world_size: world,
                coordinator: addr.clone(),
            };
            thread::spawn(move || {
                let tcp = Tcp::connect(&id, DEFAULT_TIMEOUT).unwrap();
                let mut t = Trainer::new(cfg, Box::new(tcp)).unwrap();
                for _ in 0..iterations {
                    t.step().unwrap();
                }
                let p = t.params();
                t.shutdown().unwrap();
                p
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

pub fn train_local(config: &RunConfig, iterations: usize) -> ParamSet {
    let mut t = Trainer::single_process(config.clone()).unwrap();
    for _ in 0..iterations {
        t.step().unwrap();
    }
    t.params()
}

pub fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> f32 {
    assert_eq!(a.names(), b.names());
    a.flat_values()
        .iter()
        .zip(b.flat_values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

pub fn bits(p: &ParamSet) -> Vec<u32> {
    p.flat_values().iter().map(|v| v.to_bits()).collect()
}

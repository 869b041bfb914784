//! End-to-end behaviour of the DDQN training loop.

use lanepilot_core::ddqn::{
    initial_network, train, training_scenario, TrainConfig, TRAIN_LOG_HEADER,
};
use lanepilot_core::reward::RewardWeights;
use lanepilot_core::sim::ScenarioConfig;

fn run(config: &TrainConfig) -> lanepilot_core::ddqn::TrainOutcome {
    let scenario = ScenarioConfig::default();
    train(config, &RewardWeights::default(), |e| {
        training_scenario(&scenario, config.seed, e)
    })
    .unwrap()
}

fn short(episodes: u32) -> TrainConfig {
    TrainConfig {
        episodes,
        learning_starts: 32,
        buffer_capacity: 2_000,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn zero_episodes_return_the_initialization() {
    let config = short(0);
    let out = run(&config);
    assert_eq!(out.online, initial_network(&config));
    assert_eq!(out.target, out.online);
    assert!(out.log.episodes.is_empty());
    assert_eq!(out.log.to_csv().unwrap(), format!("{TRAIN_LOG_HEADER}\n"));
    assert_eq!(out.log.gradient_steps, 0);
}

#[test]
fn target_follows_the_sync_period() {
    let every_step = run(&TrainConfig {
        target_sync_period: 1,
        ..short(4)
    });
    assert!(every_step.log.gradient_steps > 0);
    assert_eq!(every_step.target, every_step.online);
    assert_eq!(every_step.log.target_syncs, every_step.log.gradient_steps);

    let never = run(&TrainConfig {
        target_sync_period: 1_000_000,
        ..short(4)
    });
    assert!(never.log.gradient_steps > 0);
    assert_eq!(never.log.target_syncs, 0);
    assert_eq!(never.target, initial_network(&short(4)));
    assert_ne!(never.online, never.target);
}

#[test]
fn training_is_reproducible() {
    let a = run(&short(5));
    let b = run(&short(5));
    assert_eq!(a.online.to_checkpoint(), b.online.to_checkpoint());
    assert_eq!(a.log.to_csv().unwrap(), b.log.to_csv().unwrap());
    let c = run(&TrainConfig {
        seed: 4,
        ..short(5)
    });
    assert_ne!(a.online, c.online);
}

#[test]
fn smoke_run_improves_episode_return() {
    let out = run(&TrainConfig {
        episodes: 200,
        seed: 1,
        ..Default::default()
    });
    assert_eq!(out.log.episodes.len(), 200);
    assert_eq!(out.log.skipped_batches, 0);
    let csv = out.log.to_csv().unwrap();
    assert!(csv.starts_with(&format!("{TRAIN_LOG_HEADER}\n")));
    assert_eq!(csv.lines().count(), 201);
    let first = out.log.mean_return(0..50);
    let last = out.log.mean_return(150..200);
    assert!(last > first, "first 50: {first:.1}, last 50: {last:.1}");
}

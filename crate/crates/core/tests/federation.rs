mod common;

use common::*;
use protofed::federation::*;
use protofed::losses::SecondTerm;
use protofed::prototypes::{aggregate_global, AggregationMode};
use protofed::Execution;

fn run(config: &RoundConfig, clients: usize, protocol: Protocol) -> Simulation {
    let states = tiny_clients(tiny_data(clients, 5), config);
    simulate(states, &tiny_model(), config, &Carrier::InProcess, protocol).unwrap()
}

#[test]
fn zero_rounds_gives_empty_report() {
    let sim = run(&tiny_round(0, 2), 2, Protocol::Prototypes);
    assert!(sim.report.rounds.is_empty());
    assert_eq!(sim.report.summary().m_ba, None);
}

#[test]
fn one_record_per_round_and_client() {
    let sim = run(&tiny_round(2, 3), 3, Protocol::Prototypes);
    let (t0, t1) = tiny_spec(3, 5).test_counts().unwrap();
    assert_eq!(sim.report.rounds.len(), 2);
    for (i, r) in sim.report.rounds.iter().enumerate() {
        assert_eq!(r.round, i as u32 + 1);
        assert_eq!(r.clients.iter().map(|c| c.client_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(r.excluded.is_empty());
        assert!(r.global.as_ref().unwrap().has_both_classes());
        for c in &r.clients {
            assert_eq!(c.epoch_losses.len(), 2);
            assert_eq!(c.attempts, 1);
            assert_eq!(c.confusion.total() as usize, t0 + t1);
        }
    }
}

#[test]
fn single_client_global_equals_its_local_prototypes() {
    let config = tiny_round(1, 1);
    let sim = run(&config, 1, Protocol::Prototypes);
    let mut fresh = tiny_clients(tiny_data(1, 5), &config).remove(0);
    let local = local_update(&mut fresh, 1, &config).unwrap().prototypes;
    assert_eq!(sim.report.rounds[0].global.as_ref().unwrap(), &local);
    assert_eq!(aggregate_global(&[(0, local.clone())], AggregationMode::Normalized).unwrap(), local);
}

#[test]
fn sequential_runs_are_bit_identical() {
    let config = tiny_round(2, 2);
    let a = run(&config, 2, Protocol::Prototypes).report.without_volatile();
    let b = run(&config, 2, Protocol::Prototypes).report.without_volatile();
    assert_eq!(a, b);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn parallel_mode_matches_sequential() {
    let seq = tiny_round(2, 3);
    let par = RoundConfig { execution: Execution::Parallel, ..seq.clone() };
    assert_eq!(
        run(&seq, 3, Protocol::Prototypes).report.without_volatile(),
        run(&par, 3, Protocol::Prototypes).report.without_volatile()
    );
}

#[test]
fn lambda_zero_isolates_clients() {
    let mut config = tiny_round(2, 3);
    config.loss.lambda = 0.0;
    let together = run(&config, 3, Protocol::Prototypes);
    let data = tiny_data(3, 5);
    for (i, d) in data.into_iter().enumerate() {
        let solo = simulate(
            tiny_clients(vec![d], &config),
            &tiny_model(),
            &RoundConfig { clients: 1, ..config.clone() },
            &Carrier::InProcess,
            Protocol::Prototypes,
        )
        .unwrap();
        assert_eq!(solo.clients[0].model.params(), together.clients[i].model.params(), "client {i}");
    }
}

#[test]
fn contrastive_term_changes_training_after_round_one() {
    let base = tiny_round(2, 2);
    let none = RoundConfig { second_term: SecondTerm::None, ..base.clone() };
    let a = run(&base, 2, Protocol::Prototypes).report;
    let b = run(&none, 2, Protocol::Prototypes).report;
    // round 1 has no global targets yet, so only the loss scale differs
    assert_ne!(a.rounds[1].clients[0].epoch_losses, b.rounds[1].clients[0].epoch_losses);
}

#[test]
fn prototype_bytes_constant_across_rounds() {
    let sim = run(&tiny_round(3, 2), 2, Protocol::Prototypes);
    let m = tiny_model().embed_dim();
    let want = (13 + protofed::transport::prototype_payload_len(2, m)) as u64;
    for r in &sim.report.rounds {
        for c in &r.clients {
            assert_eq!(c.bytes.upload, want);
        }
    }
}

#[test]
fn failed_client_is_retried_once() {
    let config = tiny_round(2, 2);
    let mut states = tiny_clients(tiny_data(2, 5), &config);
    states[1].injected_failures = vec![(1, 1)];
    let sim = simulate(states, &tiny_model(), &config, &Carrier::InProcess, Protocol::Prototypes).unwrap();
    let r1 = &sim.report.rounds[0];
    assert!(r1.excluded.is_empty());
    assert_eq!(r1.clients[1].attempts, 2);
    assert_eq!(r1.clients[0].attempts, 1);
}

#[test]
fn twice_failed_client_is_excluded_from_that_round() {
    for execution in [Execution::Sequential, Execution::Parallel] {
        let config = RoundConfig { execution, ..tiny_round(2, 2) };
        let mut states = tiny_clients(tiny_data(2, 5), &config);
        states[0].injected_failures = vec![(2, 2)];
        let sim = simulate(states, &tiny_model(), &config, &Carrier::InProcess, Protocol::Prototypes).unwrap();
        let r2 = &sim.report.rounds[1];
        assert_eq!(r2.excluded, vec![0]);
        assert_eq!(r2.clients.len(), 1);
        assert_eq!(r2.clients[0].client_id, 1);
        assert_eq!(sim.report.summary().excluded, vec![(2, 0)]);
    }
}

#[test]
fn fedavg_midpoint_and_identity() {
    assert_eq!(fedavg_average(&[(0, 5, vec![0.0, 0.0]), (1, 5, vec![2.0, 2.0])]).unwrap(), vec![1.0, 1.0]);
    let p = vec![0.3, -1.25, 7.0];
    assert_eq!(fedavg_average(&[(2, 7, p.clone()), (0, 7, p.clone()), (1, 7, p.clone())]).unwrap(), p);
    assert!(fedavg_average(&[(0, 1, vec![1.0]), (1, 1, vec![1.0, 2.0])]).is_err());
    assert!(fedavg_average(&[]).is_err());
}

#[test]
fn fedavg_runs_and_uploads_full_parameters() {
    let config = tiny_round(2, 2);
    let sim = run(&config, 2, Protocol::FedAvg);
    assert_eq!(sim.report.protocol, Protocol::FedAvg);
    assert_eq!(sim.report.rounds.len(), 2);
    let params = tiny_model().param_count() as u64;
    for c in sim.report.rounds.iter().flat_map(|r| &r.clients) {
        let overhead = c.bytes.upload - params * 8;
        // frame header + sample count + checkpoint header
        assert!(overhead > 13 + 8 && overhead < 4096, "overhead {overhead}");
        assert!(c.bytes.upload > 8 * params);
    }
    // after averaging, clients resume from the same trainable parameters
    let a = &sim.clients[0].model.params().flatten_trainable();
    let b = &sim.clients[1].model.params().flatten_trainable();
    assert_ne!(a, b);
}

#[test]
fn fedavg_is_deterministic() {
    let config = tiny_round(2, 2);
    assert_eq!(
        run(&config, 2, Protocol::FedAvg).report.without_volatile(),
        run(&config, 2, Protocol::FedAvg).report.without_volatile()
    );
}

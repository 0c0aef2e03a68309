//! Single-client SFL with defenses off must be indistinguishable from
//! centralized training of the unsplit model: same losses, same parameter
//! bits, epoch by epoch.

use ressfl_core::data::{synth_dataset, SynthSpec};
use ressfl_core::layers::params_bits_equal;
use ressfl_core::optim::decayed_lr;
use ressfl_core::protocol::{LogPolicy, NoDefense, SflParams, SflRun};
use ressfl_core::tensor::bits_equal;
use ressfl_core::testing::CentralizedOracle;
use ressfl_core::zoo::{build_network, build_split_classifier, DESK_ARCH};

#[test]
fn one_client_sfl_matches_centralized_training_bitwise() {
    let seed = 123;
    let epochs = 3;
    let lr = 0.05;
    let spec = SynthSpec {
        num_samples: 80,
        ..SynthSpec::default()
    };

    let dataset = synth_dataset(&spec, seed).unwrap();
    let model = build_split_classifier(DESK_ARCH, 2, &[1, 8, 8], 4, seed).unwrap();
    let mut run = SflRun::new(
        model,
        dataset.clone(),
        SflParams {
            num_clients: 1,
            total_epochs: epochs,
            batch_size: 8,
            client_lr: lr,
            server_lr: lr,
            momentum: 0.9,
            lr_decay: true,
            seed,
            log: LogPolicy::None,
            ..SflParams::default()
        },
    )
    .unwrap();
    let shard = run.clients[0].shard.clone();

    let full = build_network(DESK_ARCH, &[1, 8, 8], 4, seed).unwrap();
    let mut oracle = CentralizedOracle::new(full, lr, 0.9, seed);

    for t in 1..=epochs {
        let sfl = run.train_epoch(&NoDefense).unwrap();
        let oracle_loss = oracle
            .train_epoch(&dataset, &shard, 8, decayed_lr(lr, t, epochs))
            .unwrap();
        assert_eq!(
            sfl.train_loss.to_bits(),
            oracle_loss.to_bits(),
            "epoch {t} losses diverge: {} vs {}",
            sfl.train_loss,
            oracle_loss
        );

        // Client params followed by server params must equal the unsplit
        // network's parameter list bit-for-bit.
        let sfl_params: Vec<_> = run.clients[0]
            .model
            .params()
            .into_iter()
            .chain(run.server.model.params())
            .collect();
        let oracle_params = oracle.net.params();
        assert_eq!(sfl_params.len(), oracle_params.len());
        for (i, (a, b)) in sfl_params.iter().zip(oracle_params.iter()).enumerate() {
            assert!(bits_equal(a, b), "epoch {t}, param {i} diverges");
        }
    }
}

#[test]
fn split_point_does_not_change_the_trajectory() {
    // Cut 1 and cut 2 carve the same unsplit network differently; with one
    // client and shared hyperparameters the end state must be identical.
    let seed = 321;
    let spec = SynthSpec {
        num_samples: 48,
        ..SynthSpec::default()
    };
    let run_with_cut = |cut: usize| {
        let dataset = synth_dataset(&spec, seed).unwrap();
        let model = build_split_classifier(DESK_ARCH, cut, &[1, 8, 8], 4, seed).unwrap();
        let mut run = SflRun::new(
            model,
            dataset,
            SflParams {
                num_clients: 1,
                total_epochs: 2,
                batch_size: 8,
                client_lr: 0.05,
                server_lr: 0.05,
                seed,
                log: LogPolicy::None,
                ..SflParams::default()
            },
        )
        .unwrap();
        run.run(&NoDefense).unwrap();
        let mut all = run.clients[0].model.clone();
        all.extend(run.server.model.clone());
        all
    };
    let a = run_with_cut(1);
    let b = run_with_cut(2);
    assert!(params_bits_equal(&a, &b));
}

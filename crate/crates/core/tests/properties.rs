//! Property tests: shape algebra totality, partition laws, checkpoint
//! round-trips and metric identities under randomized inputs.

use proptest::prelude::*;

use ressfl_core::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
use ressfl_core::data::partition_clients;
use ressfl_core::layers::{params_bits_equal, Conv2d, Dense, Layer, Network, Relu};
use ressfl_core::metrics::{mse, psnr_from_mse, ssim};
use ressfl_core::rng::substream;
use ressfl_core::tensor::Tensor;
use ressfl_core::testing::well_conditioned_input;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_function_matches_forward(
        cin in 1usize..3,
        cout in 1usize..4,
        k in 1usize..4,
        s in 1usize..3,
        p in 0usize..2,
        hw in 3usize..9,
        n in 1usize..3,
    ) {
        let conv = Conv2d::kaiming(cin, cout, k, s, p, &mut substream(7, "prop", 0));
        let net = Network::from_layers(vec![Layer::Conv2d(conv)]);
        let input_shape = vec![n, cin, hw, hw];
        match net.output_shape(&input_shape) {
            Ok(shape) => {
                let x = well_conditioned_input(input_shape, 1);
                let y = net.predict(&x).unwrap();
                prop_assert_eq!(y.shape(), &shape[..]);
                prop_assert!(shape[2] >= 1 && shape[3] >= 1);
            }
            Err(_) => {
                // Shape function rejected it; forward must reject it too.
                let x = well_conditioned_input(input_shape, 1);
                prop_assert!(net.predict(&x).is_err());
            }
        }
    }

    #[test]
    fn partition_is_always_a_partition(n in 1usize..200, clients in 1usize..12) {
        prop_assume!(clients <= n);
        let indices: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let p = partition_clients(&indices, clients, 99).unwrap();
        prop_assert_eq!(p.shards.len(), clients);
        let sizes: Vec<usize> = p.shards.iter().map(|s| s.len()).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(max - min <= 1);
        let mut all: Vec<usize> = p.shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, indices);
    }

    #[test]
    fn checkpoint_round_trip_under_random_shapes(
        c1 in 1usize..5,
        c2 in 1usize..5,
        units in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = substream(seed, "prop-ckpt", 0);
        let net = Network::from_layers(vec![
            Layer::Conv2d(Conv2d::kaiming(c1, c2, 3, 1, 1, &mut rng)),
            Layer::Relu(Relu::new()),
            Layer::Dense(Dense::kaiming(8, units, &mut rng)),
        ]);
        let ckpt = Checkpoint::from_network(&net, CheckpointMeta {
            arch: "prop".into(),
            cut_layer: 1,
            bottleneck: None,
            epoch: 0,
            seed,
            lambda: None,
            input_shape: None,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rsfl");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut restored = Network::from_layers(vec![
            Layer::Conv2d(Conv2d::kaiming(c1, c2, 3, 1, 1, &mut substream(seed + 1, "prop-ckpt", 1))),
            Layer::Relu(Relu::new()),
            Layer::Dense(Dense::kaiming(8, units, &mut substream(seed + 2, "prop-ckpt", 2))),
        ]);
        loaded.load_into(&mut restored).unwrap();
        prop_assert!(params_bits_equal(&restored, &net));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..500, hw in 4usize..12) {
        let mk = |s: u64| {
            let mut t = well_conditioned_input(vec![1, 1, hw, hw], s);
            t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.45 * *v);
            t
        };
        let x = mk(seed);
        let y = mk(seed + 1000);
        let a = ssim(&x, &y).unwrap();
        let b = ssim(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_mse_identity(seed in 0u64..500) {
        let x = well_conditioned_input(vec![1, 1, 6, 6], seed);
        let y = well_conditioned_input(vec![1, 1, 6, 6], seed + 77);
        let m = mse(&x, &y).unwrap();
        prop_assume!(m >= 1e-10);
        let p = psnr_from_mse(m);
        prop_assert_eq!(p.to_bits(), (10.0 * (1.0 / m).log10()).to_bits());
    }

    #[test]
    fn tensor_select_rows_preserves_values(n in 2usize..6, take in 1usize..4) {
        prop_assume!(take <= n);
        let t = well_conditioned_input(vec![n, 3], 5);
        let rows: Vec<usize> = (0..take).map(|i| (i * 2) % n).collect();
        let s = t.select_rows(&rows);
        prop_assert_eq!(s.shape()[0], take);
        for (out_row, &src_row) in rows.iter().enumerate() {
            prop_assert_eq!(
                &s.data()[out_row * 3..(out_row + 1) * 3],
                &t.data()[src_row * 3..(src_row + 1) * 3]
            );
        }
    }
}

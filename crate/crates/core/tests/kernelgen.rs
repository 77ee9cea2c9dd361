use flexkernel::kernelgen::{
    init_magnet, magnet_forward, magnet_on_tape, make_grid, mgn_forward, GaborLayer, InitConfig, Linear, Magnet, MagnetShape,
};
use flexkernel::numerics::params::{max_relative_error, register};
use flexkernel::{fft_nd, finite_difference_grad, RngStream, Tape, Tensor};
use proptest::prelude::*;

fn shape(dims: usize, layers: usize, hidden: usize, isotropic: bool) -> MagnetShape {
    MagnetShape {
        dims,
        layers,
        hidden,
        in_channels: 2,
        out_channels: 2,
        isotropic,
    }
}

fn net(s: MagnetShape, seed: u64) -> Magnet<Tensor<f64>> {
    init_magnet(s, &InitConfig::default(), &mut RngStream::new(seed)).unwrap()
}

#[test]
fn forward_is_bitwise_deterministic() {
    let m = net(shape(2, 3, 8, false), 5);
    let grid = make_grid(2, 17).unwrap();
    let a = magnet_forward(&grid, &m).unwrap();
    let b = magnet_forward(&grid, &m).unwrap();
    assert_eq!(a.values.data(), b.values.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coarse_grid_is_subsample_of_refined_grid(seed in any::<u64>(), k in 2usize..20, dims in 1usize..3) {
        let m = net(shape(dims, 3, 6, false), seed);
        let coarse = magnet_forward(&make_grid(dims, k).unwrap(), &m).unwrap();
        let fine = magnet_forward(&make_grid(dims, 2 * k - 1).unwrap(), &m).unwrap();
        let kf = 2 * k - 1;
        for c in 0..4 {
            let cv = &coarse.values.data()[c * k.pow(dims as u32)..];
            let fv = &fine.values.data()[c * kf.pow(dims as u32)..];
            if dims == 1 {
                for i in 0..k {
                    prop_assert!((cv[i] - fv[2 * i]).abs() < 1e-12);
                }
            } else {
                for i in 0..k {
                    for j in 0..k {
                        prop_assert!((cv[i * k + j] - fv[2 * i * kf + 2 * j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn equal_widths_reduce_to_isotropic(seed in any::<u64>()) {
        let iso = net(shape(2, 3, 5, true), seed);
        let mut aniso = iso.clone();
        aniso.shape.isotropic = false;
        for g in &mut aniso.gabor {
            let shared = g.gamma_raw[0].clone();
            g.gamma_raw = vec![shared.clone(), shared];
        }
        let grid = make_grid(2, 9).unwrap();
        let a = mgn_forward(&grid, &iso).unwrap();
        let b = magnet_forward(&grid, &aniso).unwrap();
        prop_assert_eq!(a.values.data(), b.values.data());
    }
}

#[test]
fn two_flat_layers_produce_sum_and_difference_frequencies() {
    use std::f64::consts::PI;
    let (f1, f2) = (3.0, 1.0);
    let layer = |f: f64, phase: f64| {
        GaborLayer::from_widths(
            vec![Tensor::from_vec(vec![1e-9])],
            vec![Tensor::from_vec(vec![0.0])],
            Tensor::from_f64([1, 1], &[2.0 * PI * f]).unwrap(),
            Tensor::from_vec(vec![phase]),
        )
        .unwrap()
    };
    let m = Magnet {
        shape: MagnetShape {
            dims: 1,
            layers: 2,
            hidden: 1,
            in_channels: 1,
            out_channels: 1,
            isotropic: false,
        },
        gabor: vec![layer(f1, 0.3), layer(f2, -1.1)],
        hidden: vec![Linear {
            weight: Tensor::ones([1, 1]),
            bias: Tensor::zeros([1]),
        }],
        output: Linear {
            weight: Tensor::ones([1, 1]),
            bias: Tensor::zeros([1]),
        },
    };
    let k = magnet_forward(&make_grid(1, 33).unwrap(), &m).unwrap();
    // the first 32 samples cover one 2-unit period, so bin b is b/2 cycles per unit
    let periodic = Tensor::from_vec(k.values.data()[..32].to_vec());
    let power: Vec<f64> = fft_nd(&periodic, &[0]).unwrap().data().iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power.iter().sum();
    let bins = [(2.0 * (f1 - f2)) as usize, (2.0 * (f1 + f2)) as usize];
    let hit: f64 = bins.iter().map(|&b| power[b] + power[32 - b]).sum();
    assert!(hit / total > 1.0 - 1e-12, "fraction {}", hit / total);
}

fn mse_loss(m: &Magnet<Tensor<f64>>, target: &Tensor<f64>, tape: &mut Tape<f64>) -> flexkernel::Var {
    let grid = make_grid(2, 5).unwrap();
    let vars = register(m, "", tape);
    let k = magnet_on_tape(tape, &grid, &vars).unwrap();
    let t = tape.constant(target.clone());
    let d = tape.sub(k, t).unwrap();
    let sq = tape.square(d);
    tape.mean(sq)
}

#[test]
fn mse_gradients_match_finite_differences() {
    for seed in 0..5 {
        let m = net(shape(2, 3, 4, seed % 2 == 1), seed);
        let target: Tensor<f64> = RngStream::new(100 + seed).uniform(-1.0, 1.0, 100).unwrap().reshape([2, 2, 5, 5]).unwrap();
        let mut tape = Tape::new();
        let out = mse_loss(&m, &target, &mut tape);
        let analytic = tape.backward(out).unwrap().clone();
        let numeric = finite_difference_grad(
            |p| {
                let mut t = Tape::new();
                let o = mse_loss(p, &target, &mut t);
                t.value(o).item()
            },
            &m,
            1e-4,
        )
        .unwrap();
        let (err, name) = max_relative_error(&analytic, &numeric, 1e-6).unwrap();
        assert!(err < 1e-4, "seed {seed}: {name} relative error {err}");
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Record;
use crate::geometry::{PdfFamily, Prototype};
use crate::gradcheck::{central_difference, relative_error};
use crate::losses::LossWeights;

fn cfg(formulation: Formulation) -> ModelConfig {
    ModelConfig {
        formulation,
        classes: 2,
        per_class: 1,
        dim: 3,
        d_in: 4,
        d_hidden: 3,
        eps: 1e-4,
        mixture_components: 2,
        zeta: (2, 2),
        patch: 1,
    }
}

fn random_records(n: usize, len: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Record> {
    (0..n)
        .map(|i| Record {
            label: (i % classes) as u32,
            features: (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect()
}

#[test]
fn zero_neck_outputs_one_half() {
    let n = NeckParams::zeros(4, 3, 5);
    let z = neck_forward(&[0.3, -2.0, 1.0, 7.0, 0.0, 0.0, 1.0, 1.0], (2, 1), &n).unwrap();
    assert!(z.values.iter().all(|&v| v == 0.5));
    assert_eq!(z.values.len(), 10);
}

#[test]
fn neck_hand_computed() {
    // d_in = 2, d_hidden = 2, dim = 2
    let n = NeckParams {
        d_in: 2,
        d_hidden: 2,
        dim: 2,
        w1: vec![1.0, -1.0, 2.0, 0.5],
        b1: vec![0.0, -0.25],
        w2: vec![1.0, 0.0, -1.0, 3.0],
        b2: vec![0.1, -0.2],
    };
    // x = (1, 0.5): a1 = (1 + 1, -1 + 0.25 - 0.25) = (2, -1) -> h = (2, 0)
    // a2 = (2 + 0.1, 0 - 0.2)
    let z = neck_forward(&[1.0, 0.5], (1, 1), &n).unwrap();
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    assert!((z.values[0] - s(2.1)).abs() < 1e-15);
    assert!((z.values[1] - s(-0.2)).abs() < 1e-15);
}

#[test]
fn single_cell_grid_is_a_perceptron() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = NeckParams::kaiming_uniform(3, 4, 2, &mut rng);
    let x = [0.2f32, -0.7, 1.1];
    let z = neck_forward(&x, (1, 1), &n).unwrap();
    for j in 0..2 {
        let mut a2 = n.b2[j];
        for h in 0..4 {
            let mut a1 = n.b1[h];
            for i in 0..3 {
                a1 += f64::from(x[i]) * n.w1[i * 4 + h];
            }
            a2 += a1.max(0.0) * n.w2[h * 2 + j];
        }
        assert!((z.values[j] - 1.0 / (1.0 + (-a2).exp())).abs() < 1e-14);
    }
}

fn cosine_bank(vectors: Vec<Vec<f64>>, classes: usize) -> PrototypeBank {
    let q = vectors.len() / classes;
    let parts = vectors.into_iter().map(Prototype::Cosine).collect();
    PrototypeBank::new(Formulation::Cosine, classes, q, 1, parts).unwrap()
}

#[test]
fn pooling_examples() {
    // one-cell grid: pooled equals the cell similarity
    let z = LatentMap::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
    let bank = cosine_bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
    let out = prototype_layer_forward(&z, &bank).unwrap();
    assert!((out.pooled[0] - 0.5f64.sqrt()).abs() < 1e-15);

    // 2x2 grid of unit vectors whose cosine to (1, 0) is {0.1, 0.9, -0.2, 0.3}
    let cells: Vec<f64> = [0.1f64, 0.9, -0.2, 0.3]
        .iter()
        .flat_map(|&c| [c, (1.0 - c * c).sqrt()])
        .collect();
    let z = LatentMap::new(2, 2, 2, cells).unwrap();
    let out = prototype_layer_forward(&z, &bank).unwrap();
    assert!((out.pooled[0] - 0.9).abs() < 1e-12);
    assert_eq!(out.argmax[0], 1);
    assert!((out.maps.get(0, 1, 0) + 0.2).abs() < 1e-12);
}

#[test]
fn euclidean_exact_match_peaks_at_its_cell() {
    let p = vec![0.25, 0.5, 0.75];
    let mut cells = vec![0.9; 12];
    cells[6..9].copy_from_slice(&p);
    let z = LatentMap::new(2, 2, 3, cells).unwrap();
    let parts = vec![
        Prototype::Euclidean {
            point: p,
            eps: 1e-4,
        },
        Prototype::Euclidean {
            point: vec![0.0; 3],
            eps: 1e-4,
        },
    ];
    let bank = PrototypeBank::new(Formulation::Euclidean, 2, 1, 1, parts).unwrap();
    let out = prototype_layer_forward(&z, &bank).unwrap();
    assert_eq!(out.argmax[0], 2);
    assert!((out.pooled[0] - (1.0f64 / 1e-4).ln()).abs() < 1e-9);
}

#[test]
fn bank_rejects_mixed_formulations() {
    let parts = vec![
        Prototype::Cosine(vec![1.0, 0.0]),
        Prototype::ScaledDot(vec![1.0, 0.0]),
    ];
    assert!(matches!(
        PrototypeBank::new(Formulation::Cosine, 2, 1, 1, parts),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn head_examples() {
    let zero = Head {
        classes: 2,
        prototypes: 3,
        weights: vec![0.0; 6],
        bias: vec![0.0; 2],
    };
    assert_eq!(
        head_forward(&[1.0, 2.0, 3.0], &zero).unwrap(),
        vec![0.0, 0.0]
    );

    let h = Head::class_connections(3, 2);
    for k in 0..6 {
        let mut onehot = vec![0.0; 6];
        onehot[k] = 1.0;
        let logits = head_forward(&onehot, &h).unwrap();
        assert_eq!(forward::argmax(&logits), k / 2);
    }

    let h = Head {
        classes: 2,
        prototypes: 2,
        weights: vec![2.0, -1.0, 0.5, 3.0],
        bias: vec![0.1, -0.1],
    };
    assert_eq!(head_forward(&[1.0, 2.0], &h).unwrap(), vec![0.1, 6.4]);
    assert!(head_forward(&[1.0], &h).is_err());
}

#[test]
fn flatten_round_trip_and_masks() {
    for f in Formulation::ALL {
        let p = ModelParams::init(&cfg(f), 11).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let mut q = ModelParams::init(&cfg(f), 12).unwrap();
        q.unflatten(&flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.decay_mask().len(), flat.len());
        let t = p.trainable_mask(Trainable {
            neck: false,
            prototypes: true,
            head: false,
        });
        assert_eq!(t.iter().filter(|&&b| b).count(), p.bank.num_params());
        for i in [0, p.bank_offset(), p.head_offset(), flat.len() - 1] {
            assert!(!p.param_path(i).is_empty());
        }
    }
}

#[test]
fn param_paths_name_groups() {
    let p = ModelParams::init(&cfg(Formulation::HyperPg(PdfFamily::TruncGaussian)), 0).unwrap();
    assert_eq!(p.param_path(0), "neck.w1[0][0]");
    assert_eq!(p.param_path(p.bank_offset()), "bank[0].anchor[0]");
    assert_eq!(p.param_path(p.bank_offset() + 3), "bank[0].mu");
    assert_eq!(p.param_path(p.head_offset()), "head.weights[0][0]");
    assert_eq!(p.param_path(p.num_params() - 1), "head.bias[1]");
}

#[test]
fn frozen_neck_single_prototype_gradient() {
    // zero head weights: cross entropy sends nothing back to the prototypes,
    // so only the cluster term (weight 1, sample of class 0) reaches bank[0]
    let mut p = ModelParams::init(&cfg(Formulation::Vmf), 5).unwrap();
    p.head.weights.iter_mut().for_each(|w| *w = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recs = random_records(1, 16, 1, &mut rng);
    let w = LossWeights::new(1.0, 0.0).unwrap();
    let frozen = Trainable {
        neck: false,
        prototypes: true,
        head: false,
    };
    let (_, g) = batch_loss_and_grad(&p, &recs, &w, frozen, false).unwrap();
    let fw = forward(&p, &recs[0].features).unwrap();
    let cell = fw.latent.cell(fw.layer.argmax[0]);
    let sg = p.bank.parts[0].gradient(cell).unwrap();
    let off = p.part_offset(0);
    for (i, v) in sg.grad_params.iter().enumerate() {
        assert!((g[off + i] + v).abs() < 1e-12);
    }
    let other = p.part_offset(1);
    assert!(g[other..p.head_offset()].iter().all(|&x| x == 0.0));
    assert!(g[..p.bank_offset()].iter().all(|&x| x == 0.0));
}

#[test]
fn end_to_end_gradient_matches_differences_with_patches() {
    let mut c = cfg(Formulation::Euclidean);
    c.zeta = (3, 2);
    c.patch = 2;
    c.per_class = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for seed in 0..20 {
        let p = ModelParams::init(&c, seed).unwrap();
        let recs = random_records(4, 24, 2, &mut rng);
        if min_decision_margin(&p, &recs).unwrap() < 1e-3 {
            continue;
        }
        let w = LossWeights::default();
        let (_, g) = batch_loss_and_grad(&p, &recs, &w, Trainable::ALL, true).unwrap();
        let num = central_difference(
            |t| {
                let mut q = p.clone();
                q.unflatten(t)?;
                Ok(batch_loss(&q, &recs, &w)?.total)
            },
            &p.flatten(),
            1e-5,
        )
        .unwrap();
        for (a, n) in g.iter().zip(&num) {
            assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn patch_only_for_point_formulations() {
    let mut c = cfg(Formulation::Vmf);
    c.patch = 2;
    assert!(matches!(
        ModelParams::init(&c, 0),
        Err(Error::Unsupported { .. })
    ));
}

#[test]
fn parallel_and_sequential_gradients_agree_bitwise() {
    let mut c = cfg(Formulation::HyperPg(PdfFamily::TruncGaussian));
    c.per_class = 3;
    let p = ModelParams::init(&c, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let recs = random_records(17, 16, 2, &mut rng);
    let w = LossWeights::default();
    let a = batch_loss_and_grad(&p, &recs, &w, Trainable::ALL, false).unwrap();
    let b = batch_loss_and_grad(&p, &recs, &w, Trainable::ALL, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_gradient_reports_path() {
    let mut p = ModelParams::init(&cfg(Formulation::Cosine), 0).unwrap();
    p.head.bias[1] = f64::NAN;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let recs = random_records(2, 16, 2, &mut rng);
    let err = batch_loss_and_grad(&p, &recs, &LossWeights::default(), Trainable::ALL, false);
    assert!(matches!(
        err,
        Err(Error::NumericalFailure { .. }) | Err(Error::Domain(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    for f in Formulation::ALL {
        let mut p = ModelParams::init(&cfg(f), 21).unwrap();
        let mut flat = p.flatten();
        flat.iter_mut().for_each(|v| *v += 1e-3);
        p.unflatten(&flat).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..10], b"PROTOFORM1");
        assert_eq!(buf.len(), 66 + 8 * p.num_params());
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }
}

#[test]
fn checkpoint_errors() {
    let p = ModelParams::init(&cfg(Formulation::Cosine), 0).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(
        read_checkpoint(&mut bad.as_slice()),
        Err(Error::Format { offset: 0, .. })
    ));
    let cut = &buf[..buf.len() - 1];
    assert!(matches!(
        read_checkpoint(&mut &cut[..]),
        Err(Error::Format { .. })
    ));
    let mut code = buf.clone();
    code[10] = 99;
    assert!(matches!(
        read_checkpoint(&mut code.as_slice()),
        Err(Error::Format { offset: 10, .. })
    ));
}

proptest! {
    #[test]
    fn neck_output_in_open_unit_interval(
        seed in 0u64..1000,
        x in proptest::collection::vec(-5.0f32..5.0, 8),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = NeckParams::kaiming_uniform(4, 3, 6, &mut rng);
        let z = neck_forward(&x, (1, 2), &n).unwrap();
        prop_assert!(z.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn pooling_ignores_cell_order(seed in 0u64..500, shift in 1usize..4) {
        let c = ModelConfig { per_class: 2, ..cfg(Formulation::HyperPg(PdfFamily::TruncGaussian)) };
        let p = ModelParams::init(&c, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut rotated = z.clone();
        rotated.rotate_left(3 * shift);
        let a = prototype_layer_forward(&LatentMap::new(2, 2, 3, z).unwrap(), &p.bank).unwrap();
        let b = prototype_layer_forward(&LatentMap::new(2, 2, 3, rotated).unwrap(), &p.bank).unwrap();
        prop_assert_eq!(a.pooled, b.pooled);
    }

    #[test]
    fn directional_banks_ignore_latent_scale(seed in 0u64..500, scale in 0.05f64..20.0, which in 0usize..4) {
        let f = [
            Formulation::Cosine,
            Formulation::HyperPg(PdfFamily::TruncGaussian),
            Formulation::Vmf,
            Formulation::Mixture,
        ][which];
        let c = ModelConfig { per_class: 3, classes: 3, ..cfg(f) };
        let p = ModelParams::init(&c, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let z: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..1.0)).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let a = prototype_layer_forward(&LatentMap::new(2, 2, 3, z).unwrap(), &p.bank).unwrap();
        let b = prototype_layer_forward(&LatentMap::new(2, 2, 3, scaled).unwrap(), &p.bank).unwrap();
        for (x, y) in a.pooled.iter().zip(&b.pooled) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        let la = head_forward(&a.pooled, &p.head).unwrap();
        let lb = head_forward(&b.pooled, &p.head).unwrap();
        prop_assert_eq!(forward::argmax(&la), forward::argmax(&lb));
    }
}

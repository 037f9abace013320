use dpfnas_core::autodiff::{evaluate, loss_and_gradient, Model, NodeId};
use dpfnas_core::data::{partition_dirichlet, partition_iid};
use dpfnas_core::privacy::normal_cdf;
use dpfnas_core::{
    generate_dataset, Generator, NamedTensors, ParamGroup, ParamSelector, Result,
    SyntheticDatasetSpec, Tape, Tensor,
};

#[test]
fn same_seed_same_data() {
    let spec = SyntheticDatasetSpec {
        per_class: 50,
        ..Default::default()
    };
    assert_eq!(
        generate_dataset(&spec).unwrap(),
        generate_dataset(&spec).unwrap()
    );
    let other = SyntheticDatasetSpec { seed: 1, ..spec };
    assert_ne!(
        generate_dataset(&spec).unwrap(),
        generate_dataset(&other).unwrap()
    );
}

#[test]
fn splits_are_disjoint_and_stratified() {
    let spec = SyntheticDatasetSpec {
        per_class: 40,
        ..Default::default()
    };
    let s = generate_dataset(&spec).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 40, 40));
    let mut rows: Vec<Vec<u64>> = Vec::new();
    for d in [&s.train, &s.val, &s.test] {
        for i in 0..d.len() {
            rows.push(d.row(i).iter().map(|v| v.to_bits()).collect());
        }
        for c in 0..spec.classes {
            assert_eq!(
                d.labels().iter().filter(|&&l| l == c).count(),
                d.len() / spec.classes
            );
        }
    }
    let n = rows.len();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), n);
}

#[test]
fn degenerate_specs_are_rejected() {
    for bad in [
        SyntheticDatasetSpec {
            classes: 1,
            ..Default::default()
        },
        SyntheticDatasetSpec {
            per_class: 2,
            ..Default::default()
        },
        SyntheticDatasetSpec {
            classes: 17,
            ..Default::default()
        },
        SyntheticDatasetSpec {
            generator: Generator::Moons,
            classes: 3,
            ..Default::default()
        },
    ] {
        assert!(generate_dataset(&bad).is_err(), "{bad}");
    }
}

#[test]
fn spec_text_round_trips() {
    let spec = SyntheticDatasetSpec {
        generator: Generator::Moons,
        dim: 3,
        classes: 2,
        per_class: 17,
        margin: 1.25,
        noise: 0.1,
        seed: 42,
    };
    assert_eq!(
        spec.to_string().parse::<SyntheticDatasetSpec>().unwrap(),
        spec
    );
}

#[test]
fn mixture_error_matches_the_two_gaussian_overlap() {
    // Means a distance `sigma` apart: each sits 0.5 sigma from the boundary.
    let spec = SyntheticDatasetSpec {
        dim: 2,
        classes: 2,
        per_class: 50_000,
        margin: std::f64::consts::FRAC_1_SQRT_2,
        noise: 1.0,
        seed: 8,
        ..Default::default()
    };
    let all = spec.sample_all().unwrap();
    // With equal priors and covariances the Bayes rule picks the nearer mean,
    // which here is the larger of the two coordinates.
    let wrong = (0..all.len())
        .filter(|&i| {
            let r = all.row(i);
            usize::from(r[1] > r[0]) != all.labels()[i]
        })
        .count();
    let simulated = wrong as f64 / all.len() as f64;
    let analytic = normal_cdf(-0.5);
    assert!(
        (simulated - analytic).abs() <= 0.01,
        "{simulated} vs {analytic}"
    );
}

/// Multinomial logistic regression.
struct Probe {
    params: NamedTensors,
}

impl Model for Probe {
    fn build(&self, tape: &mut Tape, inputs: NodeId) -> Result<NodeId> {
        let w = tape.param(ParamGroup::Weights, "w", self.params.require("w")?);
        let b = tape.param(ParamGroup::Weights, "b", self.params.require("b")?);
        tape.affine(inputs, w, Some(b))
    }
}

#[test]
fn separable_mixture_is_solved_by_a_linear_probe() {
    let spec = SyntheticDatasetSpec {
        dim: 6,
        classes: 4,
        per_class: 100,
        margin: 5.0,
        noise: 0.0,
        seed: 3,
        ..Default::default()
    };
    let s = generate_dataset(&spec).unwrap();
    let mut probe = Probe {
        params: NamedTensors::new(),
    };
    probe.params.insert("w", Tensor::zeros(&[6, 4]));
    probe.params.insert("b", Tensor::zeros(&[4]));
    let train = s.train.to_batch().unwrap();
    for _ in 0..50 {
        let (_, g) = loss_and_gradient(&probe, &train, &ParamSelector::All).unwrap();
        probe.params.axpy(-0.5, &g).unwrap();
    }
    let eval = evaluate(&probe, &s.test.to_batch().unwrap()).unwrap();
    assert_eq!(eval.error, 0.0);
}

#[test]
fn partitions_cover_the_data() {
    let spec = SyntheticDatasetSpec {
        per_class: 41,
        ..Default::default()
    };
    let s = generate_dataset(&spec).unwrap();
    for k in [1, 3, 7] {
        let parts = partition_iid(&s.train, k, 5).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), s.train.len());
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let skewed = partition_dirichlet(&s.train, k, 0.3, 5).unwrap();
        assert_eq!(skewed.iter().map(|p| p.len()).sum::<usize>(), s.train.len());
    }
}
